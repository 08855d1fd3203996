#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "l2l/rng.hpp"

namespace l2l::robot {

inline constexpr int kTrialSteps = 250;
inline constexpr double kDt = 0.001;        // 1 ms
inline constexpr int kClockNeurons = 5;
inline constexpr int kRegionsPerDim = 16;
inline constexpr int kPositionNeurons = 3 * kRegionsPerDim;  // 48

// Denavit-Hartenberg description of the arm: theta offset (rad), d (cm),
// a (cm), alpha (rad) per joint.
struct DhParams {
  std::array<double, 4> theta;
  std::array<double, 4> d;
  std::array<double, 4> a;
  std::array<double, 4> alpha;

  static DhParams ed_scorbot();
};

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

// Relative angles of the two controlled joints (base, shoulder); joints 3-4
// stay at zero relative angle.
struct JointState {
  double base = 0;
  double shoulder = 0;
};

struct SafetyLimits {
  double max_rel_angle = 0.9;   // rad, per controlled joint
  double max_velocity = 1.5;    // rad/s
};

struct Trajectory {
  // length-250 series
  std::vector<std::array<double, 2>> velocities;  // rad/s
  std::vector<std::array<double, 2>> angles;      // rad, relative
  std::vector<Vec3> positions;                    // cm
};

struct TrajectoryConfig {
  double wiener_variance = 0.09;
  int hann_length = 120;
  SafetyLimits limits;
  int max_resamples = 100;
};

// End-effector position (cm) from the closed-form expansion of the D-H chain.
Vec3 forward_kinematics(const DhParams& dh, const JointState& js);

// d(position)/d(base, shoulder), 3x2, cm/rad. Used by the differentiable
// arm-position node during outer-loop training.
std::array<std::array<double, 2>, 3> position_jacobian(const DhParams& dh,
                                                       const JointState& js);

Trajectory integrate_velocities(const std::vector<std::array<double, 2>>& phi,
                                const DhParams& dh, const JointState& initial,
                                const SafetyLimits& limits);

// Wiener-process velocity targets smoothed with a unit-sum Hann window,
// velocity-clamped to the safety limits, integrated to positions.
Trajectory gen_target_trajectory(Rng& rng, const DhParams& dh,
                                 const TrajectoryConfig& cfg);

struct WorkspaceBox {
  Vec3 lo, hi;
};

// Bounding box of reachable positions, estimated once from sampled safe
// trajectories with a 5% margin. Deterministic (internal fixed seed).
const WorkspaceBox& workspace_box(const DhParams& dh);

int region_index(double value, double lo, double hi);  // boundary -> lower

// The three region neurons (one per dimension) encoding a position.
std::array<int, 3> active_neurons(const Vec3& p, const WorkspaceBox& box);

// 48 x 250 spike trains; the active region neuron per dimension fires
// regularly at 100 Hz (every 10 steps, phase 0).
std::vector<std::vector<uint8_t>> encode_position_spikes(
    const std::vector<Vec3>& positions, const WorkspaceBox& box,
    int64_t* clamp_warnings = nullptr);

// 5 x 250; neuron i covers steps [50i, 50(i+1)) at regular 100 Hz.
std::vector<std::vector<uint8_t>> clock_signal();

struct RmseReport {
  std::array<double, 2> velocity_rmse;  // rad/s per joint
  double euclidean_rmse = 0;            // cm
};

RmseReport trajectory_rmse(const Trajectory& produced, const Trajectory& target);

}  // namespace l2l::robot
