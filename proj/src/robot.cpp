#include "l2l/robot.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>

namespace l2l::robot {

DhParams DhParams::ed_scorbot() {
  const double pi = M_PI;
  DhParams p;
  p.theta = {-23.6 * pi / 180.0, 22.0 * pi / 180.0, 22.4 * pi / 180.0, 0.0};
  p.d = {35.85, -9.8, 6.5, 0.0};
  p.a = {5.0, 30.0, 35.0, 22.0};
  p.alpha = {pi / 2.0, pi, 0.0, 0.0};
  return p;
}

namespace {

struct FkEval {
  double x, y, z;
  double jx1, jx2, jy1, jy2, jz1, jz2;
};

// Closed-form expansion of T1*T2*T3*T4 applied to the origin, plus the
// Jacobian with respect to the two controlled joint angles.
FkEval fk_closed_form(const DhParams& dh, const JointState& js) {
  const double th1 = dh.theta[0] + js.base;
  const double th2 = dh.theta[1] + js.shoulder;
  const double th3 = dh.theta[2];
  const double th4 = dh.theta[3];
  const double d1 = dh.d[0], d2 = dh.d[1], d3 = dh.d[2], d4 = dh.d[3];
  const double a1 = dh.a[0], a2 = dh.a[1], a3 = dh.a[2], a4 = dh.a[3];
  const double al1 = dh.alpha[0], al2 = dh.alpha[1], al3 = dh.alpha[2];

  const double x0 = cos(th1);
  const double x1 = cos(th2);
  const double x2 = x0 * x1;
  const double x3 = sin(th1);
  const double x4 = sin(al1);
  const double x5 = x3 * x4;
  const double x6 = cos(al1);
  const double x7 = sin(th2);
  const double x8 = x3 * x7;
  const double x9 = x6 * x8;
  const double x10 = cos(th3);
  const double x11 = -x2 + x9;
  const double x12 = x10 * x11;
  const double x13 = cos(al2);
  const double x14 = sin(al2);
  const double x15 = x0 * x7;
  const double x16 = x1 * x3;
  const double x17 = x14 * x6;
  const double x18 = x13 * x5 + x14 * x15 + x16 * x17;
  const double x19 = sin(th3);
  const double x20 = x13 * x6;
  const double x21 = x13 * x15 - x14 * x5 + x16 * x20;
  const double x22 = x19 * x21;
  const double x23 = cos(th4);
  const double x24 = a4 * x23;
  const double x25 = sin(al3);
  const double x26 = x11 * x19;
  const double x27 = cos(al3);
  const double x28 = x10 * x21;
  const double x29 = sin(th4);
  const double x30 = a4 * x29;
  const double x31 = a1 * x0 + a2 * x2 - a2 * x9 - a3 * x12 - a3 * x22 + d2 * x5 +
                     d3 * x18 + d4 * (x18 * x27 - x25 * x26 + x25 * x28) -
                     x24 * (x12 + x22) + x30 * (x18 * x25 + x26 * x27 - x27 * x28);
  const double x32 = a2 * x16;
  const double x33 = x0 * x4;
  const double x34 = x15 * x6;
  const double x35 = x16 + x34;
  const double x36 = x10 * x35;
  const double x37 = x13 * x33 - x14 * x8 + x17 * x2;
  const double x38 = x13 * x8 + x14 * x33 - x2 * x20;
  const double x39 = x19 * x38;
  const double x40 = x19 * x35;
  const double x41 = x10 * x38;
  const double x42 = a1 * x3 + a2 * x34 + a3 * x36 - a3 * x39 - d2 * x33 - d3 * x37 +
                     d4 * (x25 * x40 + x25 * x41 - x27 * x37) + x24 * (x36 - x39) -
                     x30 * (x25 * x37 + x27 * x40 + x27 * x41) + x32;
  const double x43 = x4 * x7;
  const double x44 = x10 * x43;
  const double x45 = x1 * x4;
  const double x46 = x14 * x45 - x20;
  const double x47 = x13 * x45 + x17;
  const double x48 = x19 * x47;
  const double x49 = x19 * x43;
  const double x50 = x10 * x47;
  const double x51 = x15 + x16 * x6;
  const double x52 = x10 * x51;
  const double x53 = x11 * x14;
  const double x54 = x19 * x51;
  const double x55 = x12 * x13;
  const double x56 = -x2 * x6 + x8;
  const double x57 = x10 * x56;
  const double x58 = x13 * x40;
  const double x59 = x14 * x35;
  const double x60 = x19 * x56;
  const double x61 = x13 * x36;
  const double x62 = x1 * x10;
  const double x63 = x14 * x7;
  const double x64 = x13 * x7;
  const double x65 = x19 * x64;
  const double x66 = x1 * x19;
  const double x67 = x10 * x64;

  FkEval r;
  r.x = x31;
  r.y = x42;
  r.z = a2 * x43 + a3 * x44 + a3 * x48 + d1 + d2 * x6 - d3 * x46 -
        d4 * (-x25 * x49 + x25 * x50 + x27 * x46) + x24 * (x44 + x48) -
        x30 * (x25 * x46 + x27 * x49 - x27 * x50);
  r.jx1 = -x42;
  r.jx2 = -a2 * x15 + a3 * x11 * x13 * x19 - a3 * x52 +
          a4 * x23 * (x13 * x26 - x52) +
          a4 * x29 * (-x25 * x53 + x27 * x54 + x27 * x55) - d3 * x53 -
          d4 * (x25 * x54 + x25 * x55 + x27 * x53) - x32 * x6;
  r.jy1 = x31;
  r.jy2 = a2 * x0 * x1 * x6 - a2 * x8 - a3 * x57 - a3 * x58 +
          a4 * x29 * (x25 * x59 + x27 * x60 - x27 * x61) + d3 * x14 * x35 +
          d4 * (-x25 * x60 + x25 * x61 + x27 * x59) - x24 * (x57 + x58);
  r.jz1 = 0;
  r.jz2 = x4 * (a2 * x1 + a3 * x62 - a3 * x65 + d3 * x63 +
                d4 * (x25 * x66 + x25 * x67 + x27 * x63) - x24 * (-x62 + x65) -
                x30 * (-x25 * x63 + x27 * x66 + x27 * x67));
  return r;
}

}  // namespace

Vec3 forward_kinematics(const DhParams& dh, const JointState& js) {
  FkEval r = fk_closed_form(dh, js);
  return {r.x, r.y, r.z};
}

std::array<std::array<double, 2>, 3> position_jacobian(const DhParams& dh,
                                                       const JointState& js) {
  FkEval r = fk_closed_form(dh, js);
  return {{{r.jx1, r.jx2}, {r.jy1, r.jy2}, {r.jz1, r.jz2}}};
}

Trajectory integrate_velocities(const std::vector<std::array<double, 2>>& phi,
                                const DhParams& dh, const JointState& initial,
                                const SafetyLimits& limits) {
  if (static_cast<int>(phi.size()) != kTrialSteps)
    throw std::invalid_argument("integrate_velocities: series must have 250 steps");
  Trajectory traj;
  traj.velocities = phi;
  traj.angles.resize(kTrialSteps);
  traj.positions.resize(kTrialSteps);
  double base = initial.base, shoulder = initial.shoulder;
  for (int t = 0; t < kTrialSteps; ++t) {
    base += phi[t][0] * kDt;
    shoulder += phi[t][1] * kDt;
    if (std::abs(phi[t][0]) > limits.max_velocity ||
        std::abs(phi[t][1]) > limits.max_velocity ||
        std::abs(base) > limits.max_rel_angle ||
        std::abs(shoulder) > limits.max_rel_angle)
      throw std::runtime_error("integrate_velocities: safety limit violated at step " +
                               std::to_string(t));
    traj.angles[t] = {base, shoulder};
    traj.positions[t] = forward_kinematics(dh, {base, shoulder});
  }
  return traj;
}

Trajectory gen_target_trajectory(Rng& rng, const DhParams& dh,
                                 const TrajectoryConfig& cfg) {
  const double inc_std = std::sqrt(cfg.wiener_variance);
  const int M = cfg.hann_length;
  // unit-sum Hann window
  std::vector<double> hann(M);
  double hsum = 0;
  for (int n = 0; n < M; ++n) {
    hann[n] = 0.5 - 0.5 * std::cos(2.0 * M_PI * n / (M - 1));
    hsum += hann[n];
  }
  for (auto& h : hann) h /= hsum;

  for (int attempt = 0; attempt < cfg.max_resamples; ++attempt) {
    std::vector<std::array<double, 2>> phi(kTrialSteps, {0, 0});
    for (int j = 0; j < 2; ++j) {
      std::vector<double> w(kTrialSteps);
      double acc = 0;  // W_0 = 0
      for (int t = 0; t < kTrialSteps; ++t) {
        w[t] = acc;
        acc += rng.normal(0.0, inc_std);
      }
      // "same" convolution, zero-padded edges
      for (int t = 0; t < kTrialSteps; ++t) {
        double s = 0;
        for (int n = 0; n < M; ++n) {
          int src = t + n - M / 2;
          if (src >= 0 && src < kTrialSteps) s += hann[n] * w[src];
        }
        phi[t][j] = std::clamp(s, -cfg.limits.max_velocity, cfg.limits.max_velocity);
      }
    }
    try {
      return integrate_velocities(phi, dh, JointState{}, cfg.limits);
    } catch (const std::runtime_error&) {
      continue;  // angle limit hit, resample
    }
  }
  throw std::runtime_error("gen_target_trajectory: resample budget exhausted");
}

const WorkspaceBox& workspace_box(const DhParams& dh) {
  static std::once_flag once;
  static WorkspaceBox box;
  std::call_once(once, [&dh] {
    Rng rng(0x57b0c5ULL);  // fixed: the box is a constant of the task family
    TrajectoryConfig cfg;
    Vec3 lo{1e30, 1e30, 1e30}, hi{-1e30, -1e30, -1e30};
    for (int i = 0; i < 10000; ++i) {
      Trajectory t = gen_target_trajectory(rng, dh, cfg);
      for (const auto& p : t.positions) {
        lo.x = std::min(lo.x, p.x); hi.x = std::max(hi.x, p.x);
        lo.y = std::min(lo.y, p.y); hi.y = std::max(hi.y, p.y);
        lo.z = std::min(lo.z, p.z); hi.z = std::max(hi.z, p.z);
      }
    }
    auto widen = [](double& l, double& h) {
      double m = 0.05 * (h - l);
      l -= m;
      h += m;
    };
    widen(lo.x, hi.x);
    widen(lo.y, hi.y);
    widen(lo.z, hi.z);
    box = {lo, hi};
  });
  return box;
}

int region_index(double value, double lo, double hi) {
  const double w = (hi - lo) / kRegionsPerDim;
  int idx = static_cast<int>(std::ceil((value - lo) / w)) - 1;  // boundary -> lower
  return std::clamp(idx, 0, kRegionsPerDim - 1);
}

std::array<int, 3> active_neurons(const Vec3& p, const WorkspaceBox& box) {
  return {region_index(std::clamp(p.x, box.lo.x, box.hi.x), box.lo.x, box.hi.x),
          kRegionsPerDim + region_index(std::clamp(p.y, box.lo.y, box.hi.y),
                                        box.lo.y, box.hi.y),
          2 * kRegionsPerDim + region_index(std::clamp(p.z, box.lo.z, box.hi.z),
                                            box.lo.z, box.hi.z)};
}

std::vector<std::vector<uint8_t>> encode_position_spikes(
    const std::vector<Vec3>& positions, const WorkspaceBox& box,
    int64_t* clamp_warnings) {
  if (static_cast<int>(positions.size()) != kTrialSteps)
    throw std::invalid_argument("encode_position_spikes: need 250 positions");
  std::vector<std::vector<uint8_t>> spikes(
      kPositionNeurons, std::vector<uint8_t>(kTrialSteps, 0));
  for (int t = 0; t < kTrialSteps; ++t) {
    const double vals[3] = {positions[t].x, positions[t].y, positions[t].z};
    const double los[3] = {box.lo.x, box.lo.y, box.lo.z};
    const double his[3] = {box.hi.x, box.hi.y, box.hi.z};
    for (int dim = 0; dim < 3; ++dim) {
      if ((vals[dim] < los[dim] || vals[dim] > his[dim]) && clamp_warnings)
        ++*clamp_warnings;
      int r = region_index(std::clamp(vals[dim], los[dim], his[dim]),
                           los[dim], his[dim]);
      if (t % 10 == 0) spikes[dim * kRegionsPerDim + r][t] = 1;
    }
  }
  return spikes;
}

std::vector<std::vector<uint8_t>> clock_signal() {
  std::vector<std::vector<uint8_t>> spikes(
      kClockNeurons, std::vector<uint8_t>(kTrialSteps, 0));
  for (int i = 0; i < kClockNeurons; ++i)
    for (int t = 50 * i; t < 50 * (i + 1); ++t)
      if ((t - 50 * i) % 10 == 0) spikes[i][t] = 1;
  return spikes;
}

RmseReport trajectory_rmse(const Trajectory& produced, const Trajectory& target) {
  if (produced.velocities.size() != target.velocities.size() ||
      produced.positions.size() != target.positions.size())
    throw std::invalid_argument("trajectory_rmse: length mismatch");
  const int T = static_cast<int>(produced.velocities.size());
  RmseReport r{{0, 0}, 0};
  for (int t = 0; t < T; ++t) {
    for (int j = 0; j < 2; ++j) {
      double dv = produced.velocities[t][j] - target.velocities[t][j];
      r.velocity_rmse[j] += dv * dv;
    }
    double dx = produced.positions[t].x - target.positions[t].x;
    double dy = produced.positions[t].y - target.positions[t].y;
    double dz = produced.positions[t].z - target.positions[t].z;
    r.euclidean_rmse += dx * dx + dy * dy + dz * dz;
  }
  r.velocity_rmse[0] = std::sqrt(r.velocity_rmse[0] / T);
  r.velocity_rmse[1] = std::sqrt(r.velocity_rmse[1] / T);
  r.euclidean_rmse = std::sqrt(r.euclidean_rmse / T);
  return r;
}

}  // namespace l2l::robot
