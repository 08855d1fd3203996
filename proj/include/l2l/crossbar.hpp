#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "l2l/rng.hpp"

namespace l2l::xbar {

inline constexpr int kSize = 256;

struct AnalogConfig {
  int input_bits = 8;
  int output_bits = 8;
  int weight_levels = 15;          // 4-bit-equivalent signed levels
  double prog_noise_sigma = 0.02;  // fraction of g_max per write
  double verify_tolerance = 1.0 / 30.0;
  int max_verify_iters = 20;
  double drift_nu = 0.0;           // 0 disables drift
  // diagnostic mode: bypass input/output quantization for exactness checks
  bool bypass_io_quant = false;
};

struct Region {
  int row0 = 0, col0 = 0, rows = 0, cols = 0;
};

struct ProgramReport {
  std::vector<float> residuals;  // |read-back effective - requested|, rows x cols
  double max_residual = 0;
  int64_t devices_touched = 0;
};

// One PCM core: a 256x256 grid of differential 4R8T unit cells with
// per-column affine correction. Conductances are normalized to [0, 1];
// a cell's effective weight is (pos pair sum - neg pair sum) / 2, each
// active device holding half of the pair total.
class CrossbarCore {
 public:
  explicit CrossbarCore(AnalogConfig cfg = {});

  const AnalogConfig& config() const { return cfg_; }
  AnalogConfig& config() { return cfg_; }

  // Iterative read-write-verify programming of `weights` (row-major,
  // rows x cols, pre-scaled to [-1, 1]) into `region`. The inactive pair of
  // each cell is driven to RESET.
  ProgramReport program(const std::vector<float>& weights, const Region& region,
                        Rng& rng);

  // 4-phase analog MVM: y = x^T W over the region, signed 8-bit input and
  // output quantization with per-call max-abs scaling, per-column affine
  // correction between the analog read and the output quantizer.
  std::vector<float> mvm(const std::vector<float>& input, const Region& region) const;

  // Least-squares per-column (gain, offset) fit of raw analog reads against
  // ideal products of the programmed target weights over random +-1 probes.
  void calibrate_affine(const Region& region, int probes, Rng& rng);

  void drift_apply(double time_factor);

  // Read-back of effective weights (differential pair means).
  std::vector<float> read_effective(const Region& region) const;
  std::vector<float> target_weights(const Region& region) const;

  // Analytic per-column error bound from the three quantizers (input step,
  // programming tolerance, output step) for a given call.
  std::vector<double> mvm_error_bound(const std::vector<float>& input,
                                      const Region& region) const;

  bool region_programmed(const Region& region) const;
  int64_t calibration_warnings() const { return calib_warnings_; }

  // Bit-exact binary checkpoint ("PCMC" header).
  std::vector<uint8_t> export_blob() const;
  static CrossbarCore import_blob(const std::vector<uint8_t>& blob);

  // raw device access (tests)
  float conductance(int row, int col, int device) const {
    return planes_[device][idx(row, col)];
  }

 private:
  static int64_t idx(int row, int col) { return int64_t(row) * kSize + col; }
  void check_region(const Region& r) const;
  // raw analog column sums (post 4-phase combination, pre-affine), in units
  // of quantized-input counts times effective weight
  void raw_read(const std::vector<int>& xq, const Region& region,
                std::vector<double>& out) const;

  AnalogConfig cfg_;
  // device planes: 0,1 = positive pair; 2,3 = negative pair
  std::array<std::vector<float>, 4> planes_;
  std::array<std::vector<float>, 4> targets_;
  std::vector<uint8_t> programmed_;
  std::vector<float> gain_, offset_;
  int64_t calib_warnings_ = 0;
};

// Stochastic rounding onto `levels` uniformly spaced signed levels in [-1, 1].
// Out-of-range inputs are clamped and counted.
std::vector<float> quantize_stochastic(const std::vector<float>& values,
                                       int levels, Rng& rng,
                                       int64_t* clamp_warnings = nullptr);

}  // namespace l2l::xbar
