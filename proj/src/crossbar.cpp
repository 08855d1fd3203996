#include "l2l/crossbar.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace l2l::xbar {

namespace {

int quantize_signed(double v, double scale, int bits) {
  const int qmax = (1 << (bits - 1)) - 1;  // 127 for 8 bit
  if (scale <= 0) return 0;
  double q = std::round(v / scale * qmax);
  return static_cast<int>(std::clamp(q, double(-qmax), double(qmax)));
}

}  // namespace

CrossbarCore::CrossbarCore(AnalogConfig cfg) : cfg_(cfg) {
  for (auto& p : planes_) p.assign(int64_t(kSize) * kSize, 0.0f);
  for (auto& t : targets_) t.assign(int64_t(kSize) * kSize, 0.0f);
  programmed_.assign(int64_t(kSize) * kSize, 0);
  gain_.assign(kSize, 1.0f);
  offset_.assign(kSize, 0.0f);
}

void CrossbarCore::check_region(const Region& r) const {
  if (r.row0 < 0 || r.col0 < 0 || r.rows <= 0 || r.cols <= 0 ||
      r.row0 + r.rows > kSize || r.col0 + r.cols > kSize)
    throw std::invalid_argument("crossbar: region out of bounds");
}

ProgramReport CrossbarCore::program(const std::vector<float>& weights,
                                    const Region& region, Rng& rng) {
  check_region(region);
  if (static_cast<int64_t>(weights.size()) !=
      int64_t(region.rows) * region.cols)
    throw std::invalid_argument("crossbar: weight count does not match region");
  for (float w : weights)
    if (!(w >= -1.0f && w <= 1.0f))
      throw std::invalid_argument("crossbar: weights must be pre-scaled to [-1, 1]");

  ProgramReport report;
  report.residuals.assign(weights.size(), 0.0f);
  for (int r = 0; r < region.rows; ++r) {
    for (int c = 0; c < region.cols; ++c) {
      const float w = weights[int64_t(r) * region.cols + c];
      const int64_t cell = idx(region.row0 + r, region.col0 + c);
      const bool pos = w > 0.0f;
      const double mag = std::abs(w);  // per-device target; pair sum = 2|w|
      int active0 = pos ? 0 : 2, reset0 = pos ? 2 : 0;
      // RESET the inactive pair (and both pairs for w == 0)
      planes_[reset0][cell] = targets_[reset0][cell] = 0.0f;
      planes_[reset0 + 1][cell] = targets_[reset0 + 1][cell] = 0.0f;
      targets_[active0][cell] = static_cast<float>(mag);
      targets_[active0 + 1][cell] = static_cast<float>(mag);
      if (w == 0.0f) {
        planes_[active0][cell] = planes_[active0 + 1][cell] = 0.0f;
        targets_[active0][cell] = targets_[active0 + 1][cell] = 0.0f;
      } else {
        double read = 0;
        for (int it = 0; it < cfg_.max_verify_iters; ++it) {
          for (int d = 0; d < 2; ++d)
            planes_[active0 + d][cell] = static_cast<float>(std::clamp(
                mag + rng.normal(0.0, cfg_.prog_noise_sigma), 0.0, 1.0));
          read = (planes_[active0][cell] + planes_[active0 + 1][cell]) / 2.0;
          if (std::abs(read - mag) <= cfg_.verify_tolerance) break;
        }
      }
      const double eff = (planes_[0][cell] + planes_[1][cell] -
                          planes_[2][cell] - planes_[3][cell]) / 2.0;
      const double res = std::abs(eff - w);
      report.residuals[int64_t(r) * region.cols + c] = static_cast<float>(res);
      report.max_residual = std::max(report.max_residual, res);
      report.devices_touched += 4;
      programmed_[cell] = 1;
    }
  }
  return report;
}

void CrossbarCore::raw_read(const std::vector<int>& xq, const Region& region,
                            std::vector<double>& out) const {
  out.assign(region.cols, 0.0);
  for (int r = 0; r < region.rows; ++r) {
    const int q = xq[r];
    if (q == 0) continue;
    const int64_t base = idx(region.row0 + r, region.col0);
    const double qpos = q > 0 ? q : 0, qneg = q < 0 ? -q : 0;
    for (int c = 0; c < region.cols; ++c) {
      const double wp = planes_[0][base + c] + planes_[1][base + c];
      const double wn = planes_[2][base + c] + planes_[3][base + c];
      // phases: (in+,W+), (in+,W-), (in-,W+), (in-,W-)
      out[c] += (qpos * wp - qpos * wn - qneg * wp + qneg * wn) / 2.0;
    }
  }
}

std::vector<float> CrossbarCore::mvm(const std::vector<float>& input,
                                     const Region& region) const {
  check_region(region);
  if (static_cast<int>(input.size()) != region.rows)
    throw std::invalid_argument("crossbar: input length does not match region rows");
  if (!region_programmed(region))
    throw std::runtime_error("crossbar: mvm on unprogrammed region");

  const int qmax = (1 << (cfg_.input_bits - 1)) - 1;
  double in_scale = 0;
  for (float v : input) in_scale = std::max(in_scale, std::abs(double(v)));
  std::vector<float> result(region.cols, 0.0f);
  if (in_scale == 0) return result;

  std::vector<double> raw;
  std::vector<int> xq(region.rows);
  if (cfg_.bypass_io_quant) {
    // diagnostic path: exact inputs, no output quantizer
    std::vector<double> acc(region.cols, 0.0);
    for (int r = 0; r < region.rows; ++r) {
      const double x = input[r];
      if (x == 0) continue;
      const int64_t base = idx(region.row0 + r, region.col0);
      for (int c = 0; c < region.cols; ++c) {
        const double wp = planes_[0][base + c] + planes_[1][base + c];
        const double wn = planes_[2][base + c] + planes_[3][base + c];
        acc[c] += x * (wp - wn) / 2.0;
      }
    }
    for (int c = 0; c < region.cols; ++c)
      result[c] = static_cast<float>(gain_[region.col0 + c] * acc[c] +
                                     offset_[region.col0 + c]);
    return result;
  }

  for (int r = 0; r < region.rows; ++r)
    xq[r] = quantize_signed(input[r], in_scale, cfg_.input_bits);
  raw_read(xq, region, raw);

  std::vector<double> corrected(region.cols);
  double out_scale = 0;
  for (int c = 0; c < region.cols; ++c) {
    corrected[c] = gain_[region.col0 + c] * raw[c] + offset_[region.col0 + c];
    out_scale = std::max(out_scale, std::abs(corrected[c]));
  }
  const int oqmax = (1 << (cfg_.output_bits - 1)) - 1;
  for (int c = 0; c < region.cols; ++c) {
    int yq = quantize_signed(corrected[c], out_scale, cfg_.output_bits);
    // back to real units: undo the input count scaling
    result[c] = static_cast<float>(double(yq) / oqmax * out_scale *
                                   (in_scale / qmax));
  }
  return result;
}

std::vector<double> CrossbarCore::mvm_error_bound(
    const std::vector<float>& input, const Region& region) const {
  check_region(region);
  double in_scale = 0;
  for (float v : input) in_scale = std::max(in_scale, std::abs(double(v)));
  const int qmax = (1 << (cfg_.input_bits - 1)) - 1;
  const double in_step = in_scale / qmax;  // worst per-element input error: step/2

  // worst corrected output magnitude bounds the output step
  std::vector<double> bound(region.cols, 0.0);
  std::vector<double> ideal_mag(region.cols, 0.0);
  for (int c = 0; c < region.cols; ++c) {
    double b = 0, mag = 0;
    for (int r = 0; r < region.rows; ++r) {
      const int64_t cell = idx(region.row0 + r, region.col0 + c);
      const double wt = (targets_[0][cell] + targets_[1][cell] -
                         targets_[2][cell] - targets_[3][cell]) / 2.0;
      const double xm = std::abs(double(input[r]));
      b += (xm + in_step / 2) * cfg_.verify_tolerance +
           (in_step / 2) * std::abs(wt);
      mag += (xm + in_step / 2) * (std::abs(wt) + cfg_.verify_tolerance);
    }
    bound[c] = b;
    ideal_mag[c] = mag;
  }
  const int oqmax = (1 << (cfg_.output_bits - 1)) - 1;
  const double out_scale =
      *std::max_element(ideal_mag.begin(), ideal_mag.end());
  for (auto& b : bound) b += out_scale / oqmax / 2;  // half output step
  return bound;
}

void CrossbarCore::calibrate_affine(const Region& region, int probes, Rng& rng) {
  check_region(region);
  if (probes <= 0) return;  // affine left as-is
  std::vector<std::vector<double>> raws(probes);
  std::vector<std::vector<double>> ideals(probes);
  std::vector<int> xq(region.rows);
  const int qmax = (1 << (cfg_.input_bits - 1)) - 1;
  for (int p = 0; p < probes; ++p) {
    std::vector<double> x(region.rows);
    for (int r = 0; r < region.rows; ++r) {
      x[r] = rng.uniform() < 0.5 ? -1.0 : 1.0;
      xq[r] = static_cast<int>(x[r] * qmax);
    }
    raw_read(xq, region, raws[p]);
    ideals[p].assign(region.cols, 0.0);
    for (int r = 0; r < region.rows; ++r) {
      const int64_t base = idx(region.row0 + r, region.col0);
      for (int c = 0; c < region.cols; ++c) {
        const double wt = (targets_[0][base + c] + targets_[1][base + c] -
                           targets_[2][base + c] - targets_[3][base + c]) / 2.0;
        ideals[p][c] += xq[r] * wt;
      }
    }
  }
  for (int c = 0; c < region.cols; ++c) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (int p = 0; p < probes; ++p) {
      sx += raws[p][c];
      sy += ideals[p][c];
      sxx += raws[p][c] * raws[p][c];
      sxy += raws[p][c] * ideals[p][c];
    }
    const double n = probes;
    const double det = n * sxx - sx * sx;
    if (std::abs(det) < 1e-12 * std::max(1.0, sxx * n)) {
      // constant column: keep unit gain, absorb the mean residual
      gain_[region.col0 + c] = 1.0f;
      offset_[region.col0 + c] = static_cast<float>((sy - sx) / n);
      ++calib_warnings_;
    } else {
      const double gain = (n * sxy - sx * sy) / det;
      gain_[region.col0 + c] = static_cast<float>(gain);
      offset_[region.col0 + c] = static_cast<float>((sy - gain * sx) / n);
    }
  }
}

void CrossbarCore::drift_apply(double time_factor) {
  if (time_factor <= 0)
    throw std::invalid_argument("crossbar: drift time factor must be positive");
  if (cfg_.drift_nu == 0.0) return;
  const double f = std::pow(time_factor, -cfg_.drift_nu);
  for (auto& plane : planes_)
    for (auto& g : plane)
      if (g > 0.0f) g = static_cast<float>(g * f);
}

std::vector<float> CrossbarCore::read_effective(const Region& region) const {
  check_region(region);
  std::vector<float> out(int64_t(region.rows) * region.cols);
  for (int r = 0; r < region.rows; ++r)
    for (int c = 0; c < region.cols; ++c) {
      const int64_t cell = idx(region.row0 + r, region.col0 + c);
      out[int64_t(r) * region.cols + c] =
          static_cast<float>((planes_[0][cell] + planes_[1][cell] -
                              planes_[2][cell] - planes_[3][cell]) / 2.0);
    }
  return out;
}

std::vector<float> CrossbarCore::target_weights(const Region& region) const {
  check_region(region);
  std::vector<float> out(int64_t(region.rows) * region.cols);
  for (int r = 0; r < region.rows; ++r)
    for (int c = 0; c < region.cols; ++c) {
      const int64_t cell = idx(region.row0 + r, region.col0 + c);
      out[int64_t(r) * region.cols + c] =
          static_cast<float>((targets_[0][cell] + targets_[1][cell] -
                              targets_[2][cell] - targets_[3][cell]) / 2.0);
    }
  return out;
}

bool CrossbarCore::region_programmed(const Region& region) const {
  for (int r = 0; r < region.rows; ++r)
    for (int c = 0; c < region.cols; ++c)
      if (!programmed_[idx(region.row0 + r, region.col0 + c)]) return false;
  return true;
}

namespace {
template <typename T>
void put(std::vector<uint8_t>& out, const T& v) {
  const auto* p = reinterpret_cast<const uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}
template <typename T>
T get(const std::vector<uint8_t>& in, size_t& pos) {
  if (pos + sizeof(T) > in.size())
    throw std::runtime_error("crossbar blob: truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}
}  // namespace

std::vector<uint8_t> CrossbarCore::export_blob() const {
  std::vector<uint8_t> out;
  out.insert(out.end(), {'P', 'C', 'M', 'C'});
  put<uint32_t>(out, 1);  // version
  put<uint32_t>(out, kSize);
  put<uint32_t>(out, kSize);
  for (const auto& p : planes_)
    for (float v : p) put(out, v);
  for (const auto& t : targets_)
    for (float v : t) put(out, v);
  for (float v : gain_) put(out, v);
  for (float v : offset_) put(out, v);
  out.insert(out.end(), programmed_.begin(), programmed_.end());
  return out;
}

CrossbarCore CrossbarCore::import_blob(const std::vector<uint8_t>& blob) {
  size_t pos = 0;
  if (blob.size() < 4 || std::memcmp(blob.data(), "PCMC", 4) != 0)
    throw std::runtime_error("crossbar blob: bad magic");
  pos = 4;
  if (get<uint32_t>(blob, pos) != 1)
    throw std::runtime_error("crossbar blob: unsupported version");
  if (get<uint32_t>(blob, pos) != kSize || get<uint32_t>(blob, pos) != kSize)
    throw std::runtime_error("crossbar blob: dimension mismatch");
  CrossbarCore core;
  for (auto& p : core.planes_)
    for (auto& v : p) v = get<float>(blob, pos);
  for (auto& t : core.targets_)
    for (auto& v : t) v = get<float>(blob, pos);
  for (auto& v : core.gain_) v = get<float>(blob, pos);
  for (auto& v : core.offset_) v = get<float>(blob, pos);
  if (pos + core.programmed_.size() > blob.size())
    throw std::runtime_error("crossbar blob: truncated");
  std::copy(blob.begin() + pos, blob.begin() + pos + core.programmed_.size(),
            core.programmed_.begin());
  return core;
}

std::vector<float> quantize_stochastic(const std::vector<float>& values,
                                       int levels, Rng& rng,
                                       int64_t* clamp_warnings) {
  if (levels < 2) throw std::invalid_argument("quantize_stochastic: levels < 2");
  const double step = 2.0 / (levels - 1);
  std::vector<float> out(values.size());
  for (size_t i = 0; i < values.size(); ++i) {
    double v = values[i];
    if (v < -1.0 || v > 1.0) {
      if (clamp_warnings) ++*clamp_warnings;
      v = std::clamp(v, -1.0, 1.0);
    }
    double q = (v + 1.0) / step;
    double lo = std::floor(q);
    double p = q - lo;
    if (p > 0 && rng.uniform() < p) lo += 1;
    out[i] = static_cast<float>(std::min(lo, double(levels - 1)) * step - 1.0);
  }
  return out;
}

}  // namespace l2l::xbar
