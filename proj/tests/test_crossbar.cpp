#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <l2l/crossbar.hpp>

using namespace l2l;
using namespace l2l::xbar;

namespace {

AnalogConfig noise_free() {
  AnalogConfig cfg;
  cfg.prog_noise_sigma = 0.0;
  return cfg;
}

std::vector<float> rand_weights(int n, Rng& rng) {
  std::vector<float> w(n);
  for (auto& v : w) v = float(rng.uniform(-1.0, 1.0));
  return w;
}

}  // namespace

TEST_CASE("programming: zero weight leaves all four devices in RESET") {
  CrossbarCore core(noise_free());
  Rng rng(1);
  core.program({0.0f}, {0, 0, 1, 1}, rng);
  for (int d = 0; d < 4; ++d) CHECK(core.conductance(0, 0, d) == 0.0f);
  CHECK(core.read_effective({0, 0, 1, 1})[0] == doctest::Approx(0.0));
}

TEST_CASE("programming: sign selects the pair, other pair RESET") {
  CrossbarCore core(noise_free());
  Rng rng(2);
  core.program({0.5f, -0.25f}, {0, 0, 1, 2}, rng);
  // +0.5: positive pair active
  CHECK(core.conductance(0, 0, 0) > 0.0f);
  CHECK(core.conductance(0, 0, 1) > 0.0f);
  CHECK(core.conductance(0, 0, 2) == 0.0f);
  CHECK(core.conductance(0, 0, 3) == 0.0f);
  // -0.25: negative pair active
  CHECK(core.conductance(0, 1, 0) == 0.0f);
  CHECK(core.conductance(0, 1, 1) == 0.0f);
  CHECK(core.conductance(0, 1, 2) > 0.0f);
  CHECK(core.conductance(0, 1, 3) > 0.0f);
  auto eff = core.read_effective({0, 0, 1, 2});
  CHECK(eff[0] == doctest::Approx(0.5));
  CHECK(eff[1] == doctest::Approx(-0.25));
}

TEST_CASE("programming: 1000 random weights, residual std within tolerance") {
  CrossbarCore core;  // default noise on
  Rng rng(3);
  Region reg{0, 0, 50, 20};
  auto w = rand_weights(1000, rng);
  auto rep = core.program(w, reg, rng);
  REQUIRE(rep.residuals.size() == 1000);
  CHECK(rep.devices_touched == 4000);
  double s2 = 0;
  for (float r : rep.residuals) s2 += double(r) * r;
  CHECK(std::sqrt(s2 / 1000) <= core.config().verify_tolerance);
  CHECK(rep.max_residual <= 2 * core.config().verify_tolerance);
}

TEST_CASE("programming errors: bounds and scaling") {
  CrossbarCore core;
  Rng rng(4);
  CHECK_THROWS(core.program(std::vector<float>(4, 0.1f), {255, 255, 2, 2}, rng));
  CHECK_THROWS(core.program({1.5f}, {0, 0, 1, 1}, rng));
}

TEST_CASE("mvm: identity block routes a basis vector through") {
  CrossbarCore core(noise_free());
  Rng rng(5);
  std::vector<float> I(64, 0.0f);
  for (int i = 0; i < 8; ++i) I[i * 8 + i] = 1.0f;
  Region reg{0, 0, 8, 8};
  core.program(I, reg, rng);
  std::vector<float> x(8, 0.0f);
  x[3] = 1.0f;
  auto y = core.mvm(x, reg);
  const double out_step = 2.0 / 254;  // signed 8-bit, per-call max-abs 1
  for (int i = 0; i < 8; ++i)
    CHECK(std::abs(y[i] - x[i]) <= out_step + 1e-6);
}

TEST_CASE("mvm: noise-off diagnostic mode equals exact matmul") {
  AnalogConfig cfg = noise_free();
  cfg.bypass_io_quant = true;
  CrossbarCore core(cfg);
  Rng rng(6);
  Region reg{10, 30, 16, 16};
  auto w = rand_weights(256, rng);
  core.program(w, reg, rng);
  auto x = rand_weights(16, rng);
  auto y = core.mvm(x, reg);
  for (int c = 0; c < 16; ++c) {
    double exact = 0;
    for (int r = 0; r < 16; ++r) exact += double(x[r]) * w[r * 16 + c];
    CHECK(y[c] == doctest::Approx(exact).epsilon(1e-6));
  }
}

TEST_CASE("mvm: random 16x16, noise off, within the quantizer bound") {
  CrossbarCore core(noise_free());
  Rng rng(7);
  Region reg{0, 0, 16, 16};
  auto w = rand_weights(256, rng);
  core.program(w, reg, rng);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = rand_weights(16, rng);
    auto y = core.mvm(x, reg);
    auto bound = core.mvm_error_bound(x, reg);
    for (int c = 0; c < 16; ++c) {
      double exact = 0;
      for (int r = 0; r < 16; ++r) exact += double(x[r]) * w[r * 16 + c];
      CHECK(std::abs(y[c] - exact) <= bound[c] + 1e-9);
    }
  }
}

TEST_CASE("mvm: mixed signs equal the masked four-phase oracle") {
  AnalogConfig cfg = noise_free();
  cfg.bypass_io_quant = true;
  CrossbarCore core(cfg);
  Rng rng(8);
  Region reg{0, 0, 12, 9};
  auto w = rand_weights(12 * 9, rng);
  core.program(w, reg, rng);
  auto eff = core.read_effective(reg);
  auto x = rand_weights(12, rng);
  auto y = core.mvm(x, reg);
  for (int c = 0; c < 9; ++c) {
    // sum of the four single-sign partial products
    double pp = 0, pn = 0, np = 0, nn = 0;
    for (int r = 0; r < 12; ++r) {
      double xp = x[r] > 0 ? x[r] : 0, xn = x[r] < 0 ? -x[r] : 0;
      double wp = eff[r * 9 + c] > 0 ? eff[r * 9 + c] : 0;
      double wn = eff[r * 9 + c] < 0 ? -eff[r * 9 + c] : 0;
      pp += xp * wp;
      pn += xp * wn;
      np += xn * wp;
      nn += xn * wn;
    }
    CHECK(y[c] == doctest::Approx(pp - pn - np + nn).epsilon(1e-5));
  }
}

TEST_CASE("mvm on an unprogrammed region is a usage error") {
  CrossbarCore core;
  CHECK_THROWS(core.mvm(std::vector<float>(8, 0.1f), {0, 0, 8, 8}));
}

TEST_CASE("stochastic quantizer: level-aligned, midpoint, unbiased") {
  Rng rng(9);
  // 15 signed levels over [-1, 1]: step 2/14 = 1/7
  std::vector<float> aligned{-1.0f, 0.0f, 1.0f, 1.0f / 7.0f, -3.0f / 7.0f};
  for (int i = 0; i < 50; ++i) {
    auto q = xbar::quantize_stochastic(aligned, 15, rng);
    for (size_t j = 0; j < aligned.size(); ++j)
      CHECK(q[j] == doctest::Approx(aligned[j]).epsilon(1e-6));
  }

  // midpoint rounds up with probability ~0.5
  const float mid = 0.5f / 7.0f;
  int ups = 0;
  const int N = 20000;
  for (int i = 0; i < N; ++i) {
    auto q = xbar::quantize_stochastic({mid}, 15, rng);
    if (q[0] > mid) ++ups;
  }
  CHECK(std::abs(ups / double(N) - 0.5) < 3 * 0.5 / std::sqrt(double(N)));

  // unbiasedness at 0.3 over 1e5 draws (3 sigma)
  double sum = 0;
  const int M = 100000;
  for (int i = 0; i < M; ++i) sum += xbar::quantize_stochastic({0.3f}, 15, rng)[0];
  double mean = sum / M;
  CHECK(std::abs(mean - 0.3) < 0.003);

  // clamping counts a warning
  int64_t warn = 0;
  auto q = xbar::quantize_stochastic({2.0f, -2.0f}, 15, rng, &warn);
  CHECK(warn == 2);
  CHECK(q[0] == doctest::Approx(1.0f));
  CHECK(q[1] == doctest::Approx(-1.0f));
}

TEST_CASE("calibration: noise-free core keeps identity affine") {
  CrossbarCore core(noise_free());
  Rng rng(10);
  Region reg{0, 0, 16, 16};
  core.program(rand_weights(256, rng), reg, rng);
  core.calibrate_affine(reg, 64, rng);
  AnalogConfig cfg = noise_free();
  cfg.bypass_io_quant = true;
  // gains ~1, offsets ~0: calibrated mvm still matches exact matmul
  auto x = rand_weights(16, rng);
  auto y = core.mvm(x, reg);
  auto w = core.target_weights(reg);
  for (int c = 0; c < 16; ++c) {
    double exact = 0;
    for (int r = 0; r < 16; ++r) exact += double(x[r]) * w[r * 16 + c];
    auto bound = core.mvm_error_bound(x, reg);
    CHECK(std::abs(y[c] - exact) <= bound[c] + 1e-6);
  }
}

TEST_CASE("calibration with zero probes is a no-op") {
  CrossbarCore core(noise_free());
  Rng rng(11);
  Region reg{0, 0, 8, 8};
  core.program(rand_weights(64, rng), reg, rng);
  auto x = rand_weights(8, rng);
  auto before = core.mvm(x, reg);
  core.calibrate_affine(reg, 0, rng);
  CHECK(core.mvm(x, reg) == before);
}

TEST_CASE("calibration reduces the error of a noisy core") {
  CrossbarCore core;  // programming noise on
  Rng rng(12);
  Region reg{0, 0, 32, 24};
  auto w = rand_weights(32 * 24, rng);
  core.program(w, reg, rng);

  auto err = [&](int seed) {
    Rng r(seed);
    double e = 0;
    for (int trial = 0; trial < 32; ++trial) {
      auto x = rand_weights(32, r);
      auto y = core.mvm(x, reg);
      for (int c = 0; c < 24; ++c) {
        double exact = 0;
        for (int rr = 0; rr < 32; ++rr) exact += double(x[rr]) * w[rr * 24 + c];
        e += std::abs(y[c] - exact);
      }
    }
    return e;
  };
  double pre = err(100);
  core.calibrate_affine(reg, 256, rng);
  double post = err(100);
  CHECK(post < pre);
}

TEST_CASE("drift: formula, no-op at nu=0, usage error, recovery by calibration") {
  Rng rng(13);
  Region reg{0, 0, 16, 16};

  {
    CrossbarCore core(noise_free());
    core.program(rand_weights(256, rng), reg, rng);
    float before = core.conductance(0, 0, 0) + core.conductance(0, 0, 2);
    core.drift_apply(10.0);  // nu = 0 -> unchanged
    CHECK(core.conductance(0, 0, 0) + core.conductance(0, 0, 2) == before);
    CHECK_THROWS(core.drift_apply(0.0));
  }

  AnalogConfig cfg = noise_free();
  cfg.drift_nu = 0.05;
  CrossbarCore core(cfg);
  auto w = rand_weights(256, rng);
  core.program(w, reg, rng);
  std::vector<float> pre_drift;
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c)
      for (int d = 0; d < 4; ++d) pre_drift.push_back(core.conductance(r, c, d));
  core.drift_apply(10.0);
  const float k = float(std::pow(10.0, -0.05));
  int i = 0;
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c)
      for (int d = 0; d < 4; ++d, ++i) {
        if (pre_drift[i] > 0)
          CHECK(core.conductance(r, c, d) == doctest::Approx(pre_drift[i] * k));
        else
          CHECK(core.conductance(r, c, d) == 0.0f);
      }

  auto err = [&] {
    Rng r(200);
    double e = 0;
    for (int trial = 0; trial < 32; ++trial) {
      auto x = rand_weights(16, r);
      auto y = core.mvm(x, reg);
      for (int c = 0; c < 16; ++c) {
        double exact = 0;
        for (int rr = 0; rr < 16; ++rr) exact += double(x[rr]) * w[rr * 16 + c];
        e += std::abs(y[c] - exact);
      }
    }
    return e;
  };
  double drifted = err();
  core.calibrate_affine(reg, 256, rng);
  CHECK(err() < drifted);
}

TEST_CASE("differential identity: -w then +w read-backs cancel") {
  CrossbarCore core;
  Rng rng(14);
  Region reg{0, 0, 10, 10};
  auto w = rand_weights(100, rng);
  core.program(w, reg, rng);
  auto e1 = core.read_effective(reg);
  std::vector<float> neg(w.size());
  for (size_t i = 0; i < w.size(); ++i) neg[i] = -w[i];
  core.program(neg, reg, rng);
  auto e2 = core.read_effective(reg);
  for (int i = 0; i < 100; ++i)
    CHECK(std::abs(e1[i] + e2[i]) <= 2 * core.config().verify_tolerance);
}

TEST_CASE("export/import round-trips bit-exactly") {
  CrossbarCore core;
  Rng rng(15);
  Region reg{5, 7, 40, 33};
  core.program(rand_weights(40 * 33, rng), reg, rng);
  core.calibrate_affine(reg, 64, rng);
  auto blob = core.export_blob();
  CHECK(blob.size() >= 4);
  CHECK(std::string(blob.begin(), blob.begin() + 4) == "PCMC");
  auto copy = CrossbarCore::import_blob(blob);
  auto x = rand_weights(40, rng);
  CHECK(copy.mvm(x, reg) == core.mvm(x, reg));
  CHECK(copy.export_blob() == blob);
  for (int d = 0; d < 4; ++d)
    CHECK(copy.conductance(10, 10, d) == core.conductance(10, 10, d));
}

TEST_CASE("seeded determinism of programming and mvm") {
  Region reg{0, 0, 20, 20};
  Rng rw(16);
  auto w = rand_weights(400, rw);
  CrossbarCore a, b;
  Rng r1(17), r2(17);
  a.program(w, reg, r1);
  b.program(w, reg, r2);
  auto x = rand_weights(20, rw);
  CHECK(a.mvm(x, reg) == b.mvm(x, reg));
}
