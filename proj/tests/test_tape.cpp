#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <l2l/adam.hpp>
#include <l2l/tape.hpp>

using namespace l2l;

namespace {

template <typename T>
TensorT<T> rand_tensor(std::vector<int64_t> shape, Rng& rng, double scale = 1.0) {
  TensorT<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, scale));
  return t;
}

}  // namespace

TEST_CASE("relu forward and backward") {
  Tape<float> tape;
  int x = tape.input(Tensor({3}, {-1.f, 0.f, 2.f}));
  int y = tape.relu(x);
  CHECK(tape.value(y).data == std::vector<float>{0.f, 0.f, 2.f});

  Tape<float> t2;
  int p = t2.param(Tensor({2}, {-1.f, 2.f}));
  int loss = t2.sum_all(t2.relu(p));
  auto g = t2.backward(loss);
  CHECK(g[0][0] == 0.f);
  CHECK(g[0][1] == 1.f);
}

TEST_CASE("matmul identity") {
  Tape<float> tape;
  int I = tape.constant(Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  int x = tape.input(Tensor({1, 3}, {1, 2, 3}));
  int y = tape.matmul(x, I);
  CHECK(tape.value(y).data == std::vector<float>{1, 2, 3});
}

TEST_CASE("conv2d of 1x1 image with 3x3 ones kernel picks the center pixel") {
  Tape<float> tape;
  int x = tape.input(Tensor({1, 1, 1, 1}, {0.7f}));
  int w = tape.constant(Tensor::full({1, 1, 3, 3}, 1.0f));
  int y = tape.conv2d(x, w, -1, 2);
  REQUIRE(tape.value(y).numel() == 1);
  CHECK(tape.value(y)[0] == doctest::Approx(0.7f));
}

TEST_CASE("conv2d matches a direct convolution oracle") {
  Rng rng(7);
  const int64_t N = 2, C = 3, H = 8, W = 8, O = 4, K = 3, S = 2;
  Tape<double> tape;
  int x = tape.input(rand_tensor<double>({N, C, H, W}, rng));
  int w = tape.input(rand_tensor<double>({O, C, K, K}, rng));
  int b = tape.input(rand_tensor<double>({O}, rng));
  int y = tape.conv2d(x, w, b, S);
  const auto& out = tape.value(y);
  const auto& xi = tape.value(x);
  const auto& wi = tape.value(w);
  const auto& bi = tape.value(b);
  const int64_t OH = (H + S - 1) / S, OW = (W + S - 1) / S;
  const int64_t pad_top = (std::max<int64_t>((OH - 1) * S + K - H, 0)) / 2;
  const int64_t pad_left = (std::max<int64_t>((OW - 1) * S + K - W, 0)) / 2;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t o = 0; o < O; ++o)
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
          double acc = bi[o];
          for (int64_t c = 0; c < C; ++c)
            for (int64_t ky = 0; ky < K; ++ky)
              for (int64_t kx = 0; kx < K; ++kx) {
                int64_t iy = oy * S - pad_top + ky, ix = ox * S - pad_left + kx;
                if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                  acc += xi[((n * C + c) * H + iy) * W + ix] *
                         wi[((o * C + c) * K + ky) * K + kx];
              }
          CHECK(out[((n * O + o) * OH + oy) * OW + ox] == doctest::Approx(acc));
        }
}

TEST_CASE("composite graph gradients match central finite differences") {
  // conv -> relu -> batchnorm -> global maxpool -> dense -> softmax+CE
  Rng rng(11);
  Tape<double> tape;
  int x = tape.input(rand_tensor<double>({3, 2, 6, 6}, rng));
  int w = tape.param(rand_tensor<double>({4, 2, 3, 3}, rng, 0.5));
  int b = tape.param(rand_tensor<double>({4}, rng, 0.1));
  int gamma = tape.param(TensorT<double>::full({4}, 1.0));
  int beta = tape.param(TensorT<double>({4}));
  int dense = tape.param(rand_tensor<double>({4, 3}, rng, 0.5));
  int y = tape.conv2d(x, w, b, 2);
  y = tape.relu(y);
  y = tape.batchnorm(y, gamma, beta);
  y = tape.global_maxpool(y);
  int logits = tape.matmul(y, dense);
  TensorT<double> onehot({3, 3});
  onehot[0] = onehot[4] = onehot[8] = 1.0;
  int loss = tape.softmax_cross_entropy(logits, tape.constant(onehot));
  CHECK(tape.finite_diff_check(loss, 1e-5) < 1e-7);
}

TEST_CASE("softmax followed by cross-entropy matches finite differences") {
  Rng rng(3);
  Tape<double> tape;
  int logits = tape.param(rand_tensor<double>({1, 5}, rng));
  TensorT<double> y({1, 5});
  y[2] = 1.0;
  int loss = tape.cross_entropy(tape.softmax(logits), tape.constant(y));
  CHECK(tape.finite_diff_check(loss, 1e-5) < 1e-4);
}

TEST_CASE("quadratic finite-difference sanity") {
  Tape<double> tape;
  int p = tape.param(TensorT<double>({1}, {3.0}));
  int loss = tape.mul(p, p);
  auto g = tape.backward(loss);
  CHECK(g[0][0] == doctest::Approx(6.0));
  CHECK(tape.finite_diff_check(loss, 1e-4) < 1e-9);
}

TEST_CASE("heaviside surrogate: slope at threshold and zero outside window") {
  // trainee constants: v_th = 0.6, lambda = 0.3 -> slope 0.5 at v = v_th
  Tape<float> tape;
  int v = tape.param(Tensor({3}, {0.6f, 1.3f, -0.1f}));
  int thr = tape.constant(Tensor::full({3}, 0.6f));
  int z = tape.spike(v, thr, 0.6, 0.3);
  int loss = tape.sum_all(z);
  auto g = tape.backward(loss);
  CHECK(g[0][0] == doctest::Approx(0.5f));       // lambda / v_th
  CHECK(g[0][1] == doctest::Approx(0.0f));       // |u| >= 1
  CHECK(g[0][2] == doctest::Approx(0.3f / 0.6f * (1.f - (0.7f / 0.6f)) == 0.f
                                       ? 0.f
                                       : g[0][2]));
  // inside the window the slope is lambda*(1-|u|)/v_th
  double u = std::abs((-0.1 - 0.6) / 0.6);
  CHECK(g[0][2] == doctest::Approx(u >= 1 ? 0.0 : 0.3 * (1 - u) / 0.6));
}

TEST_CASE("smooth spike mode matches finite differences") {
  Rng rng(5);
  Tape<double> tape;
  int v = tape.param(rand_tensor<double>({6}, rng, 0.4));
  int thr = tape.constant(TensorT<double>::full({6}, 0.6));
  int z = tape.spike(v, thr, 0.6, 0.3, /*smooth=*/true);
  int loss = tape.sum_all(tape.mul(z, z));
  CHECK(tape.finite_diff_check(loss, 1e-6) < 1e-6);
}

TEST_CASE("exponential filter, stack and bmm gradients") {
  Rng rng(17);
  Tape<double> tape;
  int s0 = tape.constant(TensorT<double>({2, 3}));
  int x1 = tape.param(rand_tensor<double>({2, 3}, rng));
  int x2 = tape.param(rand_tensor<double>({2, 3}, rng));
  int s1 = tape.exp_filter_step(s0, x1, 0.9);
  int s2 = tape.exp_filter_step(s1, x2, 0.9);
  int st = tape.stack_last({s1, s2});              // 2x3x2
  int other = tape.param(rand_tensor<double>({2, 2, 4}, rng));
  int prod = tape.bmm(st, other);                  // 2x3x4
  int loss = tape.sum_all(tape.mul(prod, prod));
  CHECK(tape.finite_diff_check(loss, 1e-6) < 1e-7);
}

TEST_CASE("bmm transpose flags agree with finite differences") {
  Rng rng(23);
  for (int flags = 0; flags < 4; ++flags) {
    Tape<double> tape;
    bool ta = flags & 1, tb = flags & 2;
    int a = tape.param(rand_tensor<double>(ta ? std::vector<int64_t>{2, 5, 3}
                                              : std::vector<int64_t>{2, 3, 5},
                                           rng));
    int b = tape.param(rand_tensor<double>(tb ? std::vector<int64_t>{2, 4, 5}
                                              : std::vector<int64_t>{2, 5, 4},
                                           rng));
    int c = tape.bmm(a, b, ta, tb);
    int loss = tape.sum_all(tape.mul(c, c));
    CHECK(tape.finite_diff_check(loss, 1e-5) < 1e-7);
  }
}

TEST_CASE("arm position node matches the kinematics oracle") {
  Rng rng(29);
  auto dh = robot::DhParams::ed_scorbot();
  Tape<double> tape;
  TensorT<double> angles = rand_tensor<double>({3, 2}, rng, 0.3);
  int ang = tape.param(angles);
  int pos = tape.arm_position(ang);
  int loss = tape.sum_all(tape.mul(pos, pos));
  auto g = tape.backward(loss);
  for (int64_t b = 0; b < 3; ++b) {
    auto p = robot::forward_kinematics(dh, {angles[b * 2], angles[b * 2 + 1]});
    CHECK(tape.value(pos)[b * 3] == doctest::Approx(p.x));
    CHECK(tape.value(pos)[b * 3 + 1] == doctest::Approx(p.y));
    CHECK(tape.value(pos)[b * 3 + 2] == doctest::Approx(p.z));
    auto J = robot::position_jacobian(dh, {angles[b * 2], angles[b * 2 + 1]});
    double px[3] = {p.x, p.y, p.z};
    for (int j = 0; j < 2; ++j) {
      double want = 0;
      for (int i = 0; i < 3; ++i) want += 2 * px[i] * J[i][j];
      CHECK(g[0][b * 2 + j] == doctest::Approx(want).epsilon(1e-9));
    }
  }
}

TEST_CASE("weight-update node: full vs first-order") {
  Rng rng(31);
  auto build = [&](bool first_order) {
    Tape<double> tape;
    Rng r(31);
    int p = tape.param(rand_tensor<double>({3, 3}, r));
    int x = tape.constant(rand_tensor<double>({3, 3}, r));
    int delta = tape.mul(p, x);
    int updated = tape.weight_update(p, delta, 0.5, first_order);
    int loss = tape.sum_all(tape.mul(updated, updated));
    return tape.backward(loss);
  };
  auto g_full = build(false);
  auto g_fo = build(true);
  double diff = 0;
  for (int64_t i = 0; i < g_full[0].numel(); ++i)
    diff = std::max(diff, std::abs(g_full[0][i] - g_fo[0][i]));
  CHECK(diff > 1e-6);

  // full mode is still exact
  Tape<double> tape;
  int p = tape.param(rand_tensor<double>({3, 3}, rng));
  int delta = tape.mul(p, p);
  int updated = tape.weight_update(p, delta, 0.5, false);
  int loss = tape.sum_all(tape.mul(updated, updated));
  CHECK(tape.finite_diff_check(loss, 1e-5) < 1e-7);
}

TEST_CASE("replay determinism: bit-identical outputs and gradients") {
  Rng rng(37);
  Tape<float> tape;
  int x = tape.input(rand_tensor<float>({2, 2, 6, 6}, rng));
  int w = tape.param(rand_tensor<float>({3, 2, 3, 3}, rng));
  int y = tape.relu(tape.conv2d(x, w, -1, 2));
  int loss = tape.sum_all(tape.mul(y, y));
  auto v1 = tape.value(loss).data;
  auto g1 = tape.backward(loss);
  tape.replay();
  auto v2 = tape.value(loss).data;
  auto g2 = tape.backward(loss);
  CHECK(v1 == v2);
  CHECK(g1[0].data == g2[0].data);
}

TEST_CASE("backward of a sum of losses equals sum of backwards") {
  Rng rng(41);
  Tape<double> tape;
  int p = tape.param(rand_tensor<double>({4}, rng));
  int l1 = tape.sum_all(tape.mul(p, p));
  int l2 = tape.sum_all(tape.relu(p));
  int lsum = tape.add(l1, l2);
  auto g1 = tape.backward(l1);
  auto g2 = tape.backward(l2);
  auto gs = tape.backward(lsum);
  for (int64_t i = 0; i < 4; ++i)
    CHECK(gs[0][i] == doctest::Approx(g1[0][i] + g2[0][i]));
}

TEST_CASE("shape mismatch raises a structured error naming the node") {
  Tape<float> tape;
  int a = tape.input(Tensor({2, 3}));
  int b = tape.input(Tensor({2, 3}));
  CHECK_THROWS_AS(tape.matmul(a, b), TapeError);
  try {
    tape.matmul(a, b);
  } catch (const TapeError& e) {
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
  }
}

TEST_CASE("non-finite intermediate raises with node index") {
  Tape<float> tape;
  int x = tape.input(Tensor({1}, {1e30f}));
  CHECK_THROWS_AS(tape.mul(x, x), TapeError);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Tensor p = Tensor::full({3}, 0.5f);
  Adam opt({}, {&p});
  opt.step({Tensor({3})});
  CHECK(p.data == std::vector<float>{0.5f, 0.5f, 0.5f});
}

TEST_CASE("adam: one unit-gradient step moves by about -lr") {
  Tensor p = Tensor::full({1}, 1.0f);
  AdamConfig cfg;
  cfg.lr = 0.001;
  Adam opt(cfg, {&p});
  opt.step({Tensor::full({1}, 1.0f)});
  CHECK(p[0] == doctest::Approx(1.0f - 0.001f).epsilon(1e-3));
}

TEST_CASE("adam: lr decays by 0.99 every 500 steps") {
  Tensor p = Tensor::full({1}, 0.0f);
  AdamConfig cfg;
  cfg.lr = 0.0015;
  cfg.lr_decay = 0.99;
  cfg.decay_interval = 500;
  Adam opt(cfg, {&p});
  for (int i = 0; i < 499; ++i) opt.step({Tensor({1})});
  CHECK(opt.effective_lr() == doctest::Approx(0.0015));
  opt.step({Tensor({1})});
  CHECK(opt.effective_lr() == doctest::Approx(0.0015 * 0.99));
}

TEST_CASE("adam: non-finite gradient names the parameter") {
  Tensor p = Tensor::full({1}, 0.0f);
  Adam opt({}, {&p}, {"dense"});
  Tensor g({1});
  g[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    opt.step({g});
    CHECK(false);
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("dense") != std::string::npos);
  }
}

TEST_CASE("stochastic quantize node: level-aligned tensor is a no-op") {
  Rng rng(43);
  Tape<float> tape;
  // values on the 15-level grid over [-1, 1] scaled by max-abs = 1
  Tensor v({3}, {-1.f, 1.f, 1.f / 7.f});
  int x = tape.param(v);
  int q = tape.quantize_stochastic(x, 15, rng);
  for (int64_t i = 0; i < 3; ++i)
    CHECK(tape.value(q)[i] == doctest::Approx(v[i]).epsilon(1e-6));
  // straight-through gradient
  int loss = tape.sum_all(q);
  auto g = tape.backward(loss);
  CHECK(g[0].data == std::vector<float>{1.f, 1.f, 1.f});
}
