#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <l2l/maml.hpp>

using namespace l2l;
using namespace l2l::maml;

namespace {

data::Dataset tiny_dataset(int classes = 12, int per_class = 12) {
  return data::synthetic_glyphs(classes, per_class, 42);
}

data::Episode random_episode(int ways, int shots, int hw, Rng& rng) {
  data::Episode ep;
  const int64_t B = int64_t(ways) * shots;
  ep.support_x = Tensor({B, 1, hw, hw});
  ep.query_x = Tensor({B, 1, hw, hw});
  for (auto& v : ep.support_x.data) v = float(rng.uniform());
  for (auto& v : ep.query_x.data) v = float(rng.uniform());
  ep.support_y = Tensor({B, ways});
  ep.query_y = Tensor({B, ways});
  for (int64_t b = 0; b < B; ++b) {
    ep.support_y[b * ways + b % ways] = 1.0f;
    ep.query_y[b * ways + b % ways] = 1.0f;
  }
  return ep;
}

}  // namespace

TEST_CASE("sample_task: sizes, distinct classes, determinism, degenerate") {
  auto ds = tiny_dataset();
  Rng a(5), b(5);
  auto e1 = data::sample_task(ds, 5, 5, a);
  CHECK(e1.support_x.dim(0) == 25);
  CHECK(e1.query_x.dim(0) == 25);
  CHECK(e1.support_y.dim(1) == 5);
  std::set<int> cls(e1.class_ids.begin(), e1.class_ids.end());
  CHECK(cls.size() == 5);
  auto e2 = data::sample_task(ds, 5, 5, b);
  CHECK(e1.support_x.data == e2.support_x.data);
  CHECK(e1.query_y.data == e2.query_y.data);

  Rng c(6);
  auto e3 = data::sample_task(ds, 1, 1, c);
  CHECK(e3.support_x.dim(0) == 1);
  CHECK(e3.query_x.dim(0) == 1);

  // support and query rows differ (disjoint examples)
  CHECK(e1.support_x.data != e1.query_x.data);

  Rng d(7);
  CHECK_THROWS(data::sample_task(ds, 50, 5, d));
  CHECK_THROWS(data::sample_task(ds, 5, 10, d));
}

TEST_CASE("delta rule: perfect prediction and hand example") {
  Tensor h({1, 2}, {1.f, 0.f});
  Tensor y({1, 5}, {1.f, 0.f, 0.f, 0.f, 0.f});
  CHECK(delta_rule(h, y, y, 0.1).data == std::vector<float>(10, 0.f));

  Tensor f({1, 5}, {0.7f, 0.3f, 0.f, 0.f, 0.f});
  auto d = delta_rule(h, f, y, 0.1);
  CHECK(d[0] == doctest::Approx(0.1 * 0.3));
  CHECK(d[1] == doctest::Approx(-0.1 * 0.3));
  for (int i = 2; i < 10; ++i) CHECK(d[i] == doctest::Approx(0.0));
}

TEST_CASE("delta rule equals -alpha times the exact dense CE gradient") {
  Rng rng(8);
  const int64_t B = 7, F = 6, L = 5;
  TensorT<double> h({B, F}), theta({F, L}), y({B, L});
  for (auto& v : h.data) v = rng.uniform(-1, 1);
  for (auto& v : theta.data) v = rng.uniform(-1, 1);
  for (int64_t b = 0; b < B; ++b) y[b * L + b % L] = 1.0;

  Tape<double> tape;
  int th = tape.param(theta);
  int loss = tape.softmax_cross_entropy(tape.matmul(tape.input(h), th),
                                        tape.constant(y));
  auto grad = tape.backward(loss);

  Tape<double> fwd;
  auto f = fwd.value(fwd.softmax(fwd.matmul(fwd.input(h), fwd.input(theta))));
  auto d = delta_rule(h.cast<float>(), f.cast<float>(), y.cast<float>(), 0.1);
  for (int64_t i = 0; i < d.numel(); ++i)
    CHECK(double(d[i]) ==
          doctest::Approx(-0.1 * grad[0][i]).epsilon(1e-4));
}

TEST_CASE("alpha = 0 reduces the meta-gradient to the plain query gradient") {
  Rng rng(9);
  MamlConfig cfg;
  cfg.filters = 3;
  cfg.ways = 2;
  cfg.shots = 1;
  cfg.inner_steps = 2;
  cfg.image_hw = 8;
  auto ep = random_episode(2, 1, 8, rng);

  Rng init(10);
  auto p = CnnParamsT<double>::init(cfg.filters, cfg.ways, init);

  MamlConfig zero = cfg;
  zero.inner_lr = 0.0;
  Tape<double> t1;
  auto gp1 = declare_params(t1, p);
  auto g1 = t1.backward(episode_loss(t1, gp1, ep, zero, nullptr));

  Tape<double> t2;
  auto gp2 = declare_params(t2, p);
  int hq = conv_features(t2, gp2, t2.constant(ep.query_x.cast<double>()), zero,
                         nullptr);
  int loss = t2.softmax_cross_entropy(t2.matmul(hq, gp2.dense),
                                      t2.constant(ep.query_y.cast<double>()));
  auto g2 = t2.backward(loss);

  REQUIRE(g1.size() == g2.size());
  for (size_t i = 0; i < g1.size(); ++i)
    for (int64_t j = 0; j < g1[i].numel(); ++j)
      CHECK(g1[i][j] == doctest::Approx(g2[i][j]).epsilon(1e-6));
}

TEST_CASE("tiny unrolled meta-gradient matches finite differences") {
  Rng rng(11);
  MamlConfig cfg;
  cfg.filters = 2;
  cfg.ways = 2;
  cfg.shots = 1;
  cfg.inner_steps = 2;
  cfg.inner_lr = 0.1;
  cfg.image_hw = 8;
  auto ep = random_episode(2, 1, 8, rng);
  Rng init(12);
  auto p = CnnParamsT<double>::init(cfg.filters, cfg.ways, init);
  Tape<double> tape;
  auto gp = declare_params(tape, p);
  int loss = episode_loss(tape, gp, ep, cfg, nullptr);
  CHECK(tape.finite_diff_check(loss, 1e-5) < 1e-3);
}

TEST_CASE("first-order and full meta-gradients differ") {
  Rng rng(13);
  MamlConfig cfg;
  cfg.filters = 2;
  cfg.ways = 2;
  cfg.shots = 1;
  cfg.inner_steps = 2;
  cfg.image_hw = 8;
  auto ep = random_episode(2, 1, 8, rng);
  Rng init(14);
  auto p = CnnParamsT<double>::init(cfg.filters, cfg.ways, init);

  auto grads = [&](bool fo) {
    MamlConfig c = cfg;
    c.first_order = fo;
    Tape<double> tape;
    auto gp = declare_params(tape, p);
    return tape.backward(episode_loss(tape, gp, ep, c, nullptr));
  };
  auto gf = grads(false), g1 = grads(true);
  double diff = 0;
  for (size_t i = 0; i < gf.size(); ++i)
    for (int64_t j = 0; j < gf[i].numel(); ++j)
      diff = std::max(diff, std::abs(gf[i][j] - g1[i][j]));
  CHECK(diff > 1e-8);
}

TEST_CASE("4-bit mode with level-aligned weights is a forward no-op") {
  Rng rng(15);
  MamlConfig cfg;
  cfg.filters = 4;
  cfg.ways = 3;
  cfg.image_hw = 8;
  Rng init(16);
  auto p = CnnParams::init(cfg.filters, cfg.ways, init);
  // snap every quantized tensor onto the 15-level grid of its own max-abs
  auto snap = [](Tensor& t) {
    float mx = 0;
    for (float v : t.data) mx = std::max(mx, std::abs(v));
    if (mx == 0) return;
    for (auto& v : t.data) v = std::round(v / mx * 7.0f) / 7.0f * mx;
  };
  for (auto& w : p.conv_w) snap(w);
  for (auto& b : p.conv_b) snap(b);
  snap(p.dense);

  Tensor images({3, 1, 8, 8});
  for (auto& v : images.data) v = float(rng.uniform());

  SoftwareBackend plain(p, cfg);
  MamlConfig q = cfg;
  q.four_bit = true;
  Rng qr(17);
  SoftwareBackend quant(p, q, &qr);
  auto h0 = plain.features(images);
  auto h1 = quant.features(images);
  for (int64_t i = 0; i < h0.numel(); ++i)
    CHECK(h1[i] == doctest::Approx(h0[i]).epsilon(1e-5));
  CHECK(plain.logits(h0).data.size() == quant.logits(h0).data.size());
}

TEST_CASE("inner_adapt leaves conv parameters untouched and adapts dense") {
  Rng rng(18);
  MamlConfig cfg;
  cfg.filters = 4;
  cfg.ways = 3;
  cfg.shots = 2;
  Rng init(19);
  auto p = CnnParams::init(cfg.filters, cfg.ways, init);
  auto conv_before = p.conv_w;

  auto ds = tiny_dataset();
  auto ep = data::sample_task(ds, cfg.ways, cfg.shots, rng);
  SoftwareBackend be(p, cfg);
  auto denses = inner_adapt(be, p.dense, ep.support_x, ep.support_y, 0.1, 3);
  REQUIRE(denses.size() == 4);
  CHECK(denses[0].data == p.dense.data);
  CHECK(denses[3].data != p.dense.data);
  for (size_t i = 0; i < p.conv_w.size(); ++i)
    CHECK(p.conv_w[i].data == conv_before[i].data);
}

TEST_CASE("label permutation permutes adapted dense columns, same accuracy") {
  Rng rng(20);
  MamlConfig cfg;
  cfg.filters = 4;
  cfg.ways = 3;
  cfg.shots = 2;
  Rng init(21);
  auto p = CnnParams::init(cfg.filters, cfg.ways, init);
  auto ds = tiny_dataset();
  auto ep = data::sample_task(ds, cfg.ways, cfg.shots, rng);

  // permutation of the 3 labels
  const int perm[3] = {2, 0, 1};
  data::Episode pe = ep;
  const int64_t B = ep.support_y.dim(0);
  for (int64_t b = 0; b < B; ++b)
    for (int l = 0; l < 3; ++l) {
      pe.support_y[b * 3 + perm[l]] = ep.support_y[b * 3 + l];
      pe.query_y[b * 3 + perm[l]] = ep.query_y[b * 3 + l];
    }
  // dense columns permuted the same way at init
  CnnParams pp = p;
  for (int64_t k = 0; k < p.dense.dim(0); ++k)
    for (int l = 0; l < 3; ++l)
      pp.dense[k * 3 + perm[l]] = p.dense[k * 3 + l];

  SoftwareBackend b1(p, cfg), b2(pp, cfg);
  auto d1 = inner_adapt(b1, p.dense, ep.support_x, ep.support_y, 0.1, 2);
  auto d2 = inner_adapt(b2, pp.dense, pe.support_x, pe.support_y, 0.1, 2);
  for (int64_t k = 0; k < p.dense.dim(0); ++k)
    for (int l = 0; l < 3; ++l)
      CHECK(d2.back()[k * 3 + perm[l]] ==
            doctest::Approx(d1.back()[k * 3 + l]).epsilon(1e-5));
}

TEST_CASE("random-init evaluation sits at chance before adaptation") {
  MamlConfig cfg;
  cfg.filters = 4;
  cfg.ways = 5;
  cfg.shots = 2;
  cfg.inner_steps = 2;
  Rng init(22);
  auto p = CnnParams::init(cfg.filters, cfg.ways, init);
  auto ds = tiny_dataset(15, 8);
  auto res = evaluate(p, ds, 40, cfg, "software", 123);
  CHECK(res.mean_accuracy[0] == doctest::Approx(0.2).epsilon(0.5));
  CHECK(std::abs(res.mean_accuracy[0] - 0.2) < 0.08);
}

TEST_CASE("meta_train: zero iterations returns finite params, deterministic") {
  MamlConfig cfg;
  cfg.filters = 4;
  cfg.ways = 3;
  cfg.shots = 1;
  cfg.outer_iters = 0;
  auto ds = tiny_dataset();
  TrainCurves c1, c2;
  auto p1 = meta_train(cfg, ds, ds, 77, "", &c1);
  auto p2 = meta_train(cfg, ds, ds, 77, "", &c2);
  CHECK(c1.train_loss.empty());
  auto t1 = p1.tensors(), t2 = p2.tensors();
  for (size_t i = 0; i < t1.size(); ++i) {
    CHECK(t1[i]->all_finite());
    CHECK(t1[i]->data == t2[i]->data);
  }
}

TEST_CASE("one outer step is deterministic and finite") {
  MamlConfig cfg;
  cfg.filters = 4;
  cfg.ways = 3;
  cfg.shots = 1;
  cfg.meta_batch = 2;
  cfg.inner_steps = 2;
  auto ds = tiny_dataset();

  auto run = [&] {
    Rng init(30), task(31), q(32);
    auto p = CnnParams::init(cfg.filters, cfg.ways, init);
    Adam opt({}, p.tensors(), p.names());
    std::vector<data::Episode> batch;
    for (int i = 0; i < cfg.meta_batch; ++i)
      batch.push_back(data::sample_task(ds, cfg.ways, cfg.shots, task));
    double loss = outer_step(p, batch, cfg, opt, q);
    return std::make_pair(loss, p.dense.data);
  };
  auto [l1, d1] = run();
  auto [l2, d2] = run();
  CHECK(std::isfinite(l1));
  CHECK(l1 == l2);
  CHECK(d1 == d2);
}

TEST_CASE("crossbar backend structural smoke test") {
  MamlConfig cfg;
  cfg.filters = 4;
  cfg.ways = 3;
  cfg.shots = 1;
  cfg.inner_steps = 2;
  Rng init(40);
  auto p = CnnParams::init(cfg.filters, cfg.ways, init);
  auto ds = tiny_dataset();
  xbar::AnalogConfig analog;  // default noise
  auto res = evaluate(p, ds, 3, cfg, "crossbar", 99, analog);
  CHECK(res.task_accuracy.size() == 3);
  CHECK(res.task_accuracy[0].size() == 3);
  for (auto& row : res.task_accuracy)
    for (double a : row) {
      CHECK(a >= 0.0);
      CHECK(a <= 1.0);
    }
}

TEST_CASE("dense reprogram on the crossbar touches exactly 4x dense weights") {
  MamlConfig cfg;
  cfg.filters = 4;
  cfg.ways = 3;
  Rng init(41), hw(42);
  auto p = CnnParams::init(cfg.filters, cfg.ways, init);
  CrossbarBackend be(p, cfg, {}, hw);
  Tensor d2 = p.dense;
  for (auto& v : d2.data) v += 0.01f;
  be.set_dense(d2);
  CHECK(be.devices_touched_last() == int64_t(cfg.filters) * cfg.ways * 4);
}
