#include "l2l/maml.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

#include "l2l/checkpoint.hpp"
#include "l2l/metrics.hpp"

namespace l2l::maml {

Tensor delta_rule(const Tensor& h, const Tensor& f, const Tensor& y, double alpha) {
  const int64_t B = h.dim(0), F = h.dim(1), L = f.dim(1);
  if (f.dim(0) != B || !f.same_shape(y))
    throw std::invalid_argument("delta_rule: shape mismatch");
  Tensor d({F, L});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t k = 0; k < F; ++k)
      for (int64_t l = 0; l < L; ++l)
        d[k * L + l] += float(alpha / double(B)) * h[b * F + k] *
                        (y[b * L + l] - f[b * L + l]);
  return d;
}

double outer_step(CnnParams& params, const std::vector<data::Episode>& batch,
                  const MamlConfig& cfg, Adam& opt, Rng& qrng) {
  if (batch.empty()) throw std::invalid_argument("outer_step: empty meta-batch");
  auto tensors = params.tensors();
  std::vector<Tensor> grads;
  for (auto* t : tensors) grads.push_back(Tensor(t->shape));
  double meta_loss = 0;
  const double inv = 1.0 / double(batch.size());

  for (const auto& ep : batch) {
    Tape<float> tape;
    GraphParams gp = declare_params(tape, params);
    int loss = episode_loss(tape, gp, ep, cfg, &qrng);
    const double l = tape.value(loss)[0];
    if (!std::isfinite(l)) {
      std::ostringstream os;
      os << "outer_step: non-finite episode loss; classes:";
      for (int c : ep.class_ids) os << ' ' << c;
      throw std::runtime_error(os.str());
    }
    meta_loss += l * inv;
    auto g = tape.backward(loss);
    for (size_t i = 0; i < grads.size(); ++i)
      for (int64_t j = 0; j < grads[i].numel(); ++j)
        grads[i][j] += float(inv) * g[i][j];
  }
  opt.step(grads);
  return meta_loss;
}

namespace {

double episode_batch_loss(CnnParams& params, const data::Dataset& ds,
                          const MamlConfig& cfg, int episodes, Rng& task_rng,
                          Rng& qrng) {
  double total = 0;
  for (int e = 0; e < episodes; ++e) {
    auto ep = data::sample_task(ds, cfg.ways, cfg.shots, task_rng);
    Tape<float> tape;
    GraphParams gp = declare_params(tape, params);
    total += tape.value(episode_loss(tape, gp, ep, cfg, &qrng))[0];
  }
  return total / episodes;
}

}  // namespace

CnnParams meta_train(const MamlConfig& cfg, const data::Dataset& train,
                     const data::Dataset& val, uint64_t seed,
                     const std::string& out_dir, TrainCurves* curves) {
  Rng init_rng = Rng::split(seed, 10);
  Rng task_rng = Rng::split(seed, 11);
  Rng qrng = Rng::split(seed, 12);
  Rng val_rng = Rng::split(seed, 13);

  CnnParams params = CnnParams::init(cfg.filters, cfg.ways, init_rng, cfg.in_channels);
  AdamConfig acfg;
  acfg.lr = cfg.outer_lr;
  Adam opt(acfg, params.tensors(), params.names());

  metrics::CsvSink sink;
  if (!out_dir.empty())
    sink = metrics::CsvSink(out_dir + "/maml_loss.csv",
                            {"iteration", "train_loss", "val_loss"});

  double last_val = std::numeric_limits<double>::quiet_NaN();
  for (int it = 0; it < cfg.outer_iters; ++it) {
    std::vector<data::Episode> batch;
    for (int b = 0; b < cfg.meta_batch; ++b)
      batch.push_back(data::sample_task(train, cfg.ways, cfg.shots, task_rng));
    const double loss = outer_step(params, batch, cfg, opt, qrng);
    if (curves) curves->train_loss.push_back(loss);

    if (cfg.val_interval > 0 && it % cfg.val_interval == 0 && val.num_classes() > 0) {
      Rng vq = Rng::split(seed, 14, uint64_t(it));
      last_val = episode_batch_loss(params, val, cfg, cfg.val_episodes, val_rng, vq);
      if (curves) curves->val_loss.emplace_back(it, last_val);
    }
    if (sink.open()) sink.row(std::vector<double>{double(it), loss, last_val});

    if (!out_dir.empty() && cfg.checkpoint_interval > 0 &&
        (it + 1) % cfg.checkpoint_interval == 0) {
      std::vector<std::pair<std::string, const Tensor*>> table;
      auto names = params.names();
      auto tensors = params.tensors();
      for (size_t i = 0; i < names.size(); ++i) table.emplace_back(names[i], tensors[i]);
      ckpt::save(out_dir + "/maml_iter_" + std::to_string(it + 1) + ".ckpt",
                 "MAML", table);
    }
  }
  if (sink.open()) sink.flush();
  return params;
}

// ---------------- backends ----------------

SoftwareBackend::SoftwareBackend(const CnnParams& p, const MamlConfig& cfg,
                                 Rng* qrng)
    : params_(p), cfg_(cfg), qrng_(qrng) {}

Tensor SoftwareBackend::features(const Tensor& images) {
  Tape<float> tape;
  GraphParams gp = declare_params(tape, params_);
  int x = tape.input(images);
  return tape.value(conv_features(tape, gp, x, cfg_, qrng_));
}

Tensor SoftwareBackend::logits(const Tensor& features) {
  Tape<float> tape;
  int d = tape.param(params_.dense);
  int dq = maybe_quantize(tape, d, cfg_, qrng_);
  return tape.value(tape.matmul(tape.input(features), dq));
}

void SoftwareBackend::set_dense(const Tensor& dense) {
  if (!dense.same_shape(params_.dense))
    throw std::invalid_argument("set_dense: shape mismatch");
  params_.dense = dense;
}

CrossbarBackend::CrossbarBackend(const CnnParams& p, const MamlConfig& cfg,
                                 xbar::AnalogConfig analog, Rng& rng)
    : params_(p), cfg_(cfg), rng_(rng.next()) {
  std::vector<deploy::LayerShape> layers;
  for (size_t i = 0; i < p.conv_w.size(); ++i) {
    const int cin = int(p.conv_w[i].dim(1));
    layers.push_back({"conv" + std::to_string(i + 1), cin * 9, cfg.filters, true});
  }
  layers.push_back({"dense", cfg.filters, cfg.ways, false});
  dense_layer_ = int(layers.size()) - 1;
  plan_ = deploy::plan_placement(layers, 2);
  cores_.assign(2, xbar::CrossbarCore(analog));

  for (size_t i = 0; i < p.conv_w.size(); ++i) {
    const int64_t cin = p.conv_w[i].dim(1);
    const int64_t E = cin * 9, F = cfg.filters;
    std::vector<float> wf(E * F);
    for (int64_t o = 0; o < F; ++o)
      for (int64_t e = 0; e < E; ++e) wf[e * F + o] = p.conv_w[i][o * E + e];
    deploy::program_layer(plan_, cores_, int(i), wf, &p.conv_b[i].data, rng_);
  }
  deploy::program_layer(plan_, cores_, dense_layer_, p.dense.data, nullptr, rng_);
}

Tensor CrossbarBackend::features(const Tensor& images) {
  const int64_t B = images.dim(0);
  Tensor x = images;
  for (size_t blk = 0; blk < params_.conv_w.size(); ++blk) {
    const int64_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t F = cfg_.filters;
    Tensor out;
    int64_t OH = 0, OW = 0;
    for (int64_t b = 0; b < B; ++b) {
      auto buf = deploy::im2col(x.data.data() + b * C * H * W, C, H, W, 3, 2, false);
      if (b == 0) {
        OH = buf.out_h;
        OW = buf.out_w;
        out = Tensor({B, F, OH, OW});
      }
      for (int64_t pos = 0; pos < buf.rows; ++pos) {
        std::vector<float> row(buf.data.begin() + pos * buf.cols,
                               buf.data.begin() + (pos + 1) * buf.cols);
        auto y = deploy::dispatch_mvm(plan_, cores_, int(blk), row);
        for (int64_t o = 0; o < F; ++o)
          out[((b * F + o) * OH * OW) + pos] = y[size_t(o)];
      }
    }
    // relu then batchnorm with batch statistics, kept digital
    for (auto& v : out.data) v = std::max(v, 0.0f);
    const int64_t HW = OH * OW;
    for (int64_t c = 0; c < F; ++c) {
      double mean = 0;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < HW; ++i) mean += out[(b * F + c) * HW + i];
      mean /= double(B * HW);
      double var = 0;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < HW; ++i) {
          double d = out[(b * F + c) * HW + i] - mean;
          var += d * d;
        }
      var /= double(B * HW);
      const double invstd = 1.0 / std::sqrt(var + 1e-5);
      const double g = params_.gamma[blk][c], be = params_.beta[blk][c];
      for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < HW; ++i) {
          auto& v = out[(b * F + c) * HW + i];
          v = float((v - mean) * invstd * g + be);
        }
    }
    x = std::move(out);
  }
  // global max-pool
  const int64_t F = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor h({B, F});
  for (int64_t i = 0; i < B * F; ++i)
    h[i] = *std::max_element(x.data.begin() + i * HW, x.data.begin() + (i + 1) * HW);
  return h;
}

Tensor CrossbarBackend::logits(const Tensor& features) {
  const int64_t B = features.dim(0), F = features.dim(1);
  Tensor out({B, int64_t(cfg_.ways)});
  for (int64_t b = 0; b < B; ++b) {
    std::vector<float> row(features.data.begin() + b * F,
                           features.data.begin() + (b + 1) * F);
    auto y = deploy::dispatch_mvm(plan_, cores_, dense_layer_, row);
    for (int l = 0; l < cfg_.ways; ++l) out[b * cfg_.ways + l] = y[size_t(l)];
  }
  return out;
}

void CrossbarBackend::set_dense(const Tensor& dense) {
  params_.dense = dense;
  auto rep = deploy::reprogram_region(plan_, cores_, dense_layer_, dense.data,
                                      nullptr, rng_);
  devices_touched_last_ = rep.devices_touched;
}

// ---------------- adaptation & evaluation ----------------

namespace {

Tensor softmax_rows(const Tensor& logits) {
  Tensor p = logits;
  const int64_t D = p.dim(p.rank() - 1), R = p.numel() / D;
  for (int64_t r = 0; r < R; ++r) {
    float* row = p.data.data() + r * D;
    const float mx = *std::max_element(row, row + D);
    double s = 0;
    for (int64_t i = 0; i < D; ++i) s += std::exp(double(row[i] - mx));
    for (int64_t i = 0; i < D; ++i)
      row[i] = float(std::exp(double(row[i] - mx)) / s);
  }
  return p;
}

double accuracy(const Tensor& logits, const Tensor& onehot) {
  const int64_t B = logits.dim(0), D = logits.dim(1);
  int hits = 0;
  for (int64_t b = 0; b < B; ++b) {
    int64_t pred = 0, truth = 0;
    for (int64_t i = 1; i < D; ++i) {
      if (logits[b * D + i] > logits[b * D + pred]) pred = i;
      if (onehot[b * D + i] > onehot[b * D + truth]) truth = i;
    }
    if (pred == truth) ++hits;
  }
  return double(hits) / double(B);
}

}  // namespace

std::vector<Tensor> inner_adapt(Backend& backend, const Tensor& dense0,
                                const Tensor& support_x, const Tensor& support_y,
                                double alpha, int n) {
  backend.set_dense(dense0);
  const Tensor h = backend.features(support_x);
  std::vector<Tensor> out{dense0};
  Tensor dense = dense0;
  for (int step = 0; step < n; ++step) {
    const Tensor f = softmax_rows(backend.logits(h));
    const Tensor d = delta_rule(h, f, support_y, alpha);
    for (int64_t i = 0; i < dense.numel(); ++i) dense[i] += d[i];
    backend.set_dense(dense);
    out.push_back(dense);
  }
  return out;
}

EvalResult evaluate(const CnnParams& params, const data::Dataset& test,
                    int tasks, const MamlConfig& cfg, const std::string& backend,
                    uint64_t seed, xbar::AnalogConfig analog) {
  Rng task_rng = Rng::split(seed, 20);
  Rng qrng = Rng::split(seed, 21);
  Rng hw_rng = Rng::split(seed, 22);

  std::unique_ptr<Backend> be;
  if (backend == "software") {
    be = std::make_unique<SoftwareBackend>(params, cfg, cfg.four_bit ? &qrng : nullptr);
  } else if (backend == "crossbar") {
    be = std::make_unique<CrossbarBackend>(params, cfg, analog, hw_rng);
  } else {
    throw std::invalid_argument("evaluate: unknown backend " + backend);
  }

  EvalResult res;
  res.mean_accuracy.assign(size_t(cfg.inner_steps) + 1, 0.0);
  res.std_accuracy.assign(size_t(cfg.inner_steps) + 1, 0.0);
  for (int t = 0; t < tasks; ++t) {
    auto ep = data::sample_task(test, cfg.ways, cfg.shots, task_rng);
    be->set_dense(params.dense);
    const Tensor hs = be->features(ep.support_x);
    const Tensor hq = be->features(ep.query_x);
    std::vector<double> acc;
    acc.push_back(accuracy(be->logits(hq), ep.query_y));
    Tensor dense = params.dense;
    for (int step = 0; step < cfg.inner_steps; ++step) {
      const Tensor f = softmax_rows(be->logits(hs));
      const Tensor d = delta_rule(hs, f, ep.support_y, cfg.inner_lr);
      for (int64_t i = 0; i < dense.numel(); ++i) dense[i] += d[i];
      be->set_dense(dense);
      acc.push_back(accuracy(be->logits(hq), ep.query_y));
    }
    res.task_accuracy.push_back(acc);
  }
  for (size_t s = 0; s <= size_t(cfg.inner_steps); ++s) {
    double m = 0;
    for (const auto& a : res.task_accuracy) m += a[s];
    m /= double(tasks);
    double v = 0;
    for (const auto& a : res.task_accuracy) v += (a[s] - m) * (a[s] - m);
    res.mean_accuracy[s] = m;
    res.std_accuracy[s] = std::sqrt(v / double(tasks));
  }
  return res;
}

}  // namespace l2l::maml
