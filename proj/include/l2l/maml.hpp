#pragma once

#include <string>
#include <vector>

#include "l2l/adam.hpp"
#include "l2l/dataset.hpp"
#include "l2l/deploy.hpp"
#include "l2l/tape.hpp"

namespace l2l::maml {

struct MamlConfig {
  int filters = 56;
  int ways = 5;
  int shots = 5;
  double inner_lr = 0.1;    // alpha
  double outer_lr = 0.001;  // beta
  int inner_steps = 4;
  int meta_batch = 40;
  int outer_iters = 30000;
  bool four_bit = false;    // stochastic 4-bit weights at every forward
  bool first_order = false; // detach the inner-update gradient path
  int image_hw = data::kImageHw;
  int in_channels = 1;
  int weight_levels = 15;
  int val_interval = 100;
  int val_episodes = 8;
  int checkpoint_interval = 500;
};

// Four conv blocks (3x3, stride 2, conv -> relu -> batchnorm) feeding a
// global max-pool and a bias-free dense classifier.
template <typename T>
struct CnnParamsT {
  std::vector<TensorT<T>> conv_w;  // (F_out, C_in, 3, 3)
  std::vector<TensorT<T>> conv_b;  // (F_out)
  std::vector<TensorT<T>> gamma, beta;
  TensorT<T> dense;                // (F, ways)

  static CnnParamsT init(int filters, int ways, Rng& rng, int in_channels = 1) {
    CnnParamsT p;
    for (int blk = 0; blk < 4; ++blk) {
      const int64_t cin = blk == 0 ? in_channels : filters;
      TensorT<T> w({filters, cin, 3, 3});
      const double bound = std::sqrt(6.0 / double(cin * 9));
      for (auto& v : w.data) v = static_cast<T>(rng.uniform(-bound, bound));
      p.conv_w.push_back(std::move(w));
      p.conv_b.push_back(TensorT<T>({filters}));
      p.gamma.push_back(TensorT<T>::full({filters}, T(1)));
      p.beta.push_back(TensorT<T>({filters}));
    }
    p.dense = TensorT<T>({filters, ways});
    const double bound = std::sqrt(6.0 / double(filters));
    for (auto& v : p.dense.data) v = static_cast<T>(rng.uniform(-bound, bound));
    return p;
  }

  std::vector<TensorT<T>*> tensors() {
    std::vector<TensorT<T>*> out;
    for (size_t i = 0; i < conv_w.size(); ++i) {
      out.push_back(&conv_w[i]);
      out.push_back(&conv_b[i]);
      out.push_back(&gamma[i]);
      out.push_back(&beta[i]);
    }
    out.push_back(&dense);
    return out;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (size_t i = 0; i < conv_w.size(); ++i) {
      const std::string b = "block" + std::to_string(i + 1);
      out.insert(out.end(), {b + ".w", b + ".b", b + ".gamma", b + ".beta"});
    }
    out.push_back("dense");
    return out;
  }
  template <typename U>
  CnnParamsT<U> cast() const {
    CnnParamsT<U> q;
    for (size_t i = 0; i < conv_w.size(); ++i) {
      q.conv_w.push_back(conv_w[i].template cast<U>());
      q.conv_b.push_back(conv_b[i].template cast<U>());
      q.gamma.push_back(gamma[i].template cast<U>());
      q.beta.push_back(beta[i].template cast<U>());
    }
    q.dense = dense.template cast<U>();
    return q;
  }
};
using CnnParams = CnnParamsT<float>;

// tape node ids of the declared parameters, in tensors() order
struct GraphParams {
  std::vector<int> conv_w, conv_b, gamma, beta;
  int dense = -1;
};

template <typename T>
GraphParams declare_params(Tape<T>& tape, const CnnParamsT<T>& p) {
  GraphParams gp;
  for (size_t i = 0; i < p.conv_w.size(); ++i) {
    gp.conv_w.push_back(tape.param(p.conv_w[i]));
    gp.conv_b.push_back(tape.param(p.conv_b[i]));
    gp.gamma.push_back(tape.param(p.gamma[i]));
    gp.beta.push_back(tape.param(p.beta[i]));
  }
  gp.dense = tape.param(p.dense);
  return gp;
}

template <typename T>
int maybe_quantize(Tape<T>& tape, int w, const MamlConfig& cfg, Rng* qrng) {
  if (!cfg.four_bit) return w;
  if (!qrng) throw std::invalid_argument("4-bit mode needs a generator");
  return tape.quantize_stochastic(w, cfg.weight_levels, *qrng);
}

// conv stack + global max-pool: images (B,C,H,W) -> features (B,F)
template <typename T>
int conv_features(Tape<T>& tape, const GraphParams& gp, int images,
                  const MamlConfig& cfg, Rng* qrng) {
  int x = images;
  for (size_t i = 0; i < gp.conv_w.size(); ++i) {
    int w = maybe_quantize(tape, gp.conv_w[i], cfg, qrng);
    int b = maybe_quantize(tape, gp.conv_b[i], cfg, qrng);
    x = tape.conv2d(x, w, b, 2);
    x = tape.relu(x);
    x = tape.batchnorm(x, gp.gamma[i], gp.beta[i]);
  }
  return tape.global_maxpool(x);
}

// Unrolled episode: n differentiable delta-rule updates of the dense layer
// on the support set, then query cross-entropy under the adapted weights.
template <typename T>
int episode_loss(Tape<T>& tape, const GraphParams& gp, const data::Episode& ep,
                 const MamlConfig& cfg, Rng* qrng) {
  const int sx = tape.constant(ep.support_x.cast<T>());
  const int sy = tape.constant(ep.support_y.cast<T>());
  const int qx = tape.constant(ep.query_x.cast<T>());
  const int qy = tape.constant(ep.query_y.cast<T>());
  const double B = double(ep.support_x.dim(0));

  const int hs = conv_features(tape, gp, sx, cfg, qrng);
  int dense = gp.dense;
  for (int step = 0; step < cfg.inner_steps; ++step) {
    int dq = maybe_quantize(tape, dense, cfg, qrng);
    int f = tape.softmax(tape.matmul(hs, dq));
    // exact dense gradient of the mean softmax cross-entropy
    int grad = tape.scale(tape.matmul(hs, tape.sub(f, sy), true, false), 1.0 / B);
    dense = tape.weight_update(dense, grad, cfg.inner_lr, cfg.first_order);
  }
  const int hq = conv_features(tape, gp, qx, cfg, qrng);
  int dq = maybe_quantize(tape, dense, cfg, qrng);
  return tape.softmax_cross_entropy(tape.matmul(hq, dq), qy);
}

// Delta rule on precomputed features: alpha/B * h^T (y - f), shape (F, ways).
Tensor delta_rule(const Tensor& h, const Tensor& f, const Tensor& y, double alpha);

// One Adam step over the meta-batch; returns the mean query loss.
double outer_step(CnnParams& params, const std::vector<data::Episode>& batch,
                  const MamlConfig& cfg, Adam& opt, Rng& qrng);

struct TrainCurves {
  std::vector<double> train_loss;                      // per iteration
  std::vector<std::pair<int, double>> val_loss;        // (iteration, loss)
};

CnnParams meta_train(const MamlConfig& cfg, const data::Dataset& train,
                     const data::Dataset& val, uint64_t seed,
                     const std::string& out_dir = "",
                     TrainCurves* curves = nullptr);

// Inference backend: feature extraction + dense readout, with a mutable
// dense layer for the adaptation steps.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual Tensor features(const Tensor& images) = 0;  // (B, F)
  virtual Tensor logits(const Tensor& features) = 0;  // (B, ways)
  virtual void set_dense(const Tensor& dense) = 0;
};

class SoftwareBackend : public Backend {
 public:
  SoftwareBackend(const CnnParams& p, const MamlConfig& cfg, Rng* qrng = nullptr);
  Tensor features(const Tensor& images) override;
  Tensor logits(const Tensor& features) override;
  void set_dense(const Tensor& dense) override;

 private:
  CnnParams params_;
  MamlConfig cfg_;
  Rng* qrng_;
};

class CrossbarBackend : public Backend {
 public:
  CrossbarBackend(const CnnParams& p, const MamlConfig& cfg,
                  xbar::AnalogConfig analog, Rng& rng);
  Tensor features(const Tensor& images) override;
  Tensor logits(const Tensor& features) override;
  void set_dense(const Tensor& dense) override;
  int64_t devices_touched_last() const { return devices_touched_last_; }

 private:
  CnnParams params_;  // batchnorm stays digital
  MamlConfig cfg_;
  deploy::PlacementPlan plan_;
  std::vector<xbar::CrossbarCore> cores_;
  Rng rng_;
  int dense_layer_ = 0;
  int64_t devices_touched_last_ = 0;
};

// n delta-rule steps on the support set; returns the dense weights after
// steps 0..n (n+1 entries). Mutates the backend's dense layer.
std::vector<Tensor> inner_adapt(Backend& backend, const Tensor& dense0,
                                const Tensor& support_x, const Tensor& support_y,
                                double alpha, int n);

struct EvalResult {
  std::vector<std::vector<double>> task_accuracy;  // [task][step 0..n]
  std::vector<double> mean_accuracy;               // per step
  std::vector<double> std_accuracy;
};

EvalResult evaluate(const CnnParams& params, const data::Dataset& test,
                    int tasks, const MamlConfig& cfg, const std::string& backend,
                    uint64_t seed, xbar::AnalogConfig analog = {});

}  // namespace l2l::maml
