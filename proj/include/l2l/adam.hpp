#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "l2l/tensor.hpp"

namespace l2l {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // multiplicative decay of the learning rate every `decay_interval` steps;
  // interval 0 disables the schedule
  double lr_decay = 1.0;
  int64_t decay_interval = 0;
};

// Adam with bias correction over a fixed list of parameter tensors.
template <typename T>
class AdamT {
 public:
  AdamT(AdamConfig cfg, const std::vector<TensorT<T>*>& params,
        std::vector<std::string> names = {})
      : cfg_(cfg), params_(params), names_(std::move(names)) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (auto* p : params_) {
      m_.push_back(TensorT<T>::zeros_like(*p));
      v_.push_back(TensorT<T>::zeros_like(*p));
    }
  }

  double effective_lr() const {
    double lr = cfg_.lr;
    if (cfg_.decay_interval > 0 && cfg_.lr_decay != 1.0)
      lr *= std::pow(cfg_.lr_decay,
                     static_cast<double>(step_ / cfg_.decay_interval));
    return lr;
  }

  int64_t step_count() const { return step_; }

  void step(const std::vector<TensorT<T>>& grads) {
    if (grads.size() != params_.size())
      throw std::invalid_argument("adam: gradient count mismatch");
    for (size_t i = 0; i < grads.size(); ++i) {
      if (!grads[i].same_shape(*params_[i]))
        throw std::invalid_argument("adam: gradient shape mismatch for " + name(i));
      if (!grads[i].all_finite())
        throw std::runtime_error("adam: non-finite gradient for " + name(i));
    }
    ++step_;
    const double lr = effective_lr();
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      for (int64_t e = 0; e < p.numel(); ++e) {
        double gr = grads[i][e];
        double m = cfg_.beta1 * m_[i][e] + (1 - cfg_.beta1) * gr;
        double v = cfg_.beta2 * v_[i][e] + (1 - cfg_.beta2) * gr * gr;
        m_[i][e] = static_cast<T>(m);
        v_[i][e] = static_cast<T>(v);
        p[e] -= static_cast<T>(lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps));
      }
    }
  }

 private:
  std::string name(size_t i) const {
    return i < names_.size() ? names_[i] : "param " + std::to_string(i);
  }

  AdamConfig cfg_;
  std::vector<TensorT<T>*> params_;
  std::vector<std::string> names_;
  std::vector<TensorT<T>> m_, v_;
  int64_t step_ = 0;
};

using Adam = AdamT<float>;

}  // namespace l2l
