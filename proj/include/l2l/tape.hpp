#pragma once

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "l2l/rng.hpp"
#include "l2l/robot.hpp"
#include "l2l/tensor.hpp"

namespace l2l {

// Fixed primitive vocabulary of the tape. Spike carries the heaviside with
// its surrogate gradient; SurrogateFactor exposes the pseudo-derivative as a
// value so eligibility traces can be built from it.
enum class Op {
  Input,
  Param,
  Constant,
  Matmul,
  Bmm,
  Conv2d,
  Relu,
  BatchNorm,
  GlobalMaxPool,
  Softmax,
  CrossEntropy,
  SoftmaxCrossEntropy,
  Add,
  Sub,
  Mul,
  Scale,
  ExpFilterStep,
  Spike,
  SurrogateFactor,
  StopGrad,
  SumAll,
  Reshape,
  StackLast,
  ArmPosition,
  WeightUpdate,
  QuantizeStochastic,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Param: return "param";
    case Op::Constant: return "constant";
    case Op::Matmul: return "matmul";
    case Op::Bmm: return "bmm";
    case Op::Conv2d: return "conv2d";
    case Op::Relu: return "relu";
    case Op::BatchNorm: return "batchnorm";
    case Op::GlobalMaxPool: return "global-maxpool";
    case Op::Softmax: return "softmax";
    case Op::CrossEntropy: return "cross-entropy";
    case Op::SoftmaxCrossEntropy: return "softmax-cross-entropy";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::ExpFilterStep: return "exp-filter";
    case Op::Spike: return "heaviside";
    case Op::SurrogateFactor: return "surrogate-factor";
    case Op::StopGrad: return "stop-grad";
    case Op::SumAll: return "sum-all";
    case Op::Reshape: return "reshape";
    case Op::StackLast: return "stack";
    case Op::ArmPosition: return "arm-position";
    case Op::WeightUpdate: return "weight-update";
    case Op::QuantizeStochastic: return "quantize-stochastic";
  }
  return "?";
}

class TapeError : public std::runtime_error {
 public:
  TapeError(int node, Op op, const std::string& what)
      : std::runtime_error("tape node " + std::to_string(node) + " (" +
                           op_name(op) + "): " + what),
        node_index(node),
        op(op) {}
  int node_index;
  Op op;
};

namespace detail {
inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta,
                 float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}
inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}
}  // namespace detail

// Reverse-mode tape over the fixed vocabulary above. Recording is eager:
// each builder call evaluates its node immediately. replay() recomputes all
// non-leaf nodes from the current leaf values, bit-exactly for unchanged
// leaves (stochastic draws are frozen at record time).
template <typename T>
class Tape {
 public:
  struct Node {
    Op op;
    std::vector<int> in;
    TensorT<T> val;
    double f0 = 0, f1 = 0, f2 = 0;  // op-specific scalars
    int i0 = 0, i1 = 0;             // op-specific ints / flags
    bool flag = false;
    std::vector<int64_t> iaux;  // argmax indices
    std::vector<T> faux;        // saved stats / frozen random draws
  };

  robot::DhParams dh = robot::DhParams::ed_scorbot();
  bool check_finite = true;
  int64_t clamp_warnings = 0;

  int size() const { return static_cast<int>(nodes_.size()); }
  const TensorT<T>& value(int id) const { return nodes_.at(id).val; }
  TensorT<T>& mutable_value(int id) { return nodes_.at(id).val; }
  const std::vector<int>& param_ids() const { return params_; }
  Op op_of(int id) const { return nodes_.at(id).op; }

  // ---- leaves ----
  int input(TensorT<T> v) { return add_leaf(Op::Input, std::move(v)); }
  int constant(TensorT<T> v) { return add_leaf(Op::Constant, std::move(v)); }
  int param(TensorT<T> v) {
    int id = add_leaf(Op::Param, std::move(v));
    params_.push_back(id);
    return id;
  }

  // ---- primitives ----
  int matmul(int a, int b, bool ta = false, bool tb = false) {
    Node n{Op::Matmul, {a, b}};
    n.i0 = (ta ? 1 : 0) | (tb ? 2 : 0);
    return push(std::move(n));
  }
  int bmm(int a, int b, bool ta = false, bool tb = false) {
    Node n{Op::Bmm, {a, b}};
    n.i0 = (ta ? 1 : 0) | (tb ? 2 : 0);
    return push(std::move(n));
  }
  // 3x3 stride-2 "same"-padded convolution (general k/stride supported);
  // bias may be -1 for none.
  int conv2d(int x, int w, int bias, int stride) {
    Node n{Op::Conv2d, {x, w}};
    if (bias >= 0) n.in.push_back(bias);
    n.i0 = stride;
    return push(std::move(n));
  }
  int relu(int x) { return push(Node{Op::Relu, {x}}); }
  int batchnorm(int x, int gamma, int beta, double eps = 1e-5) {
    Node n{Op::BatchNorm, {x, gamma, beta}};
    n.f0 = eps;
    return push(std::move(n));
  }
  int global_maxpool(int x) { return push(Node{Op::GlobalMaxPool, {x}}); }
  int softmax(int x) { return push(Node{Op::Softmax, {x}}); }
  int cross_entropy(int probs, int onehot) {
    return push(Node{Op::CrossEntropy, {probs, onehot}});
  }
  int softmax_cross_entropy(int logits, int onehot) {
    return push(Node{Op::SoftmaxCrossEntropy, {logits, onehot}});
  }
  int add(int a, int b) { return push(Node{Op::Add, {a, b}}); }
  int sub(int a, int b) { return push(Node{Op::Sub, {a, b}}); }
  int mul(int a, int b) { return push(Node{Op::Mul, {a, b}}); }
  int scale(int x, double c) {
    Node n{Op::Scale, {x}};
    n.f0 = c;
    return push(std::move(n));
  }
  // out = decay * prev + x
  int exp_filter_step(int prev, int x, double decay) {
    Node n{Op::ExpFilterStep, {prev, x}};
    n.f0 = decay;
    return push(std::move(n));
  }
  // z = H((v - thr)/vth_norm), surrogate slope lambda; smooth mode replaces
  // the hard step by the integral of the surrogate (gradient-check only).
  int spike(int v, int thr, double vth_norm, double lambda, bool smooth = false) {
    Node n{Op::Spike, {v, thr}};
    n.f0 = vth_norm;
    n.f1 = lambda;
    n.flag = smooth;
    return push(std::move(n));
  }
  int surrogate_factor(int v, int thr, double vth_norm, double lambda) {
    Node n{Op::SurrogateFactor, {v, thr}};
    n.f0 = vth_norm;
    n.f1 = lambda;
    return push(std::move(n));
  }
  int stop_grad(int x) { return push(Node{Op::StopGrad, {x}}); }
  int sum_all(int x) { return push(Node{Op::SumAll, {x}}); }
  int reshape(int x, std::vector<int64_t> shape) {
    Node n{Op::Reshape, {x}};
    n.val.shape = std::move(shape);
    return push(std::move(n));
  }
  int stack_last(const std::vector<int>& xs) {
    Node n{Op::StackLast, xs};
    return push(std::move(n));
  }
  // (B x 2) relative joint angles -> (B x 3) end-effector position in cm.
  int arm_position(int angles) { return push(Node{Op::ArmPosition, {angles}}); }
  // out = p - alpha * delta; first_order detaches delta.
  int weight_update(int p, int delta, double alpha, bool first_order = false) {
    Node n{Op::WeightUpdate, {p, delta}};
    n.f0 = alpha;
    n.flag = first_order;
    return push(std::move(n));
  }
  // Symmetric uniform grid of `levels` signed levels over [-s, s] with
  // s = max-abs of the input at record time; draws are frozen on the node.
  int quantize_stochastic(int x, int levels, Rng& rng) {
    Node n{Op::QuantizeStochastic, {x}};
    n.i0 = levels;
    const auto& xin = nodes_[x].val;
    double s = 0;
    for (T v : xin.data) s = std::max(s, std::abs(static_cast<double>(v)));
    n.f0 = s > 0 ? s : 1.0;
    n.faux.resize(xin.numel());
    for (auto& u : n.faux) u = static_cast<T>(rng.uniform());
    return push(std::move(n));
  }

  // Recompute every non-leaf node from current leaf values, in order.
  void replay() {
    for (int i = 0; i < size(); ++i)
      if (!is_leaf(nodes_[i].op)) eval(i);
  }

  // Gradients of a scalar loss for every marked parameter, in param order.
  std::vector<TensorT<T>> backward(int loss) {
    if (loss < 0 || loss >= size()) throw std::invalid_argument("backward: bad node id");
    if (nodes_[loss].val.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    TensorT<T> seed = TensorT<T>::scalar(T(1));
    return backward_seeded(loss, seed);
  }

  std::vector<TensorT<T>> backward_seeded(int loss, const TensorT<T>& seed) {
    if (!nodes_[loss].val.same_shape(seed))
      throw std::invalid_argument("backward: seed shape mismatch");
    grads_.assign(size(), TensorT<T>());
    accum(loss, seed);
    for (int i = loss; i >= 0; --i)
      if (grads_[i].numel() > 0 && !is_leaf(nodes_[i].op)) backprop(i);
    std::vector<TensorT<T>> out;
    out.reserve(params_.size());
    for (int p : params_)
      out.push_back(grads_[p].numel() ? grads_[p]
                                      : TensorT<T>::zeros_like(nodes_[p].val));
    return out;
  }

  // Max over parameters of |analytic - central difference| /
  // (|analytic| + |central| + 1e-12).
  double finite_diff_check(int loss, double step) {
    if (nodes_.at(loss).val.numel() != 1)
      throw std::invalid_argument("finite_diff_check: loss must be scalar");
    auto analytic = backward(loss);
    double worst = 0;
    for (size_t pi = 0; pi < params_.size(); ++pi) {
      auto& pv = nodes_[params_[pi]].val;
      for (int64_t e = 0; e < pv.numel(); ++e) {
        T orig = pv[e];
        pv[e] = orig + static_cast<T>(step);
        replay();
        double fp = nodes_[loss].val[0];
        pv[e] = orig - static_cast<T>(step);
        replay();
        double fm = nodes_[loss].val[0];
        pv[e] = orig;
        double num = (fp - fm) / (2 * step);
        double ana = analytic[pi][e];
        worst = std::max(worst,
                         std::abs(ana - num) / (std::abs(ana) + std::abs(num) + 1e-12));
      }
    }
    replay();
    return worst;
  }

 private:
  std::vector<Node> nodes_;
  std::vector<int> params_;
  std::vector<TensorT<T>> grads_;

  static bool is_leaf(Op op) {
    return op == Op::Input || op == Op::Param || op == Op::Constant;
  }

  int add_leaf(Op op, TensorT<T> v) {
    Node n{op, {}};
    n.val = std::move(v);
    nodes_.push_back(std::move(n));
    return size() - 1;
  }

  int push(Node n) {
    for (int i : n.in)
      if (i < 0 || i >= size())
        throw TapeError(size(), n.op, "input node out of range");
    nodes_.push_back(std::move(n));
    int id = size() - 1;
    eval(id);
    return id;
  }

  [[noreturn]] void fail(int id, const std::string& msg) const {
    throw TapeError(id, nodes_[id].op, msg);
  }

  const TensorT<T>& in_val(int id, int k) const {
    return nodes_[nodes_[id].in[k]].val;
  }

  void accum(int id, const TensorT<T>& g) {
    if (grads_[id].numel() == 0) {
      grads_[id] = g;
    } else {
      if (!grads_[id].same_shape(g)) fail(id, "gradient shape mismatch");
      for (int64_t i = 0; i < g.numel(); ++i) grads_[id][i] += g[i];
    }
  }

  void accum_move(int id, TensorT<T>&& g) {
    if (grads_[id].numel() == 0)
      grads_[id] = std::move(g);
    else
      accum(id, g);
  }

  // ---------------- forward ----------------

  void eval(int id);

  // ---------------- backward ---------------

  void backprop(int id);

  // raw helpers
  TensorT<T> mm(const TensorT<T>& a, bool ta, const TensorT<T>& b, bool tb,
                int id) const {
    if (a.rank() != 2 || b.rank() != 2) fail(id, "matmul expects rank-2 tensors");
    int64_t m = ta ? a.dim(1) : a.dim(0);
    int64_t k = ta ? a.dim(0) : a.dim(1);
    int64_t kb = tb ? b.dim(1) : b.dim(0);
    int64_t n = tb ? b.dim(0) : b.dim(1);
    if (k != kb)
      fail(id, "inner dimensions disagree: " + shape_str(a.shape) + " vs " +
                   shape_str(b.shape));
    TensorT<T> c({m, n});
    detail::gemm(ta, tb, (int)m, (int)n, (int)k, T(1), a.data.data(),
                 (int)a.dim(1), b.data.data(), (int)b.dim(1), T(0),
                 c.data.data(), (int)n);
    return c;
  }

  // im2col geometry for TF-style "same" padding
  struct ConvGeom {
    int64_t N, C, H, W, O, KH, KW, OH, OW;
    int stride, pad_top, pad_left;
  };
  ConvGeom conv_geom(int id) const {
    const auto& x = in_val(id, 0);
    const auto& w = in_val(id, 1);
    if (x.rank() != 4 || w.rank() != 4) fail(id, "conv2d expects NCHW and OIHW");
    ConvGeom g;
    g.N = x.dim(0); g.C = x.dim(1); g.H = x.dim(2); g.W = x.dim(3);
    g.O = w.dim(0); g.KH = w.dim(2); g.KW = w.dim(3);
    if (w.dim(1) != g.C) fail(id, "conv2d channel mismatch");
    g.stride = nodes_[id].i0;
    g.OH = (g.H + g.stride - 1) / g.stride;
    g.OW = (g.W + g.stride - 1) / g.stride;
    int64_t pad_h = std::max<int64_t>((g.OH - 1) * g.stride + g.KH - g.H, 0);
    int64_t pad_w = std::max<int64_t>((g.OW - 1) * g.stride + g.KW - g.W, 0);
    g.pad_top = static_cast<int>(pad_h / 2);
    g.pad_left = static_cast<int>(pad_w / 2);
    return g;
  }

  void im2col_image(const T* img, const ConvGeom& g, T* col) const {
    // col: (OH*OW) x (C*KH*KW)
    const int64_t K = g.C * g.KH * g.KW;
    for (int64_t oy = 0; oy < g.OH; ++oy)
      for (int64_t ox = 0; ox < g.OW; ++ox) {
        T* row = col + (oy * g.OW + ox) * K;
        int64_t iy0 = oy * g.stride - g.pad_top;
        int64_t ix0 = ox * g.stride - g.pad_left;
        int64_t idx = 0;
        for (int64_t c = 0; c < g.C; ++c)
          for (int64_t ky = 0; ky < g.KH; ++ky)
            for (int64_t kx = 0; kx < g.KW; ++kx, ++idx) {
              int64_t iy = iy0 + ky, ix = ix0 + kx;
              row[idx] = (iy >= 0 && iy < g.H && ix >= 0 && ix < g.W)
                             ? img[(c * g.H + iy) * g.W + ix]
                             : T(0);
            }
      }
  }
};

template <typename T>
void Tape<T>::eval(int id) {
  Node& n = nodes_[id];
  switch (n.op) {
    case Op::Input:
    case Op::Param:
    case Op::Constant:
      break;
    case Op::Matmul:
      n.val = mm(in_val(id, 0), n.i0 & 1, in_val(id, 1), n.i0 & 2, id);
      break;
    case Op::Bmm: {
      const auto& a = in_val(id, 0);
      const auto& b = in_val(id, 1);
      if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
        fail(id, "bmm expects matching rank-3 tensors");
      bool ta = n.i0 & 1, tb = n.i0 & 2;
      int64_t B = a.dim(0);
      int64_t m = ta ? a.dim(2) : a.dim(1);
      int64_t k = ta ? a.dim(1) : a.dim(2);
      int64_t kb = tb ? b.dim(2) : b.dim(1);
      int64_t nn = tb ? b.dim(1) : b.dim(2);
      if (k != kb) fail(id, "bmm inner dimensions disagree");
      n.val = TensorT<T>({B, m, nn});
      for (int64_t bi = 0; bi < B; ++bi)
        detail::gemm(ta, tb, (int)m, (int)nn, (int)k, T(1),
                     a.data.data() + bi * a.dim(1) * a.dim(2), (int)a.dim(2),
                     b.data.data() + bi * b.dim(1) * b.dim(2), (int)b.dim(2),
                     T(0), n.val.data.data() + bi * m * nn, (int)nn);
      break;
    }
    case Op::Conv2d: {
      ConvGeom g = conv_geom(id);
      const auto& x = in_val(id, 0);
      const auto& w = in_val(id, 1);
      const T* bias = n.in.size() > 2 ? in_val(id, 2).data.data() : nullptr;
      if (bias && in_val(id, 2).numel() != g.O) fail(id, "conv2d bias size mismatch");
      const int64_t K = g.C * g.KH * g.KW, P = g.OH * g.OW;
      n.val = TensorT<T>({g.N, g.O, g.OH, g.OW});
      std::vector<T> col(P * K), out(P * g.O);
      for (int64_t ni = 0; ni < g.N; ++ni) {
        im2col_image(x.data.data() + ni * g.C * g.H * g.W, g, col.data());
        // (P x K) * (O x K)^T -> P x O
        detail::gemm(false, true, (int)P, (int)g.O, (int)K, T(1), col.data(),
                     (int)K, w.data.data(), (int)K, T(0), out.data(), (int)g.O);
        T* dst = n.val.data.data() + ni * g.O * P;
        for (int64_t o = 0; o < g.O; ++o)
          for (int64_t p = 0; p < P; ++p)
            dst[o * P + p] = out[p * g.O + o] + (bias ? bias[o] : T(0));
      }
      break;
    }
    case Op::Relu: {
      const auto& x = in_val(id, 0);
      n.val = x;
      for (auto& v : n.val.data) v = v > T(0) ? v : T(0);
      break;
    }
    case Op::BatchNorm: {
      const auto& x = in_val(id, 0);
      const auto& gamma = in_val(id, 1);
      const auto& beta = in_val(id, 2);
      if (x.rank() != 4) fail(id, "batchnorm expects NCHW");
      int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
      if (gamma.numel() != C || beta.numel() != C)
        fail(id, "batchnorm scale/shift size mismatch");
      n.val = TensorT<T>(x.shape);
      n.faux.assign(2 * C, T(0));  // mean, invstd per channel
      const double m = static_cast<double>(N * HW);
      for (int64_t c = 0; c < C; ++c) {
        double mean = 0;
        for (int64_t ni = 0; ni < N; ++ni) {
          const T* p = x.data.data() + (ni * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) mean += p[i];
        }
        mean /= m;
        double var = 0;
        for (int64_t ni = 0; ni < N; ++ni) {
          const T* p = x.data.data() + (ni * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) var += (p[i] - mean) * (p[i] - mean);
        }
        var /= m;
        double invstd = 1.0 / std::sqrt(var + n.f0);
        n.faux[c] = static_cast<T>(mean);
        n.faux[C + c] = static_cast<T>(invstd);
        for (int64_t ni = 0; ni < N; ++ni) {
          const T* p = x.data.data() + (ni * C + c) * HW;
          T* q = n.val.data.data() + (ni * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i)
            q[i] = gamma[c] * static_cast<T>((p[i] - mean) * invstd) + beta[c];
        }
      }
      break;
    }
    case Op::GlobalMaxPool: {
      const auto& x = in_val(id, 0);
      if (x.rank() != 4) fail(id, "global-maxpool expects NCHW");
      int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
      n.val = TensorT<T>({N, C});
      n.iaux.resize(N * C);
      for (int64_t i = 0; i < N * C; ++i) {
        const T* p = x.data.data() + i * HW;
        int64_t best = 0;
        for (int64_t j = 1; j < HW; ++j)
          if (p[j] > p[best]) best = j;
        n.iaux[i] = best;
        n.val[i] = p[best];
      }
      break;
    }
    case Op::Softmax: {
      const auto& x = in_val(id, 0);
      int64_t D = x.dim(x.rank() - 1), R = x.numel() / D;
      n.val = TensorT<T>(x.shape);
      for (int64_t r = 0; r < R; ++r) {
        const T* p = x.data.data() + r * D;
        T* q = n.val.data.data() + r * D;
        T mx = *std::max_element(p, p + D);
        double s = 0;
        for (int64_t i = 0; i < D; ++i) s += std::exp(static_cast<double>(p[i] - mx));
        for (int64_t i = 0; i < D; ++i)
          q[i] = static_cast<T>(std::exp(static_cast<double>(p[i] - mx)) / s);
      }
      break;
    }
    case Op::CrossEntropy: {
      const auto& p = in_val(id, 0);
      const auto& y = in_val(id, 1);
      if (!p.same_shape(y)) fail(id, "probability/label shape mismatch");
      int64_t D = p.dim(p.rank() - 1), R = p.numel() / D;
      double loss = 0;
      for (int64_t i = 0; i < p.numel(); ++i)
        if (y[i] != T(0))
          loss -= y[i] * std::log(std::max(static_cast<double>(p[i]), 1e-30));
      n.val = TensorT<T>::scalar(static_cast<T>(loss / R));
      break;
    }
    case Op::SoftmaxCrossEntropy: {
      const auto& x = in_val(id, 0);
      const auto& y = in_val(id, 1);
      if (!x.same_shape(y)) fail(id, "logit/label shape mismatch");
      int64_t D = x.dim(x.rank() - 1), R = x.numel() / D;
      n.faux.resize(x.numel());  // softmax probabilities
      double loss = 0;
      for (int64_t r = 0; r < R; ++r) {
        const T* p = x.data.data() + r * D;
        T mx = *std::max_element(p, p + D);
        double s = 0;
        for (int64_t i = 0; i < D; ++i) s += std::exp(static_cast<double>(p[i] - mx));
        double lse = std::log(s) + mx;
        for (int64_t i = 0; i < D; ++i) {
          n.faux[r * D + i] =
              static_cast<T>(std::exp(static_cast<double>(p[i] - mx)) / s);
          loss += y[r * D + i] * (lse - p[i]);
        }
      }
      n.val = TensorT<T>::scalar(static_cast<T>(loss / R));
      break;
    }
    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      const auto& a = in_val(id, 0);
      const auto& b = in_val(id, 1);
      if (!a.same_shape(b))
        fail(id, "shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
      n.val = TensorT<T>(a.shape);
      for (int64_t i = 0; i < a.numel(); ++i)
        n.val[i] = n.op == Op::Add ? a[i] + b[i]
                   : n.op == Op::Sub ? a[i] - b[i]
                                     : a[i] * b[i];
      break;
    }
    case Op::Scale: {
      n.val = in_val(id, 0);
      for (auto& v : n.val.data) v = static_cast<T>(v * n.f0);
      break;
    }
    case Op::ExpFilterStep: {
      const auto& prev = in_val(id, 0);
      const auto& x = in_val(id, 1);
      if (!prev.same_shape(x)) fail(id, "filter state/input shape mismatch");
      n.val = TensorT<T>(x.shape);
      for (int64_t i = 0; i < x.numel(); ++i)
        n.val[i] = static_cast<T>(n.f0 * prev[i] + x[i]);
      break;
    }
    case Op::Spike: {
      const auto& v = in_val(id, 0);
      const auto& thr = in_val(id, 1);
      if (!v.same_shape(thr)) fail(id, "voltage/threshold shape mismatch");
      n.val = TensorT<T>(v.shape);
      const double lam = n.f1;
      for (int64_t i = 0; i < v.numel(); ++i) {
        double u = (v[i] - thr[i]) / n.f0;
        if (!n.flag) {
          n.val[i] = u >= 0 ? T(1) : T(0);
        } else {
          // integral of the surrogate: C1 relaxation used by gradient checks
          double s;
          if (u <= -1) s = 0;
          else if (u <= 0) s = lam * (u + 1) * (u + 1) / 2;
          else if (u <= 1) s = lam * (0.5 + u - u * u / 2);
          else s = lam;
          n.val[i] = static_cast<T>(s);
        }
      }
      break;
    }
    case Op::SurrogateFactor: {
      const auto& v = in_val(id, 0);
      const auto& thr = in_val(id, 1);
      if (!v.same_shape(thr)) fail(id, "voltage/threshold shape mismatch");
      n.val = TensorT<T>(v.shape);
      for (int64_t i = 0; i < v.numel(); ++i) {
        double u = std::abs((v[i] - thr[i]) / n.f0);
        n.val[i] = static_cast<T>(n.f1 * std::max(0.0, 1.0 - u));
      }
      break;
    }
    case Op::StopGrad:
    case Op::Reshape: {
      const auto& x = in_val(id, 0);
      if (n.op == Op::Reshape) {
        if (TensorT<T>::numel_of(n.val.shape) != x.numel())
          fail(id, "reshape element count mismatch");
        n.val.data = x.data;
      } else {
        n.val = x;
      }
      break;
    }
    case Op::SumAll: {
      const auto& x = in_val(id, 0);
      double s = 0;
      for (T v : x.data) s += v;
      n.val = TensorT<T>::scalar(static_cast<T>(s));
      break;
    }
    case Op::StackLast: {
      const int k = static_cast<int>(n.in.size());
      const auto& first = in_val(id, 0);
      for (int i = 1; i < k; ++i)
        if (!in_val(id, i).same_shape(first)) fail(id, "stack shape mismatch");
      auto shape = first.shape;
      shape.push_back(k);
      n.val = TensorT<T>(shape);
      for (int64_t j = 0; j < first.numel(); ++j)
        for (int i = 0; i < k; ++i) n.val[j * k + i] = in_val(id, i)[j];
      break;
    }
    case Op::ArmPosition: {
      const auto& ang = in_val(id, 0);
      if (ang.rank() != 2 || ang.dim(1) != 2) fail(id, "arm-position expects B x 2");
      int64_t B = ang.dim(0);
      n.val = TensorT<T>({B, 3});
      for (int64_t b = 0; b < B; ++b) {
        auto p = robot::forward_kinematics(dh, {static_cast<double>(ang[b * 2]),
                                                static_cast<double>(ang[b * 2 + 1])});
        n.val[b * 3] = static_cast<T>(p.x);
        n.val[b * 3 + 1] = static_cast<T>(p.y);
        n.val[b * 3 + 2] = static_cast<T>(p.z);
      }
      break;
    }
    case Op::WeightUpdate: {
      const auto& p = in_val(id, 0);
      const auto& d = in_val(id, 1);
      if (p.same_shape(d)) {
        n.val = TensorT<T>(p.shape);
        for (int64_t i = 0; i < p.numel(); ++i)
          n.val[i] = static_cast<T>(p[i] - n.f0 * d[i]);
      } else if (d.rank() == p.rank() + 1 && d.numel() % p.numel() == 0 &&
                 d.dim(0) * p.numel() == d.numel()) {
        // batched delta against shared parameters
        int64_t B = d.dim(0), M = p.numel();
        n.val = TensorT<T>(d.shape);
        for (int64_t b = 0; b < B; ++b)
          for (int64_t i = 0; i < M; ++i)
            n.val[b * M + i] = static_cast<T>(p[i] - n.f0 * d[b * M + i]);
      } else {
        fail(id, "parameter/delta shape mismatch");
      }
      break;
    }
    case Op::QuantizeStochastic: {
      const auto& x = in_val(id, 0);
      n.val = TensorT<T>(x.shape);
      const int L = n.i0;
      const double s = n.f0, step = 2.0 * s / (L - 1);
      for (int64_t i = 0; i < x.numel(); ++i) {
        double v = x[i];
        if (v < -s || v > s) {
          ++clamp_warnings;
          v = std::clamp(v, -s, s);
        }
        double q = (v + s) / step;
        double lo = std::floor(q);
        double p = q - lo;
        if (static_cast<double>(n.faux[i]) < p) lo += 1;
        n.val[i] = static_cast<T>(std::min(lo, double(L - 1)) * step - s);
      }
      break;
    }
  }
  if (check_finite && !is_leaf(n.op) && !n.val.all_finite())
    fail(id, "non-finite value produced");
}

template <typename T>
void Tape<T>::backprop(int id) {
  Node& n = nodes_[id];
  const TensorT<T>& g = grads_[id];
  switch (n.op) {
    case Op::Input:
    case Op::Param:
    case Op::Constant:
    case Op::StopGrad:
      break;
    case Op::Matmul: {
      bool ta = n.i0 & 1, tb = n.i0 & 2;
      const auto& a = in_val(id, 0);
      const auto& b = in_val(id, 1);
      if (!ta)
        accum_move(n.in[0], mm(g, false, b, !tb, id));
      else
        accum_move(n.in[0], mm(b, tb, g, true, id));
      if (!tb)
        accum_move(n.in[1], mm(a, !ta, g, false, id));
      else
        accum_move(n.in[1], mm(g, true, a, ta, id));
      break;
    }
    case Op::Bmm: {
      bool ta = n.i0 & 1, tb = n.i0 & 2;
      const auto& a = in_val(id, 0);
      const auto& b = in_val(id, 1);
      int64_t B = a.dim(0);
      TensorT<T> da(a.shape), db(b.shape);
      // per-slice gemm: out(m x nn) = op(x) * op(y), with k contracted
      auto slice_mm = [](const TensorT<T>& x, bool tx, int64_t offx,
                         const TensorT<T>& y, bool ty, int64_t offy, T* out,
                         int64_t m, int64_t nn, int64_t k) {
        detail::gemm(tx, ty, (int)m, (int)nn, (int)k, T(1),
                     x.data.data() + offx, (int)x.dim(2), y.data.data() + offy,
                     (int)y.dim(2), T(0), out, (int)nn);
      };
      for (int64_t bi = 0; bi < B; ++bi) {
        int64_t as = bi * a.dim(1) * a.dim(2), bs = bi * b.dim(1) * b.dim(2);
        int64_t gs = bi * g.dim(1) * g.dim(2);
        int64_t m = g.dim(1), nn = g.dim(2);
        if (!ta)  // da = g * op(b)^T
          slice_mm(g, false, gs, b, !tb, bs, da.data.data() + as, a.dim(1),
                   a.dim(2), nn);
        else  // da_stored = op(b) * g^T
          slice_mm(b, tb, bs, g, true, gs, da.data.data() + as, a.dim(1),
                   a.dim(2), nn);
        if (!tb)  // db = op(a)^T * g
          slice_mm(a, !ta, as, g, false, gs, db.data.data() + bs, b.dim(1),
                   b.dim(2), m);
        else  // db_stored = g^T * op(a)
          slice_mm(g, true, gs, a, ta, as, db.data.data() + bs, b.dim(1),
                   b.dim(2), m);
      }
      accum_move(n.in[0], std::move(da));
      accum_move(n.in[1], std::move(db));
      break;
    }
    case Op::Conv2d: {
      ConvGeom ge = conv_geom(id);
      const auto& x = in_val(id, 0);
      const auto& w = in_val(id, 1);
      const int64_t K = ge.C * ge.KH * ge.KW, P = ge.OH * ge.OW;
      TensorT<T> dx(x.shape), dw(w.shape);
      TensorT<T> dbias;
      bool has_bias = n.in.size() > 2;
      if (has_bias) dbias = TensorT<T>({ge.O});
      std::vector<T> col(P * K), gout(P * ge.O), dcol(P * K);
      for (int64_t ni = 0; ni < ge.N; ++ni) {
        const T* gsrc = g.data.data() + ni * ge.O * P;
        for (int64_t o = 0; o < ge.O; ++o)
          for (int64_t p = 0; p < P; ++p) gout[p * ge.O + o] = gsrc[o * P + p];
        im2col_image(x.data.data() + ni * ge.C * ge.H * ge.W, ge, col.data());
        // dw (O x K) += gout^T (O x P) * col (P x K)
        detail::gemm(true, false, (int)ge.O, (int)K, (int)P, T(1), gout.data(),
                     (int)ge.O, col.data(), (int)K, T(1), dw.data.data(), (int)K);
        // dcol (P x K) = gout (P x O) * w (O x K)
        detail::gemm(false, false, (int)P, (int)K, (int)ge.O, T(1), gout.data(),
                     (int)ge.O, w.data.data(), (int)K, T(0), dcol.data(), (int)K);
        T* dimg = dx.data.data() + ni * ge.C * ge.H * ge.W;
        for (int64_t oy = 0; oy < ge.OH; ++oy)
          for (int64_t ox = 0; ox < ge.OW; ++ox) {
            const T* row = dcol.data() + (oy * ge.OW + ox) * K;
            int64_t iy0 = oy * ge.stride - ge.pad_top;
            int64_t ix0 = ox * ge.stride - ge.pad_left;
            int64_t idx = 0;
            for (int64_t c = 0; c < ge.C; ++c)
              for (int64_t ky = 0; ky < ge.KH; ++ky)
                for (int64_t kx = 0; kx < ge.KW; ++kx, ++idx) {
                  int64_t iy = iy0 + ky, ix = ix0 + kx;
                  if (iy >= 0 && iy < ge.H && ix >= 0 && ix < ge.W)
                    dimg[(c * ge.H + iy) * ge.W + ix] += row[idx];
                }
          }
        if (has_bias)
          for (int64_t o = 0; o < ge.O; ++o)
            for (int64_t p = 0; p < P; ++p) dbias[o] += gsrc[o * P + p];
      }
      accum_move(n.in[0], std::move(dx));
      accum_move(n.in[1], std::move(dw));
      if (has_bias) accum_move(n.in[2], std::move(dbias));
      break;
    }
    case Op::Relu: {
      const auto& x = in_val(id, 0);
      TensorT<T> dx(x.shape);
      for (int64_t i = 0; i < x.numel(); ++i) dx[i] = x[i] > T(0) ? g[i] : T(0);
      accum_move(n.in[0], std::move(dx));
      break;
    }
    case Op::BatchNorm: {
      const auto& x = in_val(id, 0);
      const auto& gamma = in_val(id, 1);
      int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
      const double m = static_cast<double>(N * HW);
      TensorT<T> dx(x.shape), dgamma({C}), dbeta({C});
      for (int64_t c = 0; c < C; ++c) {
        const double mean = n.faux[c], invstd = n.faux[C + c];
        double sum_g = 0, sum_gx = 0;
        for (int64_t ni = 0; ni < N; ++ni) {
          const T* xp = x.data.data() + (ni * C + c) * HW;
          const T* gp = g.data.data() + (ni * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) {
            double xh = (xp[i] - mean) * invstd;
            sum_g += gp[i];
            sum_gx += gp[i] * xh;
          }
        }
        dgamma[c] = static_cast<T>(sum_gx);
        dbeta[c] = static_cast<T>(sum_g);
        const double k1 = sum_g / m, k2 = sum_gx / m;
        for (int64_t ni = 0; ni < N; ++ni) {
          const T* xp = x.data.data() + (ni * C + c) * HW;
          const T* gp = g.data.data() + (ni * C + c) * HW;
          T* dp = dx.data.data() + (ni * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) {
            double xh = (xp[i] - mean) * invstd;
            dp[i] = static_cast<T>(gamma[c] * invstd * (gp[i] - k1 - xh * k2));
          }
        }
      }
      accum_move(n.in[0], std::move(dx));
      accum_move(n.in[1], std::move(dgamma));
      accum_move(n.in[2], std::move(dbeta));
      break;
    }
    case Op::GlobalMaxPool: {
      const auto& x = in_val(id, 0);
      int64_t HW = x.dim(2) * x.dim(3);
      TensorT<T> dx(x.shape);
      for (int64_t i = 0; i < g.numel(); ++i) dx[i * HW + n.iaux[i]] = g[i];
      accum_move(n.in[0], std::move(dx));
      break;
    }
    case Op::Softmax: {
      const auto& p = n.val;
      int64_t D = p.dim(p.rank() - 1), R = p.numel() / D;
      TensorT<T> dx(p.shape);
      for (int64_t r = 0; r < R; ++r) {
        double dot = 0;
        for (int64_t i = 0; i < D; ++i) dot += g[r * D + i] * p[r * D + i];
        for (int64_t i = 0; i < D; ++i)
          dx[r * D + i] = static_cast<T>(p[r * D + i] * (g[r * D + i] - dot));
      }
      accum_move(n.in[0], std::move(dx));
      break;
    }
    case Op::CrossEntropy: {
      const auto& p = in_val(id, 0);
      const auto& y = in_val(id, 1);
      int64_t D = p.dim(p.rank() - 1), R = p.numel() / D;
      TensorT<T> dp(p.shape);
      const double s = g[0] / R;
      for (int64_t i = 0; i < p.numel(); ++i)
        if (y[i] != T(0))
          dp[i] = static_cast<T>(-s * y[i] / std::max(static_cast<double>(p[i]), 1e-30));
      accum_move(n.in[0], std::move(dp));
      break;
    }
    case Op::SoftmaxCrossEntropy: {
      const auto& x = in_val(id, 0);
      const auto& y = in_val(id, 1);
      int64_t D = x.dim(x.rank() - 1), R = x.numel() / D;
      TensorT<T> dx(x.shape);
      const double s = g[0] / R;
      for (int64_t r = 0; r < R; ++r) {
        double ysum = 0;
        for (int64_t i = 0; i < D; ++i) ysum += y[r * D + i];
        for (int64_t i = 0; i < D; ++i)
          dx[r * D + i] =
              static_cast<T>(s * (ysum * n.faux[r * D + i] - y[r * D + i]));
      }
      accum_move(n.in[0], std::move(dx));
      break;
    }
    case Op::Add:
      accum(n.in[0], g);
      accum(n.in[1], g);
      break;
    case Op::Sub: {
      accum(n.in[0], g);
      TensorT<T> neg(g.shape);
      for (int64_t i = 0; i < g.numel(); ++i) neg[i] = -g[i];
      accum_move(n.in[1], std::move(neg));
      break;
    }
    case Op::Mul: {
      const auto& a = in_val(id, 0);
      const auto& b = in_val(id, 1);
      TensorT<T> da(a.shape), db(b.shape);
      for (int64_t i = 0; i < a.numel(); ++i) {
        da[i] = g[i] * b[i];
        db[i] = g[i] * a[i];
      }
      accum_move(n.in[0], std::move(da));
      accum_move(n.in[1], std::move(db));
      break;
    }
    case Op::Scale: {
      TensorT<T> dx(g.shape);
      for (int64_t i = 0; i < g.numel(); ++i) dx[i] = static_cast<T>(g[i] * n.f0);
      accum_move(n.in[0], std::move(dx));
      break;
    }
    case Op::ExpFilterStep: {
      TensorT<T> dprev(g.shape);
      for (int64_t i = 0; i < g.numel(); ++i)
        dprev[i] = static_cast<T>(g[i] * n.f0);
      accum_move(n.in[0], std::move(dprev));
      accum(n.in[1], g);
      break;
    }
    case Op::Spike: {
      const auto& v = in_val(id, 0);
      const auto& thr = in_val(id, 1);
      TensorT<T> dv(v.shape), dthr(thr.shape);
      for (int64_t i = 0; i < v.numel(); ++i) {
        double u = std::abs((v[i] - thr[i]) / n.f0);
        double h = n.f1 * std::max(0.0, 1.0 - u) / n.f0;
        dv[i] = static_cast<T>(g[i] * h);
        dthr[i] = static_cast<T>(-g[i] * h);
      }
      accum_move(n.in[0], std::move(dv));
      accum_move(n.in[1], std::move(dthr));
      break;
    }
    case Op::SurrogateFactor: {
      const auto& v = in_val(id, 0);
      const auto& thr = in_val(id, 1);
      TensorT<T> dv(v.shape), dthr(thr.shape);
      for (int64_t i = 0; i < v.numel(); ++i) {
        double u = (v[i] - thr[i]) / n.f0;
        double slope = 0;
        if (u > 0 && u < 1) slope = -n.f1 / n.f0;
        else if (u < 0 && u > -1) slope = n.f1 / n.f0;
        dv[i] = static_cast<T>(g[i] * slope);
        dthr[i] = static_cast<T>(-g[i] * slope);
      }
      accum_move(n.in[0], std::move(dv));
      accum_move(n.in[1], std::move(dthr));
      break;
    }
    case Op::SumAll: {
      const auto& x = in_val(id, 0);
      accum_move(n.in[0], TensorT<T>::full(x.shape, g[0]));
      break;
    }
    case Op::Reshape: {
      TensorT<T> dx(in_val(id, 0).shape);
      dx.data = g.data;
      accum_move(n.in[0], std::move(dx));
      break;
    }
    case Op::StackLast: {
      const int k = static_cast<int>(n.in.size());
      const auto& first = in_val(id, 0);
      for (int i = 0; i < k; ++i) {
        TensorT<T> di(first.shape);
        for (int64_t j = 0; j < first.numel(); ++j) di[j] = g[j * k + i];
        accum_move(n.in[i], std::move(di));
      }
      break;
    }
    case Op::ArmPosition: {
      const auto& ang = in_val(id, 0);
      int64_t B = ang.dim(0);
      TensorT<T> da(ang.shape);
      for (int64_t b = 0; b < B; ++b) {
        auto J = robot::position_jacobian(
            dh, {static_cast<double>(ang[b * 2]), static_cast<double>(ang[b * 2 + 1])});
        for (int j = 0; j < 2; ++j)
          da[b * 2 + j] = static_cast<T>(g[b * 3] * J[0][j] + g[b * 3 + 1] * J[1][j] +
                                         g[b * 3 + 2] * J[2][j]);
      }
      accum_move(n.in[0], std::move(da));
      break;
    }
    case Op::WeightUpdate: {
      const auto& p = in_val(id, 0);
      const auto& d = in_val(id, 1);
      if (p.same_shape(d)) {
        accum(n.in[0], g);
      } else {
        int64_t B = d.dim(0), M = p.numel();
        TensorT<T> dp(p.shape);
        for (int64_t b = 0; b < B; ++b)
          for (int64_t i = 0; i < M; ++i) dp[i] += g[b * M + i];
        accum_move(n.in[0], std::move(dp));
      }
      if (!n.flag) {
        TensorT<T> dd(d.shape);
        for (int64_t i = 0; i < d.numel(); ++i)
          dd[i] = static_cast<T>(-n.f0 * g[i]);
        accum_move(n.in[1], std::move(dd));
      }
      break;
    }
    case Op::QuantizeStochastic:  // straight-through estimator
      accum(n.in[0], g);
      break;
  }
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace l2l
