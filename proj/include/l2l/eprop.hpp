#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "l2l/adam.hpp"
#include "l2l/crossbar.hpp"
#include "l2l/deploy.hpp"
#include "l2l/robot.hpp"
#include "l2l/tape.hpp"

namespace l2l::eprop {

inline constexpr int kClockInputs = robot::kClockNeurons;             // 5
inline constexpr int kTrajChannels = robot::kClockNeurons + robot::kPositionNeurons;  // 53
inline constexpr int kLsgInputs = kClockInputs + kTrajChannels;       // 58
inline constexpr int kReadouts = 2;

struct EpropConfig {
  int trainee_n = 250;
  int lsg_n = 800;
  double alif_frac = 0.3;           // leading fraction of LSG neurons
  double inner_lr = 1e-4;           // alpha
  double outer_lr = 0.0015;
  double lr_decay = 0.99;
  int decay_interval = 500;
  int batch = 90;
  int outer_iters = 100000;
  int T = robot::kTrialSteps;       // 250
  double dt = robot::kDt;           // 1 ms
  double tau_m = 20.0;              // ms; gamma = exp(-dt/tau_m)
  double tau_a = 600.0;             // ms; rho
  double tau_out = 20.0;            // ms; readout kappa
  double vth_trainee = 0.6;
  double vth_lsg = 1.3;
  double beta_alif = 1.6;
  double lambda = 0.3;              // surrogate amplitude
  int refractory = 5;               // steps
  double alpha_e = -1.0;            // learning-signal decay; <0 means "= gamma"
  double f_target_trainee = 10.0;   // Hz
  double f_target_lsg = 20.0;       // Hz
  double epsilon = 0.25;            // rate-regularization weight
  double w_pos = 0.5;               // per-term loss weights
  double w_vel = 0.5;
  double w_pre = 0.5;               // phase-1 at-rest penalty (|out|^2)
  // loss-weight curriculum: "iter:w_pos:w_vel:w_pre;..." — from the given
  // iteration on, the listed weights replace w_pos/w_vel/w_pre. Empty = none.
  std::string loss_schedule;
  double grad_clip = 0.0;           // global-norm outer clip; 0 disables
  bool smooth_spikes = false;       // C1 surrogate + no refractory (verification)
  bool first_order = false;
  int val_interval = 100;
  int checkpoint_interval = 1000;
  robot::TrajectoryConfig traj;

  double gamma() const { return std::exp(-dt * 1000.0 / tau_m); }
  double rho() const { return std::exp(-dt * 1000.0 / tau_a); }
  double kappa() const { return std::exp(-dt * 1000.0 / tau_out); }
  double alpha_e_eff() const { return alpha_e < 0 ? gamma() : alpha_e; }
  int alif_count() const { return int(std::lround(alif_frac * lsg_n)); }
};

template <typename T>
struct EpropParamsT {
  TensorT<T> theta_in;   // 5 x N
  TensorT<T> theta_rec;  // N x N, zero diagonal
  TensorT<T> theta_out;  // N x 2
  TensorT<T> psi_in;     // 58 x M
  TensorT<T> psi_rec;    // M x M, zero diagonal
  TensorT<T> psi_out;    // M x N (learning signals)

  static EpropParamsT init(const EpropConfig& cfg, Rng& rng) {
    auto gauss = [&](std::vector<int64_t> shape, double fan_in) {
      TensorT<T> t(std::move(shape));
      const double std = 1.0 / std::sqrt(fan_in);
      for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, std));
      return t;
    };
    const int64_t N = cfg.trainee_n, M = cfg.lsg_n;
    EpropParamsT p;
    p.theta_in = gauss({kClockInputs, N}, kClockInputs);
    p.theta_rec = gauss({N, N}, N);
    for (int64_t j = 0; j < N; ++j) p.theta_rec[j * N + j] = T(0);
    p.theta_out = gauss({N, kReadouts}, N);
    p.psi_in = gauss({kLsgInputs, M}, kLsgInputs);
    p.psi_rec = gauss({M, M}, M);
    for (int64_t j = 0; j < M; ++j) p.psi_rec[j * M + j] = T(0);
    p.psi_out = gauss({M, N}, M);
    return p;
  }

  std::vector<TensorT<T>*> tensors() {
    return {&theta_in, &theta_rec, &theta_out, &psi_in, &psi_rec, &psi_out};
  }
  std::vector<std::string> names() const {
    return {"theta_in", "theta_rec", "theta_out", "psi_in", "psi_rec", "psi_out"};
  }
  template <typename U>
  EpropParamsT<U> cast() const {
    EpropParamsT<U> q;
    q.theta_in = theta_in.template cast<U>();
    q.theta_rec = theta_rec.template cast<U>();
    q.theta_out = theta_out.template cast<U>();
    q.psi_in = psi_in.template cast<U>();
    q.psi_rec = psi_rec.template cast<U>();
    q.psi_out = psi_out.template cast<U>();
    return q;
  }
};
using EpropParams = EpropParamsT<float>;

// One motor task: target trajectory plus its spike encodings.
struct Task {
  robot::Trajectory target;
  std::vector<std::vector<uint8_t>> clock;       // 5 x T
  std::vector<std::vector<uint8_t>> pos_spikes;  // 48 x T
};

Task make_task(Rng& rng, const robot::DhParams& dh, const robot::TrajectoryConfig& cfg);

// ---------- software neuron-step primitives (evaluation path) ----------

// v <- gamma v + syn - z_prev*vth; z = H(v - vth) outside refractory.
void lif_update(std::vector<float>& v, std::vector<float>& z,
                std::vector<int>& refractory, const std::vector<float>& syn,
                double gamma, double vth, int refractory_steps);

// ALIF: adaptive threshold A = vth + beta*a, a <- rho a + z_prev.
void alif_update(std::vector<float>& v, std::vector<float>& z,
                 std::vector<float>& a, std::vector<int>& refractory,
                 const std::vector<float>& syn, double gamma, double rho,
                 double vth, double beta, int refractory_steps,
                 int alif_count);

// ---------- batched differentiable two-phase trial graph ----------

struct EpropGraphParams {
  int theta_in = -1, theta_rec = -1, theta_out = -1;
  int psi_in = -1, psi_rec = -1, psi_out = -1;
};

template <typename T>
EpropGraphParams declare_params(Tape<T>& tape, const EpropParamsT<T>& p) {
  EpropGraphParams gp;
  gp.theta_in = tape.param(p.theta_in);
  gp.theta_rec = tape.param(p.theta_rec);
  gp.theta_out = tape.param(p.theta_out);
  gp.psi_in = tape.param(p.psi_in);
  gp.psi_rec = tape.param(p.psi_rec);
  gp.psi_out = tape.param(p.psi_out);
  return gp;
}

struct TrialNodes {
  int loss = -1;
  int phase1_out = -1;     // (B x 2 x T) pre-update velocity readout
  int phase2_out = -1;     // (B x 2 x T) post-update velocity readout
  int theta1_in = -1;      // (B x 5 x N)
  int theta1_rec = -1;     // (B x N x N)
  int trainee_rate = -1;   // (B x N) phase-1 firing rates, Hz
  int lsg_rate = -1;       // (B x M)
  // weighted loss components (they sum to `loss`), for diagnostics
  int loss_pos = -1;
  int loss_vel = -1;
  int loss_pre = -1;
  int loss_reg = -1;
};

namespace detail {

template <typename T>
TensorT<T> batch_rows(const std::vector<std::vector<float>>& rows) {
  const int64_t B = int64_t(rows.size()), C = int64_t(rows[0].size());
  TensorT<T> t({B, C});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) t[b * C + c] = static_cast<T>(rows[b][c]);
  return t;
}

}  // namespace detail

// Builds the full unrolled objective for a batch of tasks: phase 1 runs the
// trainee and the LSG, accumulates eligibility traces and filtered learning
// signals, forms the differentiable one-shot update, phase 2 re-runs the
// trainee under the per-trial updated weights, and the loss combines
// position MSE (via the kinematics node), velocity MSE and firing-rate
// regularization. Refractory masks are recorded as constants from the
// forward spike values.
template <typename T>
TrialNodes build_trial_graph(Tape<T>& tape, const EpropGraphParams& gp,
                             const std::vector<Task>& tasks,
                             const EpropConfig& cfg) {
  const int64_t B = int64_t(tasks.size());
  if (B == 0) throw std::invalid_argument("build_trial_graph: empty batch");
  const int64_t N = cfg.trainee_n, M = cfg.lsg_n, Tn = cfg.T;
  const double g = cfg.gamma(), rho = cfg.rho(), kap = cfg.kappa();
  const double ae = cfg.alpha_e_eff();
  const bool smooth = cfg.smooth_spikes;
  const int refr_steps = smooth ? 0 : cfg.refractory;

  // per-step input constants
  std::vector<int> clock_nodes(Tn), lsg_in_nodes(Tn);
  for (int64_t t = 0; t < Tn; ++t) {
    std::vector<std::vector<float>> ck(B, std::vector<float>(kClockInputs));
    std::vector<std::vector<float>> li(B, std::vector<float>(kLsgInputs));
    for (int64_t b = 0; b < B; ++b) {
      for (int i = 0; i < kClockInputs; ++i) {
        const float s = tasks[b].clock[i][t];
        ck[b][i] = s;
        li[b][i] = s;                       // shared clock wiring
        li[b][kClockInputs + i] = s;        // clock inside the 53 channels
      }
      for (int i = 0; i < robot::kPositionNeurons; ++i)
        li[b][2 * kClockInputs + i] = tasks[b].pos_spikes[i][t];
    }
    clock_nodes[t] = tape.constant(detail::batch_rows<T>(ck));
    lsg_in_nodes[t] = tape.constant(detail::batch_rows<T>(li));
  }

  // masks and constants
  TensorT<T> diag_n({N, N});
  for (int64_t i = 0; i < N; ++i)
    for (int64_t j = 0; j < N; ++j) diag_n[i * N + j] = T(i != j);
  const int mask_rec = tape.constant(diag_n);
  TensorT<T> diag_m({M, M});
  for (int64_t i = 0; i < M; ++i)
    for (int64_t j = 0; j < M; ++j) diag_m[i * M + j] = T(i != j);
  const int mask_psi_rec = tape.constant(diag_m);
  TensorT<T> diag_bnn({B, N, N});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < N; ++i)
      for (int64_t j = 0; j < N; ++j) diag_bnn[(b * N + i) * N + j] = T(i != j);
  const int mask_rec_b = tape.constant(diag_bnn);

  const int thr_trainee = tape.constant(TensorT<T>::full({B, N}, T(cfg.vth_trainee)));
  const int thr_lsg_base = tape.constant(TensorT<T>::full({B, M}, T(cfg.vth_lsg)));
  TensorT<T> beta_mask({B, M});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t j = 0; j < cfg.alif_count(); ++j)
      beta_mask[b * M + j] = T(cfg.beta_alif);
  const int beta_node = tape.constant(beta_mask);

  const int rec_masked = tape.mul(gp.theta_rec, mask_rec);
  const int psi_rec_masked = tape.mul(gp.psi_rec, mask_psi_rec);

  // the hard-spike algorithm detaches the reset; the smooth verification
  // mode keeps it differentiable so finite differences see the same function
  auto reset_term = [&](int z, double vth) {
    return tape.scale(smooth ? z : tape.stop_grad(z), -vth);
  };

  // refractory bookkeeping outside the tape
  std::vector<int> refr_tr(size_t(B * N), 0), refr_lsg(size_t(B * M), 0);
  auto refr_mask_const = [&](const std::vector<int>& refr, int64_t cols) {
    TensorT<T> m({B, cols});
    for (int64_t i = 0; i < B * cols; ++i) m[i] = T(refr[size_t(i)] == 0);
    return tape.constant(m);
  };
  auto refr_advance = [&](std::vector<int>& refr, int z_node, int64_t cols) {
    const auto& z = tape.value(z_node);
    for (int64_t i = 0; i < B * cols; ++i) {
      if (refr[size_t(i)] > 0) --refr[size_t(i)];
      if (z[i] > T(0.5)) refr[size_t(i)] = refr_steps;
    }
  };

  // phase-1 state
  int v_tr = tape.constant(TensorT<T>({B, N}));
  int z_tr = tape.constant(TensorT<T>({B, N}));
  int v_lsg = tape.constant(TensorT<T>({B, M}));
  int z_lsg = tape.constant(TensorT<T>({B, M}));
  int a_lsg = tape.constant(TensorT<T>({B, M}));
  int trace_in = tape.constant(TensorT<T>({B, kClockInputs}));
  int trace_rec = tape.constant(TensorT<T>({B, N}));
  int lsig = tape.constant(TensorT<T>({B, N}));
  int out1 = tape.constant(TensorT<T>({B, kReadouts}));
  int zsum_tr = tape.constant(TensorT<T>({B, N}));
  int zsum_lsg = tape.constant(TensorT<T>({B, M}));

  std::vector<int> trace_in_steps, trace_rec_steps, m_steps, out1_steps;
  trace_in_steps.reserve(size_t(Tn));
  int l_pre = tape.constant(TensorT<T>::scalar(T(0)));

  for (int64_t t = 0; t < Tn; ++t) {
    // trainee: v^{t+1} = g v + x^t theta_in + z^t theta_rec - z^t vth
    const int z_presyn = z_tr;
    int syn_tr = tape.add(tape.matmul(clock_nodes[t], gp.theta_in),
                          tape.matmul(z_tr, rec_masked));
    int reset_tr = reset_term(z_tr, cfg.vth_trainee);
    v_tr = tape.add(tape.add(tape.scale(v_tr, g), syn_tr), reset_tr);
    int z_raw = tape.spike(v_tr, thr_trainee, cfg.vth_trainee, cfg.lambda, smooth);
    int mask_t = refr_mask_const(refr_tr, N);
    z_tr = refr_steps > 0 ? tape.mul(z_raw, mask_t) : z_raw;
    if (refr_steps > 0) refr_advance(refr_tr, z_tr, N);

    // LSG with leading ALIF population
    int syn_lsg = tape.add(tape.matmul(lsg_in_nodes[t], gp.psi_in),
                           tape.matmul(z_lsg, psi_rec_masked));
    int reset_lsg = reset_term(z_lsg, cfg.vth_lsg);
    int a_next = tape.exp_filter_step(a_lsg, z_lsg, rho);  // a^{t+1} = rho a + z^t
    v_lsg = tape.add(tape.add(tape.scale(v_lsg, g), syn_lsg), reset_lsg);
    int thr_t = tape.add(thr_lsg_base, tape.mul(beta_node, a_next));
    int zl_raw = tape.spike(v_lsg, thr_t, cfg.vth_lsg, cfg.lambda, smooth);
    int mask_l = refr_mask_const(refr_lsg, M);
    z_lsg = refr_steps > 0 ? tape.mul(zl_raw, mask_l) : zl_raw;
    if (refr_steps > 0) refr_advance(refr_lsg, z_lsg, M);
    a_lsg = a_next;

    // eligibility traces filter the presynaptic activity that drove this
    // step's membranes (inputs and spikes delayed by one step)
    trace_in = tape.exp_filter_step(trace_in, clock_nodes[t], g);
    trace_rec = tape.exp_filter_step(trace_rec, z_presyn, g);
    int h = tape.surrogate_factor(v_tr, thr_trainee, cfg.vth_trainee, cfg.lambda);
    int h_eff = refr_steps > 0 ? tape.mul(h, mask_t) : h;
    lsig = tape.exp_filter_step(lsig, tape.matmul(z_lsg, gp.psi_out), ae);
    m_steps.push_back(tape.mul(h_eff, lsig));
    trace_in_steps.push_back(trace_in);
    trace_rec_steps.push_back(trace_rec);

    // pre-update readout and rate counters; before the update the arm is
    // expected to stay at rest, so any phase-1 output is penalized
    out1 = tape.exp_filter_step(out1, tape.matmul(z_tr, gp.theta_out), kap);
    out1_steps.push_back(out1);
    l_pre = tape.add(l_pre, tape.sum_all(tape.mul(out1, out1)));
    zsum_tr = tape.add(zsum_tr, z_tr);
    zsum_lsg = tape.add(zsum_lsg, z_lsg);
  }

  // one-shot update: theta^1 = theta - alpha * sum_t L^t (x) e^t
  int delta_in = tape.bmm(tape.stack_last(trace_in_steps),
                          tape.stack_last(m_steps), false, true);
  int delta_rec = tape.mul(tape.bmm(tape.stack_last(trace_rec_steps),
                                    tape.stack_last(m_steps), false, true),
                           mask_rec_b);
  TrialNodes out;
  out.theta1_in = tape.weight_update(gp.theta_in, delta_in, cfg.inner_lr,
                                     cfg.first_order);
  out.theta1_rec = tape.weight_update(rec_masked, delta_rec, cfg.inner_lr,
                                      cfg.first_order);

  // phase 2: trainee alone under per-trial weights
  std::fill(refr_tr.begin(), refr_tr.end(), 0);
  int v2 = tape.constant(TensorT<T>({B, N}));
  int z2 = tape.constant(TensorT<T>({B, N}));
  int out2 = tape.constant(TensorT<T>({B, kReadouts}));
  int angles = tape.constant(TensorT<T>({B, 2}));
  int zsum2 = tape.constant(TensorT<T>({B, N}));
  std::vector<int> out2_steps;
  int l_pos = tape.constant(TensorT<T>::scalar(T(0)));
  int l_vel = tape.constant(TensorT<T>::scalar(T(0)));

  for (int64_t t = 0; t < Tn; ++t) {
    int x3 = tape.reshape(clock_nodes[t], {B, 1, kClockInputs});
    int z3 = tape.reshape(z2, {B, 1, N});
    int syn = tape.add(tape.reshape(tape.bmm(x3, out.theta1_in), {B, N}),
                       tape.reshape(tape.bmm(z3, out.theta1_rec), {B, N}));
    int reset = reset_term(z2, cfg.vth_trainee);
    v2 = tape.add(tape.add(tape.scale(v2, g), syn), reset);
    int z_raw = tape.spike(v2, thr_trainee, cfg.vth_trainee, cfg.lambda, smooth);
    int mask_t = refr_mask_const(refr_tr, N);
    z2 = refr_steps > 0 ? tape.mul(z_raw, mask_t) : z_raw;
    if (refr_steps > 0) refr_advance(refr_tr, z2, N);

    out2 = tape.exp_filter_step(out2, tape.matmul(z2, gp.theta_out), kap);
    out2_steps.push_back(out2);
    zsum2 = tape.add(zsum2, z2);

    // integrate commanded velocities to angles and positions
    angles = tape.exp_filter_step(angles, tape.scale(out2, cfg.dt), 1.0);
    int pos = tape.arm_position(angles);

    std::vector<std::vector<float>> tgt_p(size_t(B), std::vector<float>(3));
    std::vector<std::vector<float>> tgt_v(size_t(B), std::vector<float>(2));
    for (int64_t b = 0; b < B; ++b) {
      const auto& p = tasks[b].target.positions[size_t(t)];
      tgt_p[b] = {float(p.x), float(p.y), float(p.z)};
      tgt_v[b] = {float(tasks[b].target.velocities[size_t(t)][0]),
                  float(tasks[b].target.velocities[size_t(t)][1])};
    }
    int dp = tape.sub(pos, tape.constant(detail::batch_rows<T>(tgt_p)));
    int dv = tape.sub(out2, tape.constant(detail::batch_rows<T>(tgt_v)));
    l_pos = tape.add(l_pos, tape.sum_all(tape.mul(dp, dp)));
    l_vel = tape.add(l_vel, tape.sum_all(tape.mul(dv, dv)));
  }

  // firing-rate regularization in Hz (phase-1 rates; trainee also phase 2)
  const double to_hz = 1.0 / (double(Tn) * cfg.dt);
  auto rate_term = [&](int rate, double f_target) {
    int d = tape.sub(rate, tape.constant(TensorT<T>::full(
                               tape.value(rate).shape, T(f_target))));
    return tape.sum_all(tape.mul(d, d));
  };
  out.trainee_rate = tape.scale(zsum_tr, to_hz);
  out.lsg_rate = tape.scale(zsum_lsg, to_hz);
  int reg = tape.add(rate_term(out.trainee_rate, cfg.f_target_trainee),
                     tape.add(rate_term(out.lsg_rate, cfg.f_target_lsg),
                              rate_term(tape.scale(zsum2, to_hz),
                                        cfg.f_target_trainee)));

  out.loss_pos = tape.scale(l_pos, cfg.w_pos / double(B));
  out.loss_vel = tape.scale(l_vel, cfg.w_vel / double(B));
  out.loss_pre = tape.scale(l_pre, cfg.w_pre / double(B));
  out.loss_reg = tape.scale(reg, cfg.epsilon / double(B));
  out.loss = tape.add(tape.add(tape.add(out.loss_pos, out.loss_vel), out.loss_pre),
                      out.loss_reg);
  out.phase1_out = tape.stack_last(out1_steps);
  out.phase2_out = tape.stack_last(out2_steps);
  return out;
}

// ---------- evaluation (non-tape) ----------

// Synaptic-input provider for the trainee: concatenated (clock, spikes)
// vector of length 5+N in, N out.
using TraineeMvm = std::function<std::vector<float>(const std::vector<float>&)>;

// Trainee input+recurrent weights on crossbar cores as one (5+N) x N layer;
// the one-shot update reprograms exactly that region.
class CrossbarTrainee {
 public:
  CrossbarTrainee(const EpropParams& p, const EpropConfig& cfg,
                  xbar::AnalogConfig analog, Rng& rng);
  std::vector<float> mvm(const std::vector<float>& xz) const;
  // adaptation event: counted reprogram of the stacked weight region
  void set_weights(const Tensor& theta_in, const Tensor& theta_rec);
  // uncounted (re)initialization to a base weight set
  void program_base(const Tensor& theta_in, const Tensor& theta_rec);
  int64_t reprogram_events() const { return reprogram_events_; }

 private:
  EpropConfig cfg_;
  deploy::PlacementPlan plan_;
  std::vector<xbar::CrossbarCore> cores_;
  Rng rng_;
  int64_t reprogram_events_ = 0;
};

struct TrialResult {
  std::vector<std::array<double, 2>> pre_vel, post_vel;  // T x 2, rad/s
  std::vector<robot::Vec3> pre_pos, post_pos;            // integrated, cm
  Tensor theta1_in, theta1_rec;
  std::vector<std::vector<uint8_t>> trainee_spikes_p1;   // N x T
  std::vector<std::vector<uint8_t>> trainee_spikes_p2;
  std::vector<std::vector<uint8_t>> lsg_spikes;
  double trainee_rate_hz = 0, lsg_rate_hz = 0;
};

// Two-phase evaluation trial; `hw` = nullptr runs fully in software.
TrialResult run_trial(const EpropParams& p, const Task& task,
                      const EpropConfig& cfg, CrossbarTrainee* hw = nullptr);

struct TrainCurves {
  std::vector<double> train_loss;
  std::vector<double> trainee_rate_hz, lsg_rate_hz;
};

EpropParams meta_train(const EpropConfig& cfg, uint64_t seed,
                       const std::string& out_dir = "",
                       TrainCurves* curves = nullptr);

struct EvalRow {
  std::array<double, 2> pre_vel_rmse, post_vel_rmse;
  double pre_euclid_rmse = 0, post_euclid_rmse = 0;
  double pre_mean_abs_vel = 0;
  int64_t reprogram_events = 0;  // crossbar backend: 1 per trial
};

struct EvalResult {
  std::vector<EvalRow> rows;
  std::array<double, 2> mean_pre_vel_rmse{}, mean_post_vel_rmse{};
  double mean_pre_euclid = 0, mean_post_euclid = 0;
  double mean_pre_abs_vel = 0;
};

EvalResult evaluate(const EpropParams& p, const EpropConfig& cfg,
                    int trajectories, const std::string& backend, uint64_t seed,
                    xbar::AnalogConfig analog = {});

}  // namespace l2l::eprop
