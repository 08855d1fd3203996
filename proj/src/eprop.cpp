#include "l2l/eprop.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "l2l/checkpoint.hpp"
#include "l2l/metrics.hpp"

namespace l2l::eprop {

Task make_task(Rng& rng, const robot::DhParams& dh,
               const robot::TrajectoryConfig& cfg) {
  Task t;
  t.target = robot::gen_target_trajectory(rng, dh, cfg);
  t.clock = robot::clock_signal();
  t.pos_spikes =
      robot::encode_position_spikes(t.target.positions, robot::workspace_box(dh));
  return t;
}

void lif_update(std::vector<float>& v, std::vector<float>& z,
                std::vector<int>& refractory, const std::vector<float>& syn,
                double gamma, double vth, int refractory_steps) {
  const size_t n = v.size();
  if (z.size() != n || refractory.size() != n || syn.size() != n)
    throw std::invalid_argument("lif_update: state size mismatch");
  for (size_t j = 0; j < n; ++j) {
    v[j] = static_cast<float>(gamma * v[j] + syn[j] - vth * z[j]);
    const bool allowed = refractory[j] == 0;
    const bool fired = allowed && v[j] >= vth;
    if (refractory[j] > 0) --refractory[j];
    if (fired) refractory[j] = refractory_steps;
    z[j] = fired ? 1.0f : 0.0f;
  }
}

void alif_update(std::vector<float>& v, std::vector<float>& z,
                 std::vector<float>& a, std::vector<int>& refractory,
                 const std::vector<float>& syn, double gamma, double rho,
                 double vth, double beta, int refractory_steps,
                 int alif_count) {
  const size_t n = v.size();
  if (z.size() != n || a.size() != n || refractory.size() != n ||
      syn.size() != n)
    throw std::invalid_argument("alif_update: state size mismatch");
  for (size_t j = 0; j < n; ++j) {
    v[j] = static_cast<float>(gamma * v[j] + syn[j] - vth * z[j]);
    a[j] = static_cast<float>(rho * a[j] + z[j]);
    const double thr = vth + (j < size_t(alif_count) ? beta * a[j] : 0.0);
    const bool allowed = refractory[j] == 0;
    const bool fired = allowed && v[j] >= thr;
    if (refractory[j] > 0) --refractory[j];
    if (fired) refractory[j] = refractory_steps;
    z[j] = fired ? 1.0f : 0.0f;
  }
}

namespace {

// row-ordered double accumulation; matches the analog read path bit-for-bit
// when the layer scale is exactly 1
std::vector<float> software_mvm(const std::vector<float>& x,
                                const std::vector<const float*>& rows,
                                int cols) {
  std::vector<double> acc(cols, 0.0);
  for (size_t r = 0; r < x.size(); ++r) {
    const double xv = x[r];
    if (xv == 0) continue;
    const float* w = rows[r];
    for (int c = 0; c < cols; ++c) acc[c] += xv * w[c];
  }
  std::vector<float> out(cols);
  for (int c = 0; c < cols; ++c) out[c] = static_cast<float>(acc[c]);
  return out;
}

std::vector<const float*> weight_rows(const Tensor& theta_in,
                                      const Tensor& theta_rec) {
  const int64_t N = theta_in.dim(1);
  std::vector<const float*> rows;
  rows.reserve(size_t(kClockInputs + theta_rec.dim(0)));
  for (int64_t r = 0; r < kClockInputs; ++r)
    rows.push_back(theta_in.data.data() + r * N);
  for (int64_t r = 0; r < theta_rec.dim(0); ++r)
    rows.push_back(theta_rec.data.data() + r * N);
  return rows;
}

}  // namespace

CrossbarTrainee::CrossbarTrainee(const EpropParams& p, const EpropConfig& cfg,
                                 xbar::AnalogConfig analog, Rng& rng)
    : cfg_(cfg), rng_(rng.next()) {
  const int N = cfg.trainee_n;
  plan_ = deploy::plan_placement(
      {{"trainee", kClockInputs + N, N, /*bias_row=*/false}}, 4);
  cores_.assign(4, xbar::CrossbarCore(analog));
  program_base(p.theta_in, p.theta_rec);
}

void CrossbarTrainee::set_weights(const Tensor& theta_in,
                                  const Tensor& theta_rec) {
  program_base(theta_in, theta_rec);
  ++reprogram_events_;
}

void CrossbarTrainee::program_base(const Tensor& theta_in,
                                   const Tensor& theta_rec) {
  const int N = cfg_.trainee_n;
  if (theta_in.rank() != 2 || theta_in.dim(0) != kClockInputs ||
      theta_in.dim(1) != N || theta_rec.rank() != 2 || theta_rec.dim(0) != N ||
      theta_rec.dim(1) != N)
    throw std::invalid_argument("crossbar trainee: weight shape mismatch");
  std::vector<float> stacked;
  stacked.reserve(size_t(kClockInputs + N) * N);
  stacked.insert(stacked.end(), theta_in.data.begin(), theta_in.data.end());
  stacked.insert(stacked.end(), theta_rec.data.begin(), theta_rec.data.end());
  deploy::reprogram_region(plan_, cores_, 0, stacked, nullptr, rng_);
}

std::vector<float> CrossbarTrainee::mvm(const std::vector<float>& xz) const {
  return deploy::dispatch_mvm(plan_, cores_, 0, xz);
}

TrialResult run_trial(const EpropParams& p, const Task& task,
                      const EpropConfig& cfg, CrossbarTrainee* hw) {
  const int N = cfg.trainee_n, M = cfg.lsg_n, T = cfg.T;
  const double g = cfg.gamma(), rho = cfg.rho(), kap = cfg.kappa();
  const double ae = cfg.alpha_e_eff();
  const int refr_steps = cfg.refractory;
  if (int(task.clock.size()) != kClockInputs ||
      int(task.pos_spikes.size()) != robot::kPositionNeurons ||
      int(task.target.velocities.size()) < T)
    throw std::invalid_argument("run_trial: malformed task");

  TrialResult res;
  res.trainee_spikes_p1.assign(size_t(N), std::vector<uint8_t>(size_t(T), 0));
  res.trainee_spikes_p2.assign(size_t(N), std::vector<uint8_t>(size_t(T), 0));
  res.lsg_spikes.assign(size_t(M), std::vector<uint8_t>(size_t(T), 0));

  // ----- LSG (always software) -----
  std::vector<float> vl(size_t(M), 0), zl(size_t(M), 0), al(size_t(M), 0);
  std::vector<int> rl(size_t(M), 0);
  std::vector<float> lsg_in(static_cast<size_t>(kLsgInputs));
  std::vector<const float*> psi_rows;
  for (int r = 0; r < kLsgInputs; ++r)
    psi_rows.push_back(p.psi_in.data.data() + int64_t(r) * M);
  std::vector<const float*> psi_rec_rows;
  for (int r = 0; r < M; ++r)
    psi_rec_rows.push_back(p.psi_rec.data.data() + int64_t(r) * M);

  std::vector<std::vector<float>> xi(static_cast<size_t>(T));  // LSG spikes per step
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < kClockInputs; ++i) {
      const float s = task.clock[size_t(i)][size_t(t)];
      lsg_in[size_t(i)] = s;
      lsg_in[size_t(kClockInputs + i)] = s;
    }
    for (int i = 0; i < robot::kPositionNeurons; ++i)
      lsg_in[size_t(2 * kClockInputs + i)] = task.pos_spikes[size_t(i)][size_t(t)];
    auto syn = software_mvm(lsg_in, psi_rows, M);
    auto rec = software_mvm(zl, psi_rec_rows, M);
    for (int j = 0; j < M; ++j) syn[size_t(j)] += rec[size_t(j)];
    alif_update(vl, zl, al, rl, syn, g, rho, cfg.vth_lsg, cfg.beta_alif,
                refr_steps, cfg.alif_count());
    xi[size_t(t)] = zl;
    for (int j = 0; j < M; ++j)
      if (zl[size_t(j)] > 0.5f) {
        res.lsg_spikes[size_t(j)][size_t(t)] = 1;
        res.lsg_rate_hz += 1.0;
      }
  }
  res.lsg_rate_hz /= double(M) * T * cfg.dt;

  // ----- trainee phases -----
  auto run_phase = [&](const Tensor& th_in, const Tensor& th_rec, bool analog,
                       std::vector<std::vector<uint8_t>>* raster,
                       std::vector<std::array<double, 2>>* vel,
                       std::vector<float>* h_out,      // T x N, nullable
                       std::vector<float>* tr_in_out,  // T x 5
                       std::vector<float>* tr_rec_out  // T x N
                       ) {
    std::vector<float> v(size_t(N), 0), z(size_t(N), 0);
    std::vector<int> refr(size_t(N), 0);
    std::vector<float> out(kReadouts, 0);
    std::vector<float> xz(size_t(kClockInputs + N), 0);
    std::vector<double> trace_in(kClockInputs, 0), trace_rec(size_t(N), 0);
    auto rows = weight_rows(th_in, th_rec);
    for (int t = 0; t < T; ++t) {
      for (int i = 0; i < kClockInputs; ++i)
        xz[size_t(i)] = task.clock[size_t(i)][size_t(t)];
      std::copy(z.begin(), z.end(), xz.begin() + kClockInputs);
      std::vector<float> syn =
          analog ? hw->mvm(xz) : software_mvm(xz, rows, N);
      // presynaptic traces filter what just drove the membranes
      for (int i = 0; i < kClockInputs; ++i)
        trace_in[size_t(i)] = g * trace_in[size_t(i)] + xz[size_t(i)];
      for (int j = 0; j < N; ++j)
        trace_rec[size_t(j)] = g * trace_rec[size_t(j)] + z[size_t(j)];
      // surrogate uses the refractory mask sampled before the update
      std::vector<uint8_t> allowed(static_cast<size_t>(N));
      for (int j = 0; j < N; ++j) allowed[size_t(j)] = refr[size_t(j)] == 0;
      lif_update(v, z, refr, syn, g, cfg.vth_trainee, refr_steps);
      if (h_out)
        for (int j = 0; j < N; ++j) {
          const double u =
              std::abs((v[size_t(j)] - cfg.vth_trainee) / cfg.vth_trainee);
          h_out[0][size_t(t) * N + j] =
              allowed[size_t(j)]
                  ? float(cfg.lambda * std::max(0.0, 1.0 - u))
                  : 0.0f;
        }
      if (tr_in_out)
        for (int i = 0; i < kClockInputs; ++i)
          tr_in_out[0][size_t(t) * kClockInputs + i] = float(trace_in[size_t(i)]);
      if (tr_rec_out)
        for (int j = 0; j < N; ++j)
          tr_rec_out[0][size_t(t) * N + j] = float(trace_rec[size_t(j)]);
      for (int j = 0; j < N; ++j)
        if (z[size_t(j)] > 0.5f) (*raster)[size_t(j)][size_t(t)] = 1;
      // leaky readout
      double o0 = kap * out[0], o1 = kap * out[1];
      for (int j = 0; j < N; ++j) {
        o0 += z[size_t(j)] * p.theta_out[int64_t(j) * kReadouts];
        o1 += z[size_t(j)] * p.theta_out[int64_t(j) * kReadouts + 1];
      }
      out[0] = float(o0);
      out[1] = float(o1);
      vel->push_back({out[0], out[1]});
    }
  };

  // phase 1 under theta, with eligibility bookkeeping
  std::vector<float> h(size_t(T) * N), tri(size_t(T) * kClockInputs),
      trr(size_t(T) * N);
  res.pre_vel.reserve(size_t(T));
  run_phase(p.theta_in, p.theta_rec, hw != nullptr, &res.trainee_spikes_p1,
            &res.pre_vel, &h, &tri, &trr);
  for (int j = 0; j < N; ++j)
    for (int t = 0; t < T; ++t)
      res.trainee_rate_hz += res.trainee_spikes_p1[size_t(j)][size_t(t)];
  res.trainee_rate_hz /= double(N) * T * cfg.dt;

  // learning signals L^t = ae L^{t-1} + psi_out^T xi^t and the one-shot update
  std::vector<double> L(size_t(N), 0.0);
  std::vector<double> d_in(size_t(kClockInputs) * N, 0.0);
  std::vector<double> d_rec(size_t(N) * N, 0.0);
  for (int t = 0; t < T; ++t) {
    for (int j = 0; j < N; ++j) L[size_t(j)] *= ae;
    for (int i = 0; i < M; ++i) {
      if (xi[size_t(t)][size_t(i)] == 0.0f) continue;
      const float* w = p.psi_out.data.data() + int64_t(i) * N;
      for (int j = 0; j < N; ++j) L[size_t(j)] += w[j];
    }
    for (int j = 0; j < N; ++j) {
      const double m = L[size_t(j)] * h[size_t(t) * N + j];
      if (m == 0) continue;
      for (int i = 0; i < kClockInputs; ++i)
        d_in[size_t(i) * N + j] += tri[size_t(t) * kClockInputs + i] * m;
      for (int i = 0; i < N; ++i)
        if (i != j) d_rec[size_t(i) * N + j] += trr[size_t(t) * N + i] * m;
    }
  }
  res.theta1_in = p.theta_in;
  res.theta1_rec = p.theta_rec;
  for (int64_t e = 0; e < res.theta1_in.numel(); ++e)
    res.theta1_in[e] = float(res.theta1_in[e] - cfg.inner_lr * d_in[size_t(e)]);
  for (int64_t e = 0; e < res.theta1_rec.numel(); ++e)
    res.theta1_rec[e] =
        float(res.theta1_rec[e] - cfg.inner_lr * d_rec[size_t(e)]);

  // phase 2 under theta^1
  if (hw) hw->set_weights(res.theta1_in, res.theta1_rec);
  res.post_vel.reserve(size_t(T));
  run_phase(res.theta1_in, res.theta1_rec, hw != nullptr,
            &res.trainee_spikes_p2, &res.post_vel, nullptr, nullptr, nullptr);

  // integrate commanded velocities (no safety clamp on produced motion)
  auto integrate = [&](const std::vector<std::array<double, 2>>& vel,
                       std::vector<robot::Vec3>* pos) {
    const auto dh = robot::DhParams::ed_scorbot();
    double a0 = 0, a1 = 0;
    for (const auto& ph : vel) {
      a0 += ph[0] * cfg.dt;
      a1 += ph[1] * cfg.dt;
      pos->push_back(robot::forward_kinematics(dh, {a0, a1}));
    }
  };
  integrate(res.pre_vel, &res.pre_pos);
  integrate(res.post_vel, &res.post_pos);
  return res;
}

namespace {

struct LossStage {
  int iter = 0;
  double w_pos = 0, w_vel = 0, w_pre = 0;
};

std::vector<LossStage> parse_loss_schedule(const std::string& s) {
  std::vector<LossStage> stages;
  std::istringstream is(s);
  std::string entry;
  while (std::getline(is, entry, ';')) {
    if (entry.empty()) continue;
    LossStage st;
    char c1 = 0, c2 = 0, c3 = 0;
    std::istringstream es(entry);
    if (!(es >> st.iter >> c1 >> st.w_pos >> c2 >> st.w_vel >> c3 >> st.w_pre) ||
        c1 != ':' || c2 != ':' || c3 != ':' || !(es >> std::ws).eof())
      throw std::invalid_argument("loss_schedule: malformed entry '" + entry +
                                  "' (want iter:w_pos:w_vel:w_pre)");
    if (!stages.empty() && st.iter <= stages.back().iter)
      throw std::invalid_argument(
          "loss_schedule: entries must have increasing iterations");
    stages.push_back(st);
  }
  return stages;
}

}  // namespace

EpropParams meta_train(const EpropConfig& cfg, uint64_t seed,
                       const std::string& out_dir, TrainCurves* curves) {
  Rng init_rng = Rng::split(seed, 30);
  EpropParams params = EpropParams::init(cfg, init_rng);
  EpropConfig run_cfg = cfg;
  const std::vector<LossStage> stages = parse_loss_schedule(cfg.loss_schedule);
  size_t next_stage = 0;
  AdamConfig acfg;
  acfg.lr = cfg.outer_lr;
  acfg.lr_decay = cfg.lr_decay;
  acfg.decay_interval = cfg.decay_interval;
  Adam opt(acfg, params.tensors(), params.names());
  const auto dh = robot::DhParams::ed_scorbot();

  metrics::CsvSink csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    csv = metrics::CsvSink(
        out_dir + "/eprop_loss.csv",
        {"iteration", "loss", "trainee_rate_hz", "lsg_rate_hz"});
  }
  auto checkpoint = [&](int it) {
    if (out_dir.empty()) return;
    std::vector<std::pair<std::string, const Tensor*>> entries;
    auto names = params.names();
    auto tensors = params.tensors();
    for (size_t i = 0; i < names.size(); ++i)
      entries.emplace_back(names[i], tensors[i]);
    ckpt::save(out_dir + "/eprop_iter_" + std::to_string(it) + ".ckpt", "EPRP",
               entries);
  };

  for (int it = 0; it < cfg.outer_iters; ++it) {
    while (next_stage < stages.size() && it >= stages[next_stage].iter) {
      run_cfg.w_pos = stages[next_stage].w_pos;
      run_cfg.w_vel = stages[next_stage].w_vel;
      run_cfg.w_pre = stages[next_stage].w_pre;
      ++next_stage;
    }
    Rng task_rng = Rng::split(seed, 31, uint64_t(it));
    std::vector<Task> batch;
    batch.reserve(size_t(cfg.batch));
    for (int b = 0; b < cfg.batch; ++b)
      batch.push_back(make_task(task_rng, dh, cfg.traj));

    Tape<float> tape;
    auto gp = declare_params(tape, params);
    auto nodes = build_trial_graph(tape, gp, batch, run_cfg);
    const double loss = tape.value(nodes.loss)[0];
    auto grads = tape.backward(nodes.loss);
    if (cfg.grad_clip > 0) {
      double sq = 0;
      for (const auto& g : grads)
        for (float v : g.data) sq += double(v) * v;
      const double norm = std::sqrt(sq);
      if (norm > cfg.grad_clip) {
        const float s = float(cfg.grad_clip / norm);
        for (auto& g : grads)
          for (float& v : g.data) v *= s;
      }
    }
    opt.step(grads);

    auto mean_of = [&](int node) {
      const auto& v = tape.value(node);
      double s = 0;
      for (float x : v.data) s += x;
      return s / double(v.numel());
    };
    const double tr_rate = mean_of(nodes.trainee_rate);
    const double lsg_rate = mean_of(nodes.lsg_rate);
    if (curves) {
      curves->train_loss.push_back(loss);
      curves->trainee_rate_hz.push_back(tr_rate);
      curves->lsg_rate_hz.push_back(lsg_rate);
    }
    if (csv.open()) csv.row({double(it), loss, tr_rate, lsg_rate});
    if (cfg.checkpoint_interval > 0 && (it + 1) % cfg.checkpoint_interval == 0)
      checkpoint(it + 1);
  }
  if (csv.open()) csv.flush();
  checkpoint(cfg.outer_iters);
  return params;
}

EvalResult evaluate(const EpropParams& p, const EpropConfig& cfg,
                    int trajectories, const std::string& backend, uint64_t seed,
                    xbar::AnalogConfig analog) {
  if (backend != "software" && backend != "crossbar")
    throw std::invalid_argument("eprop evaluate: unknown backend '" + backend +
                                "'");
  std::unique_ptr<CrossbarTrainee> hw;
  if (backend == "crossbar") {
    Rng hw_rng = Rng::split(seed, 40);
    hw = std::make_unique<CrossbarTrainee>(p, cfg, analog, hw_rng);
  }
  Rng task_rng = Rng::split(seed, 41);
  const auto dh = robot::DhParams::ed_scorbot();

  EvalResult result;
  for (int i = 0; i < trajectories; ++i) {
    Task task = make_task(task_rng, dh, cfg.traj);
    // each trial adapts from the meta-trained weights
    if (hw) hw->program_base(p.theta_in, p.theta_rec);
    const int64_t events_before = hw ? hw->reprogram_events() : 0;
    TrialResult tr = run_trial(p, task, cfg, hw.get());

    auto as_traj = [&](const std::vector<std::array<double, 2>>& vel,
                       const std::vector<robot::Vec3>& pos) {
      robot::Trajectory t;
      t.velocities = vel;
      t.positions = pos;
      t.angles.assign(vel.size(), {0, 0});
      double a0 = 0, a1 = 0;
      for (size_t s = 0; s < vel.size(); ++s) {
        a0 += vel[s][0] * cfg.dt;
        a1 += vel[s][1] * cfg.dt;
        t.angles[s] = {a0, a1};
      }
      return t;
    };
    robot::Trajectory target = task.target;  // compare over the trial window
    target.velocities.resize(size_t(cfg.T));
    target.angles.resize(size_t(cfg.T));
    target.positions.resize(size_t(cfg.T));
    const auto pre =
        robot::trajectory_rmse(as_traj(tr.pre_vel, tr.pre_pos), target);
    const auto post =
        robot::trajectory_rmse(as_traj(tr.post_vel, tr.post_pos), target);
    EvalRow row;
    row.pre_vel_rmse = pre.velocity_rmse;
    row.post_vel_rmse = post.velocity_rmse;
    row.pre_euclid_rmse = pre.euclidean_rmse;
    row.post_euclid_rmse = post.euclidean_rmse;
    double s = 0;
    for (const auto& v : tr.pre_vel) s += std::abs(v[0]) + std::abs(v[1]);
    row.pre_mean_abs_vel = s / (2.0 * double(tr.pre_vel.size()));
    row.reprogram_events = hw ? hw->reprogram_events() - events_before : 0;
    result.rows.push_back(row);
  }
  const double n = double(result.rows.size());
  for (const auto& r : result.rows) {
    for (int j = 0; j < 2; ++j) {
      result.mean_pre_vel_rmse[j] += r.pre_vel_rmse[j] / n;
      result.mean_post_vel_rmse[j] += r.post_vel_rmse[j] / n;
    }
    result.mean_pre_euclid += r.pre_euclid_rmse / n;
    result.mean_post_euclid += r.post_euclid_rmse / n;
    result.mean_pre_abs_vel += r.pre_mean_abs_vel / n;
  }
  return result;
}

}  // namespace l2l::eprop
