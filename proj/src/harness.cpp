#include "l2l/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <stdexcept>

#include "l2l/checkpoint.hpp"
#include "l2l/metrics.hpp"
#include "l2l/omniglot.hpp"
#include "l2l/robot.hpp"

namespace l2l::harness {

namespace {

// configured backend name -> module-level backend + quantization flag
struct BackendPlan {
  std::string name;   // "software" | "crossbar"
  bool four_bit = false;
};

BackendPlan plan_backend(const std::string& backend, bool allow_four_bit) {
  if (backend == "software-32bit") return {"software", false};
  if (backend == "software-4bit") {
    if (!allow_four_bit)
      throw std::invalid_argument(
          "backend software-4bit is only available for maml runs");
    return {"software", true};
  }
  if (backend == "crossbar") return {"crossbar", false};
  throw std::invalid_argument("unknown backend '" + backend + "'");
}

void ensure_out_dir(const ExperimentConfig& cfg) {
  if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);
}

void save_params(const std::string& path, const std::string& magic,
                 std::vector<Tensor*> tensors,
                 const std::vector<std::string>& names) {
  std::vector<std::pair<std::string, const Tensor*>> table;
  for (size_t i = 0; i < names.size(); ++i) table.emplace_back(names[i], tensors[i]);
  ckpt::save(path, magic, table);
}

Tensor take(std::map<std::string, Tensor>& table, const std::string& name,
            const std::string& path) {
  auto it = table.find(name);
  if (it == table.end())
    throw std::runtime_error("checkpoint " + path + ": missing tensor '" + name + "'");
  return std::move(it->second);
}

}  // namespace

Splits load_splits(const ExperimentConfig& cfg,
                   std::vector<std::string>* warnings) {
  data::Dataset all;
  if (!cfg.omniglot_root.empty()) {
    all = data::load_omniglot(cfg.omniglot_root, cfg.omniglot_manifest, 20,
                              warnings);
  } else {
    all = data::synthetic_glyphs(cfg.synthetic_classes, cfg.synthetic_per_class,
                                 cfg.seed);
  }
  const int C = all.num_classes();
  const int ways = cfg.maml.ways;
  const int n_test = std::max(ways, C / 4);
  const int n_val = std::max(ways, C / 8);
  if (C - n_test - n_val < ways)
    throw std::runtime_error("dataset too small: " + std::to_string(C) +
                             " classes cannot cover a " + std::to_string(ways) +
                             "-way train/val/test split");
  Splits s;
  s.train = data::slice_classes(all, 0, C - n_test - n_val);
  s.val = data::slice_classes(all, C - n_test - n_val, C - n_test);
  s.test = data::slice_classes(all, C - n_test, C);
  return s;
}

maml::CnnParams maml_train(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  maml::MamlConfig mcfg = cfg.maml;
  mcfg.four_bit = false;  // meta-training is always full precision
  Splits s = load_splits(cfg);
  maml::CnnParams params =
      maml::meta_train(mcfg, s.train, s.val, cfg.seed, cfg.out_dir);
  if (!cfg.out_dir.empty())
    save_params(cfg.out_dir + "/maml_final.ckpt", "MAML", params.tensors(),
                params.names());
  return params;
}

maml::EvalResult maml_eval(const ExperimentConfig& cfg,
                           const maml::CnnParams& params) {
  ensure_out_dir(cfg);
  BackendPlan plan = plan_backend(cfg.backend, /*allow_four_bit=*/true);
  maml::MamlConfig mcfg = cfg.maml;
  mcfg.four_bit = plan.four_bit;
  Splits s = load_splits(cfg);
  maml::EvalResult res = maml::evaluate(params, s.test, cfg.eval_tasks, mcfg,
                                        plan.name, cfg.seed, cfg.analog);
  if (!cfg.out_dir.empty()) {
    metrics::CsvSink csv(cfg.out_dir + "/maml_accuracy.csv",
                         {"task", "step", "accuracy"});
    for (size_t t = 0; t < res.task_accuracy.size(); ++t)
      for (size_t k = 0; k < res.task_accuracy[t].size(); ++k)
        csv.row({double(t), double(k), res.task_accuracy[t][k]});
    csv.flush();
  }
  return res;
}

maml::CnnParams load_maml_checkpoint(const std::string& path) {
  auto table = ckpt::load(path, "MAML");
  maml::CnnParams p;
  for (int blk = 1; blk <= 4; ++blk) {
    const std::string b = "block" + std::to_string(blk);
    p.conv_w.push_back(take(table, b + ".w", path));
    p.conv_b.push_back(take(table, b + ".b", path));
    p.gamma.push_back(take(table, b + ".gamma", path));
    p.beta.push_back(take(table, b + ".beta", path));
  }
  p.dense = take(table, "dense", path);
  return p;
}

eprop::EpropParams eprop_train(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  eprop::EpropParams params = eprop::meta_train(cfg.eprop, cfg.seed, cfg.out_dir);
  if (!cfg.out_dir.empty())
    save_params(cfg.out_dir + "/eprop_final.ckpt", "EPRP", params.tensors(),
                params.names());
  return params;
}

eprop::EvalResult eprop_eval(const ExperimentConfig& cfg,
                             const eprop::EpropParams& params) {
  ensure_out_dir(cfg);
  BackendPlan plan = plan_backend(cfg.backend, /*allow_four_bit=*/false);
  eprop::EvalResult res =
      eprop::evaluate(params, cfg.eprop, cfg.eval_trajectories, plan.name,
                      cfg.seed, cfg.analog);
  if (!cfg.out_dir.empty()) {
    metrics::CsvSink csv(
        cfg.out_dir + "/eprop_eval.csv",
        {"trajectory", "pre_vel_rmse_base", "pre_vel_rmse_shoulder",
         "post_vel_rmse_base", "post_vel_rmse_shoulder", "pre_euclid_rmse",
         "post_euclid_rmse", "pre_mean_abs_vel", "reprogram_events"});
    for (size_t i = 0; i < res.rows.size(); ++i) {
      const auto& r = res.rows[i];
      csv.row({double(i), r.pre_vel_rmse[0], r.pre_vel_rmse[1],
               r.post_vel_rmse[0], r.post_vel_rmse[1], r.pre_euclid_rmse,
               r.post_euclid_rmse, r.pre_mean_abs_vel,
               double(r.reprogram_events)});
    }
    csv.flush();
  }
  return res;
}

eprop::EpropParams load_eprop_checkpoint(const std::string& path) {
  auto table = ckpt::load(path, "EPRP");
  eprop::EpropParams p;
  p.theta_in = take(table, "theta_in", path);
  p.theta_rec = take(table, "theta_rec", path);
  p.theta_out = take(table, "theta_out", path);
  p.psi_in = take(table, "psi_in", path);
  p.psi_rec = take(table, "psi_rec", path);
  p.psi_out = take(table, "psi_out", path);
  return p;
}

int run_experiment(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  if (!cfg.out_dir.empty()) {
    std::ofstream echo(cfg.out_dir + "/config_resolved.txt", std::ios::trunc);
    echo << serialize_config(cfg);
  }
  if (cfg.kind == "maml") {
    maml::CnnParams params = maml_train(cfg);
    maml_eval(cfg, params);
  } else if (cfg.kind == "eprop") {
    eprop::EpropParams params = eprop_train(cfg);
    eprop_eval(cfg, params);
  } else {
    throw std::invalid_argument("unknown experiment kind '" + cfg.kind + "'");
  }
  return 0;
}

void traj_gen(const ExperimentConfig& cfg, int count) {
  ensure_out_dir(cfg);
  const auto dh = robot::DhParams::ed_scorbot();
  Rng rng = Rng::split(cfg.seed, 50);
  metrics::CsvSink csv(
      cfg.out_dir + "/trajectories.csv",
      {"trajectory", "step", "vel_base", "vel_shoulder", "x", "y", "z"});
  for (int i = 0; i < count; ++i) {
    robot::Trajectory tr = robot::gen_target_trajectory(rng, dh, cfg.eprop.traj);
    for (size_t t = 0; t < tr.velocities.size(); ++t)
      csv.row({double(i), double(t), tr.velocities[t][0], tr.velocities[t][1],
               tr.positions[t].x, tr.positions[t].y, tr.positions[t].z});
  }
  csv.flush();
}

CrossbarReport crossbar_check(const ExperimentConfig& cfg, int trials,
                              std::ostream& os) {
  CrossbarReport rep;
  const int n = 64;
  Rng rng = Rng::split(cfg.seed, 60);
  auto rand_vec = [&](int count) {
    std::vector<float> v(static_cast<size_t>(count));
    for (auto& x : v) x = float(rng.uniform(-1.0, 1.0));
    return v;
  };

  // 1. noise-off diagnostic: bypass quantizers, compare against the exact
  // double-precision product of the requested weights
  {
    xbar::AnalogConfig acfg = cfg.analog;
    acfg.prog_noise_sigma = 0;
    acfg.bypass_io_quant = true;
    xbar::CrossbarCore core(acfg);
    xbar::Region reg{0, 0, n, n};
    auto w = rand_vec(n * n);
    core.program(w, reg, rng);
    for (int t = 0; t < 20; ++t) {
      auto x = rand_vec(n);
      auto y = core.mvm(x, reg);
      for (int c = 0; c < n; ++c) {
        double exact = 0;
        for (int r = 0; r < n; ++r) exact += double(x[size_t(r)]) * w[size_t(r) * n + c];
        // accumulation is 64-bit; the output is rounded to float32 once
        rep.max_exact_diff =
            std::max(rep.max_exact_diff, std::abs(double(y[size_t(c)]) - exact) /
                                             std::max(1.0, std::abs(exact)));
      }
    }
  }

  // 2. default-noise error vs the analytic three-quantizer bound; one trial
  // per (matrix, input, column) triple
  {
    int64_t within = 0, total = 0;
    xbar::Region reg{0, 0, n, n};
    while (total < trials) {
      xbar::CrossbarCore core(cfg.analog);
      auto w = rand_vec(n * n);
      core.program(w, reg, rng);
      for (int probe = 0; probe < 16 && total < trials; ++probe) {
        auto x = rand_vec(n);
        auto y = core.mvm(x, reg);
        auto bound = core.mvm_error_bound(x, reg);
        for (int c = 0; c < n && total < trials; ++c) {
          double exact = 0;
          for (int r = 0; r < n; ++r)
            exact += double(x[size_t(r)]) * w[size_t(r) * n + c];
          const double err = std::abs(double(y[size_t(c)]) - exact);
          if (bound[size_t(c)] > 0)
            rep.worst_bound_ratio =
                std::max(rep.worst_bound_ratio, err / bound[size_t(c)]);
          within += err <= bound[size_t(c)] + 1e-9;
          ++total;
        }
      }
    }
    rep.bound_coverage = double(within) / double(total);
  }

  // 3. stochastic rounding: empirical mean of repeated quantizations within
  // 3 sigma of the value (Bernoulli variance between adjacent levels)
  {
    const int levels = cfg.analog.weight_levels;
    const double step = 2.0 / double(levels - 1);
    const int reps = 100000;
    const double v = rng.uniform(-0.9, 0.9);
    std::vector<float> in(static_cast<size_t>(reps), float(v));
    auto out = xbar::quantize_stochastic(in, levels, rng);
    double mean = 0;
    for (float q : out) mean += q;
    mean /= double(reps);
    const double lo = std::floor((double(float(v)) + 1.0) / step) * step - 1.0;
    const double p = (double(float(v)) - lo) / step;
    const double sigma = step * std::sqrt(std::max(p * (1.0 - p), 1e-12) / reps);
    rep.rounding_sigma_dist = std::abs(mean - double(float(v))) / sigma;
  }

  rep.pass = rep.max_exact_diff <= 1e-6 && rep.bound_coverage >= 0.99 &&
             rep.rounding_sigma_dist <= 3.0;
  os << "crossbar-check report\n"
     << "  noise-off max |mvm - exact|     : " << rep.max_exact_diff << "\n"
     << "  error-bound coverage            : " << rep.bound_coverage
     << " (worst |err|/bound " << rep.worst_bound_ratio << ")\n"
     << "  stochastic-rounding mean dist   : " << rep.rounding_sigma_dist
     << " sigma\n"
     << "  overall                         : " << (rep.pass ? "pass" : "FAIL")
     << "\n";
  return rep;
}

void weight_hist(const std::vector<std::string>& checkpoint_paths,
                 const std::string& tensor_name, const std::string& out_csv) {
  std::vector<Tensor> sequence;
  for (const auto& path : checkpoint_paths) {
    std::map<std::string, Tensor> table;
    try {
      table = ckpt::load(path, "MAML");
    } catch (const std::exception&) {
      table = ckpt::load(path, "EPRP");
    }
    sequence.push_back(take(table, tensor_name, path));
  }
  metrics::write_histograms(out_csv, metrics::weight_histograms(sequence));
}

}  // namespace l2l::harness
