#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "l2l/harness.hpp"

extern "C" void openblas_set_num_threads(int);

namespace {

struct Common {
  std::string config_path;
  std::string backend;
  std::string out_dir;
  uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "experiment config file");
  cmd->add_option("--seed", c.seed, "master seed")->each([&](const std::string&) {
    c.seed_set = true;
  });
  cmd->add_option("--backend", c.backend,
                  "software-32bit | software-4bit | crossbar");
  cmd->add_option("--out", c.out_dir, "output directory");
}

l2l::ExperimentConfig resolve(const Common& c, const std::string& kind) {
  l2l::ExperimentConfig cfg;
  if (!c.config_path.empty()) cfg = l2l::parse_config(c.config_path);
  cfg.kind = kind;
  if (c.seed_set) cfg.seed = c.seed;
  if (!c.backend.empty()) cfg.backend = c.backend;
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  return cfg;
}

std::string checkpoint_or_default(const std::string& given,
                                  const l2l::ExperimentConfig& cfg,
                                  const char* fallback) {
  return given.empty() ? cfg.out_dir + "/" + fallback : given;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* threads = std::getenv("L2L_THREADS")) {
    const int n = std::atoi(threads);
    if (n > 0) openblas_set_num_threads(n);
  }

  CLI::App app{"learning-to-learn experiments on simulated analog hardware"};
  app.require_subcommand(1);

  Common c_mtrain, c_meval, c_etrain, c_eeval, c_xbar, c_traj, c_hist;
  std::string meval_ckpt, eeval_ckpt, hist_tensor = "dense", hist_out;
  std::vector<std::string> hist_ckpts;
  int traj_count = 10, xbar_trials = 10000;

  auto* mtrain = app.add_subcommand("maml-train", "meta-train the few-shot classifier");
  add_common(mtrain, c_mtrain);

  auto* meval = app.add_subcommand("maml-eval", "few-shot evaluation of a checkpoint");
  add_common(meval, c_meval);
  meval->add_option("--checkpoint", meval_ckpt, "model checkpoint (default OUT/maml_final.ckpt)");

  auto* etrain = app.add_subcommand("eprop-train", "meta-train the motor-learning networks");
  add_common(etrain, c_etrain);

  auto* eeval = app.add_subcommand("eprop-eval", "one-shot adaptation trials of a checkpoint");
  add_common(eeval, c_eeval);
  eeval->add_option("--checkpoint", eeval_ckpt, "model checkpoint (default OUT/eprop_final.ckpt)");

  auto* xbarc = app.add_subcommand("crossbar-check", "crossbar property suite and error-bound report");
  add_common(xbarc, c_xbar);
  xbarc->add_option("--trials", xbar_trials, "error-bound trials");

  auto* traj = app.add_subcommand("traj-gen", "emit target trajectories as CSV");
  add_common(traj, c_traj);
  traj->add_option("--count", traj_count, "number of trajectories");

  auto* hist = app.add_subcommand("hist", "weight histograms over a checkpoint sequence");
  add_common(hist, c_hist);
  hist->add_option("--checkpoints", hist_ckpts, "checkpoint files, in order")->required();
  hist->add_option("--tensor", hist_tensor, "tensor name (default dense)");
  hist->add_option("--hist-out", hist_out, "output CSV (default OUT/weight_hist.csv)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (mtrain->parsed()) {
      auto cfg = resolve(c_mtrain, "maml");
      l2l::harness::maml_train(cfg);
    } else if (meval->parsed()) {
      auto cfg = resolve(c_meval, "maml");
      auto params = l2l::harness::load_maml_checkpoint(
          checkpoint_or_default(meval_ckpt, cfg, "maml_final.ckpt"));
      auto res = l2l::harness::maml_eval(cfg, params);
      std::cout << "mean accuracy per inner step:";
      for (double a : res.mean_accuracy) std::cout << ' ' << a;
      std::cout << '\n';
    } else if (etrain->parsed()) {
      auto cfg = resolve(c_etrain, "eprop");
      l2l::harness::eprop_train(cfg);
    } else if (eeval->parsed()) {
      auto cfg = resolve(c_eeval, "eprop");
      auto params = l2l::harness::load_eprop_checkpoint(
          checkpoint_or_default(eeval_ckpt, cfg, "eprop_final.ckpt"));
      auto res = l2l::harness::eprop_eval(cfg, params);
      std::cout << "velocity RMSE pre (" << res.mean_pre_vel_rmse[0] << ", "
                << res.mean_pre_vel_rmse[1] << ") -> post ("
                << res.mean_post_vel_rmse[0] << ", " << res.mean_post_vel_rmse[1]
                << ")\n";
    } else if (xbarc->parsed()) {
      auto cfg = resolve(c_xbar, "maml");
      auto rep = l2l::harness::crossbar_check(cfg, xbar_trials, std::cout);
      return rep.pass ? 0 : 1;
    } else if (traj->parsed()) {
      auto cfg = resolve(c_traj, "eprop");
      l2l::harness::traj_gen(cfg, traj_count);
    } else if (hist->parsed()) {
      auto cfg = resolve(c_hist, "maml");
      l2l::harness::weight_hist(
          hist_ckpts, hist_tensor,
          hist_out.empty() ? cfg.out_dir + "/weight_hist.csv" : hist_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
