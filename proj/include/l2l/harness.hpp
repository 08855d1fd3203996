#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "l2l/config.hpp"
#include "l2l/dataset.hpp"
#include "l2l/eprop.hpp"
#include "l2l/maml.hpp"

namespace l2l::harness {

// Class-wise dataset split: test gets the last quarter of the classes, the
// validation slice the eighth before it, training the rest. Source is the
// image corpus when a root directory is configured, the procedural glyph
// generator otherwise.
struct Splits {
  data::Dataset train, val, test;
};
Splits load_splits(const ExperimentConfig& cfg,
                   std::vector<std::string>* warnings = nullptr);

// Full-precision meta-training; writes maml_loss.csv, periodic checkpoints
// and maml_final.ckpt under cfg.out_dir.
maml::CnnParams maml_train(const ExperimentConfig& cfg);

// Few-shot evaluation on the configured backend; writes maml_accuracy.csv
// (task, step, accuracy) with eval_tasks x (inner_steps + 1) rows.
maml::EvalResult maml_eval(const ExperimentConfig& cfg,
                           const maml::CnnParams& params);

maml::CnnParams load_maml_checkpoint(const std::string& path);

// Meta-training of the learning-to-learn motor controller; writes
// eprop_loss.csv, periodic checkpoints and eprop_final.ckpt.
eprop::EpropParams eprop_train(const ExperimentConfig& cfg);

// One-shot adaptation trials on held-out trajectories; writes eprop_eval.csv
// with one row per trajectory.
eprop::EvalResult eprop_eval(const ExperimentConfig& cfg,
                             const eprop::EpropParams& params);

eprop::EpropParams load_eprop_checkpoint(const std::string& path);

// Train-then-evaluate for the configured kind/backend. Creates out_dir,
// echoes the resolved config to config_resolved.txt, returns 0 on success.
int run_experiment(const ExperimentConfig& cfg);

// Sampled velocity targets -> trajectories.csv
// (trajectory, step, vel_base, vel_shoulder, x, y, z).
void traj_gen(const ExperimentConfig& cfg, int count);

// Crossbar property suite: noise-off exactness, quantizer error bound
// coverage, stochastic-rounding mean. Prints a report; returns overall pass.
struct CrossbarReport {
  double max_exact_diff = 0;       // noise-off mvm vs double matmul
  double bound_coverage = 0;       // fraction of noisy mvms within bound
  double worst_bound_ratio = 0;    // max |err| / bound over all trials
  double rounding_sigma_dist = 0;  // |empirical - exact| in sigma units
  bool pass = false;
};
CrossbarReport crossbar_check(const ExperimentConfig& cfg, int trials,
                              std::ostream& os);

// Weight histogram CSV from a checkpoint sequence: five |w| bins per
// checkpoint, normalized by the first checkpoint's max.
void weight_hist(const std::vector<std::string>& checkpoint_paths,
                 const std::string& tensor_name, const std::string& out_csv);

}  // namespace l2l::harness
