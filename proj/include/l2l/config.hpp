#pragma once

#include <string>

#include "l2l/crossbar.hpp"
#include "l2l/eprop.hpp"
#include "l2l/maml.hpp"

namespace l2l {

// Everything a run needs, resolvable from one structured-text file. Every
// field has a default matching the reference experiments, so an empty file
// is a valid full-scale configuration.
struct ExperimentConfig {
  std::string kind = "maml";               // maml | eprop
  std::string backend = "software-32bit";  // software-32bit | software-4bit | crossbar
  uint64_t seed = 0;
  std::string out_dir = "out";

  // data sourcing: image corpus if a root is given, procedural glyphs
  // otherwise
  std::string omniglot_root;
  std::string omniglot_manifest;
  int synthetic_classes = 100;
  int synthetic_per_class = 20;

  int eval_tasks = 50;          // maml evaluation episodes
  int eval_trajectories = 20;   // eprop evaluation trials

  maml::MamlConfig maml;
  eprop::EpropConfig eprop;
  xbar::AnalogConfig analog;
};

// Structured-text parse: `key = value` lines under `[section]` headers,
// '#' comments. Unknown sections/keys and malformed values fail with the
// file name and line number. Missing keys keep their defaults.
ExperimentConfig parse_config(const std::string& path);
ExperimentConfig parse_config_text(const std::string& text,
                                   const std::string& source_name);

// Full resolved config; parse(serialize(c)) == c bit-exactly.
std::string serialize_config(const ExperimentConfig& cfg);

}  // namespace l2l
