#include "l2l/config.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace l2l {

namespace {

enum class FType { Str, I32, I64, U64, F64, Bool };

struct Field {
  const char* section;
  const char* key;
  FType type;
  std::function<void*(ExperimentConfig&)> ptr;
};

// one registry drives both parse and serialize, so round-trips are exact by
// construction
const std::vector<Field>& fields() {
  auto f = [](const char* sec, const char* key, FType t,
              std::function<void*(ExperimentConfig&)> p) {
    return Field{sec, key, t, std::move(p)};
  };
  static const std::vector<Field> reg = {
      f("", "kind", FType::Str, [](ExperimentConfig& c) -> void* { return &c.kind; }),
      f("", "backend", FType::Str, [](ExperimentConfig& c) -> void* { return &c.backend; }),
      f("", "seed", FType::U64, [](ExperimentConfig& c) -> void* { return &c.seed; }),
      f("", "out_dir", FType::Str, [](ExperimentConfig& c) -> void* { return &c.out_dir; }),

      f("data", "omniglot_root", FType::Str, [](ExperimentConfig& c) -> void* { return &c.omniglot_root; }),
      f("data", "omniglot_manifest", FType::Str, [](ExperimentConfig& c) -> void* { return &c.omniglot_manifest; }),
      f("data", "synthetic_classes", FType::I32, [](ExperimentConfig& c) -> void* { return &c.synthetic_classes; }),
      f("data", "synthetic_per_class", FType::I32, [](ExperimentConfig& c) -> void* { return &c.synthetic_per_class; }),

      f("eval", "tasks", FType::I32, [](ExperimentConfig& c) -> void* { return &c.eval_tasks; }),
      f("eval", "trajectories", FType::I32, [](ExperimentConfig& c) -> void* { return &c.eval_trajectories; }),

      f("maml", "filters", FType::I32, [](ExperimentConfig& c) -> void* { return &c.maml.filters; }),
      f("maml", "ways", FType::I32, [](ExperimentConfig& c) -> void* { return &c.maml.ways; }),
      f("maml", "shots", FType::I32, [](ExperimentConfig& c) -> void* { return &c.maml.shots; }),
      f("maml", "inner_lr", FType::F64, [](ExperimentConfig& c) -> void* { return &c.maml.inner_lr; }),
      f("maml", "outer_lr", FType::F64, [](ExperimentConfig& c) -> void* { return &c.maml.outer_lr; }),
      f("maml", "inner_steps", FType::I32, [](ExperimentConfig& c) -> void* { return &c.maml.inner_steps; }),
      f("maml", "meta_batch", FType::I32, [](ExperimentConfig& c) -> void* { return &c.maml.meta_batch; }),
      f("maml", "outer_iters", FType::I32, [](ExperimentConfig& c) -> void* { return &c.maml.outer_iters; }),
      f("maml", "first_order", FType::Bool, [](ExperimentConfig& c) -> void* { return &c.maml.first_order; }),
      f("maml", "val_interval", FType::I32, [](ExperimentConfig& c) -> void* { return &c.maml.val_interval; }),
      f("maml", "val_episodes", FType::I32, [](ExperimentConfig& c) -> void* { return &c.maml.val_episodes; }),
      f("maml", "checkpoint_interval", FType::I32, [](ExperimentConfig& c) -> void* { return &c.maml.checkpoint_interval; }),

      f("eprop", "trainee_n", FType::I32, [](ExperimentConfig& c) -> void* { return &c.eprop.trainee_n; }),
      f("eprop", "lsg_n", FType::I32, [](ExperimentConfig& c) -> void* { return &c.eprop.lsg_n; }),
      f("eprop", "alif_frac", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.alif_frac; }),
      f("eprop", "inner_lr", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.inner_lr; }),
      f("eprop", "outer_lr", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.outer_lr; }),
      f("eprop", "lr_decay", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.lr_decay; }),
      f("eprop", "decay_interval", FType::I32, [](ExperimentConfig& c) -> void* { return &c.eprop.decay_interval; }),
      f("eprop", "batch", FType::I32, [](ExperimentConfig& c) -> void* { return &c.eprop.batch; }),
      f("eprop", "outer_iters", FType::I32, [](ExperimentConfig& c) -> void* { return &c.eprop.outer_iters; }),
      f("eprop", "trial_steps", FType::I32, [](ExperimentConfig& c) -> void* { return &c.eprop.T; }),
      f("eprop", "tau_m", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.tau_m; }),
      f("eprop", "tau_a", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.tau_a; }),
      f("eprop", "tau_out", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.tau_out; }),
      f("eprop", "vth_trainee", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.vth_trainee; }),
      f("eprop", "vth_lsg", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.vth_lsg; }),
      f("eprop", "beta_alif", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.beta_alif; }),
      f("eprop", "lambda", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.lambda; }),
      f("eprop", "refractory", FType::I32, [](ExperimentConfig& c) -> void* { return &c.eprop.refractory; }),
      f("eprop", "f_target_trainee", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.f_target_trainee; }),
      f("eprop", "f_target_lsg", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.f_target_lsg; }),
      f("eprop", "epsilon", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.epsilon; }),
      f("eprop", "w_pos", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.w_pos; }),
      f("eprop", "w_vel", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.w_vel; }),
      f("eprop", "w_pre", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.w_pre; }),
      f("eprop", "loss_schedule", FType::Str, [](ExperimentConfig& c) -> void* { return &c.eprop.loss_schedule; }),
      f("eprop", "grad_clip", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.grad_clip; }),
      f("eprop", "first_order", FType::Bool, [](ExperimentConfig& c) -> void* { return &c.eprop.first_order; }),
      f("eprop", "val_interval", FType::I32, [](ExperimentConfig& c) -> void* { return &c.eprop.val_interval; }),
      f("eprop", "checkpoint_interval", FType::I32, [](ExperimentConfig& c) -> void* { return &c.eprop.checkpoint_interval; }),

      f("analog", "input_bits", FType::I32, [](ExperimentConfig& c) -> void* { return &c.analog.input_bits; }),
      f("analog", "output_bits", FType::I32, [](ExperimentConfig& c) -> void* { return &c.analog.output_bits; }),
      f("analog", "weight_levels", FType::I32, [](ExperimentConfig& c) -> void* { return &c.analog.weight_levels; }),
      f("analog", "prog_noise_sigma", FType::F64, [](ExperimentConfig& c) -> void* { return &c.analog.prog_noise_sigma; }),
      f("analog", "verify_tolerance", FType::F64, [](ExperimentConfig& c) -> void* { return &c.analog.verify_tolerance; }),
      f("analog", "max_verify_iters", FType::I32, [](ExperimentConfig& c) -> void* { return &c.analog.max_verify_iters; }),
      f("analog", "drift_nu", FType::F64, [](ExperimentConfig& c) -> void* { return &c.analog.drift_nu; }),
      f("analog", "bypass_io_quant", FType::Bool, [](ExperimentConfig& c) -> void* { return &c.analog.bypass_io_quant; }),

      f("limits", "max_rel_angle", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.traj.limits.max_rel_angle; }),
      f("limits", "max_velocity", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.traj.limits.max_velocity; }),

      f("trajectory", "wiener_variance", FType::F64, [](ExperimentConfig& c) -> void* { return &c.eprop.traj.wiener_variance; }),
      f("trajectory", "hann_length", FType::I32, [](ExperimentConfig& c) -> void* { return &c.eprop.traj.hann_length; }),
      f("trajectory", "max_resamples", FType::I32, [](ExperimentConfig& c) -> void* { return &c.eprop.traj.max_resamples; }),
  };
  return reg;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void fail(const std::string& src, int line, const std::string& msg) {
  throw std::runtime_error("config " + src + ":" + std::to_string(line) + ": " + msg);
}

void set_value(ExperimentConfig& cfg, const Field& fld, const std::string& value,
               const std::string& src, int line) {
  void* p = fld.ptr(cfg);
  const char* s = value.c_str();
  char* end = nullptr;
  switch (fld.type) {
    case FType::Str:
      *static_cast<std::string*>(p) = value;
      return;
    case FType::I32: {
      long v = std::strtol(s, &end, 10);
      if (end == s || *end != '\0')
        fail(src, line, "expected integer for '" + std::string(fld.key) +
                            "', got '" + value + "'");
      *static_cast<int*>(p) = static_cast<int>(v);
      return;
    }
    case FType::I64: {
      long long v = std::strtoll(s, &end, 10);
      if (end == s || *end != '\0')
        fail(src, line, "expected integer for '" + std::string(fld.key) +
                            "', got '" + value + "'");
      *static_cast<int64_t*>(p) = v;
      return;
    }
    case FType::U64: {
      unsigned long long v = std::strtoull(s, &end, 10);
      if (end == s || *end != '\0' || value.find('-') != std::string::npos)
        fail(src, line, "expected unsigned integer for '" + std::string(fld.key) +
                            "', got '" + value + "'");
      *static_cast<uint64_t*>(p) = v;
      return;
    }
    case FType::F64: {
      double v = std::strtod(s, &end);
      if (end == s || *end != '\0')
        fail(src, line, "expected number for '" + std::string(fld.key) +
                            "', got '" + value + "'");
      *static_cast<double*>(p) = v;
      return;
    }
    case FType::Bool: {
      if (value == "true")
        *static_cast<bool*>(p) = true;
      else if (value == "false")
        *static_cast<bool*>(p) = false;
      else
        fail(src, line, "expected true/false for '" + std::string(fld.key) +
                            "', got '" + value + "'");
      return;
    }
  }
}

std::string get_value(const ExperimentConfig& cfg, const Field& fld) {
  void* p = fld.ptr(const_cast<ExperimentConfig&>(cfg));
  char buf[64];
  switch (fld.type) {
    case FType::Str:
      return *static_cast<std::string*>(p);
    case FType::I32:
      std::snprintf(buf, sizeof buf, "%d", *static_cast<int*>(p));
      return buf;
    case FType::I64:
      std::snprintf(buf, sizeof buf, "%" PRId64, *static_cast<int64_t*>(p));
      return buf;
    case FType::U64:
      std::snprintf(buf, sizeof buf, "%" PRIu64, *static_cast<uint64_t*>(p));
      return buf;
    case FType::F64:
      std::snprintf(buf, sizeof buf, "%.17g", *static_cast<double*>(p));
      return buf;
    case FType::Bool:
      return *static_cast<bool*>(p) ? "true" : "false";
  }
  return "";
}

void validate(const ExperimentConfig& cfg, const std::string& src) {
  if (cfg.kind != "maml" && cfg.kind != "eprop")
    throw std::runtime_error("config " + src + ": kind must be maml or eprop, got '" +
                             cfg.kind + "'");
  if (cfg.backend != "software-32bit" && cfg.backend != "software-4bit" &&
      cfg.backend != "crossbar")
    throw std::runtime_error(
        "config " + src +
        ": backend must be software-32bit, software-4bit or crossbar, got '" +
        cfg.backend + "'");
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text,
                                   const std::string& source_name) {
  ExperimentConfig cfg;
  std::istringstream is(text);
  std::string raw, section;
  int line = 0;
  while (std::getline(is, raw)) {
    ++line;
    std::string s = trim(raw);
    if (s.empty() || s[0] == '#') continue;
    if (s.front() == '[') {
      if (s.back() != ']') fail(source_name, line, "malformed section header");
      section = trim(s.substr(1, s.size() - 2));
      bool known = false;
      for (const auto& fld : fields()) known |= section == fld.section;
      if (!known) fail(source_name, line, "unknown section '" + section + "'");
      continue;
    }
    size_t eq = s.find('=');
    if (eq == std::string::npos) fail(source_name, line, "expected 'key = value'");
    std::string key = trim(s.substr(0, eq));
    std::string value = trim(s.substr(eq + 1));
    const Field* found = nullptr;
    for (const auto& fld : fields())
      if (section == fld.section && key == fld.key) found = &fld;
    if (!found)
      fail(source_name, line,
           "unknown key '" + key + "'" +
               (section.empty() ? "" : " in section [" + section + "]"));
    set_value(cfg, *found, value, source_name, line);
  }
  validate(cfg, source_name);
  return cfg;
}

ExperimentConfig parse_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("config: cannot read " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return parse_config_text(os.str(), path);
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  std::string section;
  bool first = true;
  for (const auto& fld : fields()) {
    if (std::string(fld.section) != section || first) {
      section = fld.section;
      if (!section.empty()) os << "\n[" << section << "]\n";
      first = false;
    }
    os << fld.key << " = " << get_value(cfg, fld) << "\n";
  }
  return os.str();
}

}  // namespace l2l
