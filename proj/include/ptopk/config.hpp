#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ptopk/io.hpp"
#include "ptopk/pipeline.hpp"
#include "ptopk/tasks.hpp"

namespace ptopk {

// Run configuration: a flat key=value schema shared by every subcommand.
// Files and command-line overrides set the same keys; unknown keys are
// errors; the effective config reproduces the run when fed back in.

enum class FieldKind { Int, Real, Str, Bool, Enum };

struct FieldSpec {
  FieldKind kind;
  std::string def;
  std::vector<std::string> choices;  // Enum only
};

inline const std::map<std::string, FieldSpec>& config_schema() {
  static const std::map<std::string, FieldSpec> schema = {
      {"task", {FieldKind::Enum, "needle", {"needle", "relational"}}},
      {"seed", {FieldKind::Int, "0", {}}},
      {"out", {FieldKind::Str, "out", {}}},
      {"threads", {FieldKind::Int, "2", {}}},
      {"dataset", {FieldKind::Str, "", {}}},
      {"checkpoint", {FieldKind::Str, "", {}}},
      // dataset generation
      {"image", {FieldKind::Int, "64", {}}},
      {"patch", {FieldKind::Int, "8", {}}},
      {"stride", {FieldKind::Int, "8", {}}},
      {"clutter", {FieldKind::Int, "3", {}}},
      {"glyph_min", {FieldKind::Int, "4", {}}},
      {"glyph_max", {FieldKind::Int, "8", {}}},
      {"train_size", {FieldKind::Int, "4000", {}}},
      {"val_size", {FieldKind::Int, "500", {}}},
      {"test_size", {FieldKind::Int, "1000", {}}},
      // pipeline
      {"k", {FieldKind::Int, "2", {}}},
      {"selector", {FieldKind::Enum, "perturbed", {"perturbed", "sinkhorn", "hard"}}},
      {"aggregation", {FieldKind::Enum, "mean", {"mean", "max", "attention"}}},
      {"sigma0", {FieldKind::Real, "0.05", {}}},
      {"sigma_decay", {FieldKind::Bool, "1", {}}},
      {"samples", {FieldKind::Int, "500", {}}},
      {"entropy_coeff", {FieldKind::Real, "0", {}}},
      {"learning_rate", {FieldKind::Real, "0.001", {}}},
      {"weight_decay", {FieldKind::Real, "0.0001", {}}},
      {"grad_clip", {FieldKind::Real, "1", {}}},
      {"steps", {FieldKind::Int, "400", {}}},
      {"batch_size", {FieldKind::Int, "32", {}}},
      {"feature_dim", {FieldKind::Int, "32", {}}},
      {"checkpoint_every", {FieldKind::Int, "500", {}}},
      // sinkhorn selector
      {"epsilon_reg", {FieldKind::Real, "0.05", {}}},
      {"sinkhorn_iters", {FieldKind::Int, "2000", {}}},
      {"sinkhorn_tol", {FieldKind::Real, "1e-5", {}}},
      // bench
      {"bench_images", {FieldKind::Int, "32", {}}},
      {"bench_trials", {FieldKind::Int, "5", {}}},
      // gradcheck test hook
      {"corrupt_backward", {FieldKind::Bool, "0", {}}},
  };
  return schema;
}

struct RunConfig {
  std::map<std::string, std::string> values;

  const std::string& str(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) throw std::invalid_argument("config key not set: " + key);
    return it->second;
  }
  int64_t i64(const std::string& key) const { return std::stoll(str(key)); }
  int i(const std::string& key) const { return static_cast<int>(i64(key)); }
  uint64_t u64(const std::string& key) const { return std::stoull(str(key)); }
  double f64(const std::string& key) const { return std::stod(str(key)); }
  float f(const std::string& key) const { return std::stof(str(key)); }
  bool b(const std::string& key) const { return str(key) != "0" && str(key) != "false"; }
};

inline RunConfig default_config() {
  RunConfig cfg;
  for (const auto& [key, spec] : config_schema()) cfg.values[key] = spec.def;
  return cfg;
}

inline void config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto it = config_schema().find(key);
  if (it == config_schema().end()) throw std::invalid_argument("unknown config key: " + key);
  const FieldSpec& spec = it->second;
  try {
    switch (spec.kind) {
      case FieldKind::Int:
        (void)std::stoll(value);
        break;
      case FieldKind::Real:
        (void)std::stod(value);
        break;
      case FieldKind::Bool:
        if (value != "0" && value != "1" && value != "true" && value != "false")
          throw std::invalid_argument("bool");
        break;
      case FieldKind::Enum: {
        bool ok = false;
        for (const auto& c : spec.choices) ok |= c == value;
        if (!ok) throw std::invalid_argument("enum");
        break;
      }
      case FieldKind::Str:
        break;
    }
  } catch (const std::exception&) {
    std::string msg = "invalid value for config key " + key + ": '" + value + "'";
    if (spec.kind == FieldKind::Enum) {
      msg += " (expected one of:";
      for (const auto& c : spec.choices) msg += " " + c;
      msg += ")";
    }
    throw std::invalid_argument(msg);
  }
  cfg.values[key] = value;
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  for (const auto& [key, value] : read_kv(path)) config_set(cfg, key, value);
}

inline void write_effective_config(const RunConfig& cfg, const std::string& path) {
  std::vector<std::pair<std::string, std::string>> kv(cfg.values.begin(), cfg.values.end());
  write_kv(path, kv);
}

inline PipelineConfig pipeline_config(const RunConfig& cfg, int num_classes) {
  PipelineConfig p;
  p.image_h = p.image_w = cfg.i("image");
  p.channels = 1;
  p.patch = cfg.i("patch");
  p.stride = cfg.i("stride");
  p.k = cfg.i("k");
  p.num_classes = num_classes;
  p.aggregation = aggregation_from_string(cfg.str("aggregation"));
  p.selector = selector_from_string(cfg.str("selector"));
  p.sigma0 = cfg.f("sigma0");
  p.sigma_decay = cfg.b("sigma_decay");
  p.samples = cfg.i("samples");
  p.entropy_coeff = cfg.f("entropy_coeff");
  p.learning_rate = cfg.f("learning_rate");
  p.weight_decay = cfg.f("weight_decay");
  p.grad_clip = cfg.f("grad_clip");
  p.steps = cfg.i("steps");
  p.batch_size = cfg.i("batch_size");
  p.feature_dim = cfg.i("feature_dim");
  p.seed = cfg.u64("seed");
  p.threads = cfg.i("threads");
  p.sinkhorn.epsilon_reg = cfg.f("epsilon_reg");
  p.sinkhorn.max_iters = cfg.i("sinkhorn_iters");
  p.sinkhorn.tol = cfg.f64("sinkhorn_tol");
  p.validate();
  return p;
}

inline NeedleTaskConfig needle_config(const RunConfig& cfg) {
  NeedleTaskConfig c;
  c.image = cfg.i("image");
  c.patch = cfg.i("patch");
  c.stride = cfg.i("stride");
  c.clutter = cfg.i("clutter");
  c.train_size = cfg.i("train_size");
  c.val_size = cfg.i("val_size");
  c.test_size = cfg.i("test_size");
  c.seed = cfg.u64("seed");
  return c;
}

inline RelationalTaskConfig relational_config(const RunConfig& cfg) {
  RelationalTaskConfig c;
  c.image = cfg.i("image");
  c.patch = cfg.i("patch");
  c.stride = cfg.i("stride");
  c.glyph_min = cfg.i("glyph_min");
  c.glyph_max = cfg.i("glyph_max");
  c.train_size = cfg.i("train_size");
  c.val_size = cfg.i("val_size");
  c.test_size = cfg.i("test_size");
  c.seed = cfg.u64("seed");
  return c;
}

}  // namespace ptopk
