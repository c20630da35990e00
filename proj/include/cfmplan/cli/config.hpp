#pragma once

#include <filesystem>
#include <set>
#include <string>

#include <toml++/toml.hpp>

#include "cfmplan/harness/experiment.hpp"

namespace cfmplan::cli {

/// Input/output file names; relative entries resolve against the output directory.
struct Paths {
  std::string dataset = "dataset.jsonl";
  std::string eval_dataset = "eval.jsonl";
  std::string vocab = "vocab.bin";
  std::string checkpoint = "model.ckpt";
  std::string rfe_checkpoint = "model_rfe.ckpt";
  std::string path = "path.jsonl";
};

enum class ExportFormat { csv, jsonl };

struct RunSettings {
  harness::ExperimentSpec spec;
  Paths paths;
  ExportFormat export_format = ExportFormat::csv;
  std::size_t sample_scenes = 4;
  bool sampler_seed_set = false;  // else derived from the master seed
};

namespace detail {

/// Reads keys from one table and remembers which were consumed.
class Section {
 public:
  Section(const toml::table* table, std::string name) : table_(table), name_(std::move(name)) {}

  template <class T>
  void read(const char* key, T& out) {
    if (!table_) return;
    const toml::node* node = table_->get(key);
    if (!node) return;
    used_.insert(key);
    const std::string where = name_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      auto v = node->value<bool>();
      if (!v || !node->is_boolean()) throw ConfigError(where + ": expected a boolean");
      out = *v;
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!node->is_string()) throw ConfigError(where + ": expected a string");
      out = *node->value<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!node->is_number()) throw ConfigError(where + ": expected a number");
      out = *node->value<double>();
      if (!std::isfinite(out)) throw ConfigError(where + ": must be finite");
    } else {
      if (!node->is_integer()) throw ConfigError(where + ": expected an integer");
      const auto v = *node->value<std::int64_t>();
      if (v < 0) throw ConfigError(where + ": must be non-negative");
      out = static_cast<T>(v);
    }
  }

  [[nodiscard]] bool has(const char* key) const { return table_ && table_->get(key) != nullptr; }

  void finish() const {
    if (!table_) return;
    for (const auto& [key, _] : *table_) {
      if (!used_.count(std::string(key.str()))) {
        throw ConfigError("unknown key '" + name_ + "." + std::string(key.str()) + "'");
      }
    }
  }

 private:
  const toml::table* table_;
  std::string name_;
  std::set<std::string> used_;
};

}  // namespace detail

inline const std::set<std::string>& known_sections() {
  static const std::set<std::string> s{"experiment", "dataset", "vocab", "model",  "train", "sampler",
                                       "eval",       "modules", "paths", "export", "sample"};
  return s;
}

/// Parses and validates a config document. Unknown sections or keys are errors.
inline RunSettings parse_config(const toml::table& doc) {
  for (const auto& [key, node] : doc) {
    const std::string k(key.str());
    if (!known_sections().count(k)) throw ConfigError("unknown section '" + k + "'");
    if (!node.is_table()) throw ConfigError("'" + k + "' must be a table");
  }
  auto section = [&](const char* name) { return detail::Section(doc[name].as_table(), name); };
  RunSettings rs;
  auto& s = rs.spec;

  auto ex = section("experiment");
  ex.read("name", s.name);
  ex.read("seed", s.seed);
  ex.finish();

  auto ds = section("dataset");
  for (auto kind : scenario::kAllKinds) {
    std::size_t n = 0;
    ds.read(std::string(scenario::to_string(kind)).c_str(), n);
    if (n > 0) s.train_scenes[kind] = n;
  }
  ds.read("eval_scenes_per_kind", s.eval_scenes_per_kind);
  ds.finish();

  auto vo = section("vocab");
  vo.read("size", s.vocab_size);
  vo.finish();

  auto mo = section("model");
  std::string condition(flownet::to_string(s.model.condition));
  mo.read("condition", condition);
  auto ct = flownet::condition_from_string(condition);
  if (!ct) throw ConfigError("model.condition: unknown type '" + condition + "' (anchor, goal, command, none)");
  s.model.condition = *ct;
  mo.read("embed_dim", s.model.embed_dim);
  mo.read("hidden_dim", s.model.hidden_dim);
  mo.read("tau_star", s.model.tau_star);
  mo.read("eps_max", s.model.eps_max);
  mo.read("frequency_base", s.model.frequency_base);
  mo.read("noise_scale", s.model.noise_scale);
  mo.read("position_scale", s.model.position_scale);
  mo.read("velocity_scale", s.model.velocity_scale);
  mo.finish();

  auto tr = section("train");
  tr.read("epochs", s.train.epochs);
  tr.read("lr", s.train.lr);
  tr.read("lr_min_ratio", s.train.lr_min_ratio);
  tr.read("batch", s.train.batch);
  tr.read("mask_rate", s.train.mask_rate);
  tr.read("rfe", s.train.rfe);
  tr.read("w_rfe", s.train.w_rfe);
  tr.read("rfe_steps", s.train.rfe_steps);
  tr.read("rfe_start_epoch", s.train.rfe_start_epoch);
  tr.read("energy_dt", s.train.energy_dt);
  tr.finish();

  auto sa = section("sampler");
  auto& sc = s.eval.sampler;
  sa.read("steps", sc.steps);
  sa.read("truncation_step", sc.truncation_step);
  sa.read("lambda", sc.lambda);
  sa.read("gamma", sc.gamma);
  sa.read("refine_steps", sc.refine_steps);
  sa.read("eta_scale", sc.eta_scale);
  std::string sign = "reflect";
  sa.read("cvf_sign", sign);
  if (sign != "reflect" && sign != "attract") throw ConfigError("sampler.cvf_sign: expected 'reflect' or 'attract'");
  sc.cvf_sign = sign == "reflect" ? sampler::CvfSign::reflect : sampler::CvfSign::attract;
  sa.read("langevin", sc.langevin_noise);
  rs.sampler_seed_set = sa.has("seed");
  sa.read("seed", sc.seed);
  sa.finish();

  auto ev = section("eval");
  std::string strategy = "seeded";
  ev.read("strategy", strategy);
  if (strategy != "seeded" && strategy != "multimodal") {
    throw ConfigError("eval.strategy: expected 'seeded' or 'multimodal'");
  }
  s.eval.strategy = strategy == "seeded" ? harness::SampleStrategy::seeded : harness::SampleStrategy::multimodal;
  ev.read("samples_per_scene", s.eval.samples_per_scene);
  ev.read("ras_reward", s.ras_reward);
  ev.finish();

  auto md = section("modules");
  md.read("cvf", s.modules.cvf);
  md.read("cf", s.modules.cf);
  md.read("rfe", s.modules.rfe);
  md.read("ras", s.modules.ras);
  md.finish();

  auto pa = section("paths");
  pa.read("dataset", rs.paths.dataset);
  pa.read("eval_dataset", rs.paths.eval_dataset);
  pa.read("vocab", rs.paths.vocab);
  pa.read("checkpoint", rs.paths.checkpoint);
  pa.read("rfe_checkpoint", rs.paths.rfe_checkpoint);
  pa.read("path", rs.paths.path);
  pa.finish();

  auto exs = section("export");
  std::string format = "csv";
  exs.read("format", format);
  if (format != "csv" && format != "jsonl") throw ConfigError("export.format: expected 'csv' or 'jsonl'");
  rs.export_format = format == "csv" ? ExportFormat::csv : ExportFormat::jsonl;
  exs.finish();

  auto sm = section("sample");
  sm.read("scenes", rs.sample_scenes);
  sm.finish();

  // Cross-field checks up front, before any command has side effects.
  s.train.validate();
  sc.validate();
  s.model.validate();
  if (s.vocab_size == 0) throw ConfigError("vocab.size must be >= 1");
  if (s.eval.samples_per_scene == 0) throw ConfigError("eval.samples_per_scene must be >= 1");
  return rs;
}

inline RunSettings load_config(const std::filesystem::path& path) {
  try {
    return parse_config(toml::parse_file(path.string()));
  } catch (const toml::parse_error& e) {
    throw ParseError(path.string() + ":" + std::to_string(e.source().begin.line) + ": " + std::string(e.description()));
  }
}

}  // namespace cfmplan::cli
