#pragma once

#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfmplan/harness/evaluate.hpp"
#include "cfmplan/hash.hpp"

namespace cfmplan::harness {

struct ModuleToggles {
  bool cvf = false;
  bool cf = false;
  bool rfe = false;
  bool ras = false;

  [[nodiscard]] std::string label() const {
    std::string s;
    auto add = [&](bool on, const char* name) {
      if (!on) return;
      if (!s.empty()) s += '+';
      s += name;
    };
    add(cvf, "CVF");
    add(cf, "CF");
    add(rfe, "RFE");
    add(ras, "RAS");
    return s.empty() ? "none" : s;
  }
};

/// Everything that determines a run.
struct ExperimentSpec {
  std::string name = "base";
  std::uint64_t seed = 0;
  std::map<scenario::ScenarioKind, std::size_t> train_scenes;
  std::size_t eval_scenes_per_kind = 20;
  std::size_t vocab_size = 16;
  flownet::ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  double ras_reward = 1.0;
  ModuleToggles modules;

  [[nodiscard]] scenario::DatasetConfig train_dataset() const { return {train_scenes, seed}; }

  /// Held-out scenes: same kinds, independent seed stream.
  [[nodiscard]] scenario::DatasetConfig eval_dataset() const {
    scenario::DatasetConfig d{{}, derive_seed(seed, SeedStream::eval)};
    for (const auto& [kind, n] : train_scenes)
      if (n > 0) d.counts[kind] = eval_scenes_per_kind;
    return d;
  }

  /// Evaluation settings with the module toggles applied.
  [[nodiscard]] EvalConfig eval_config() const {
    EvalConfig e = eval;
    e.sampler.cvf_enabled = modules.cvf;
    e.sampler.cf_enabled = modules.cf;
    e.sampler.rfe_enabled = modules.rfe;
    e.reward = modules.ras ? std::optional<double>(ras_reward) : std::nullopt;
    return e;
  }
};

inline std::string_view to_string(SampleStrategy s) { return s == SampleStrategy::seeded ? "seeded" : "multimodal"; }
inline std::string_view to_string(sampler::CvfSign s) { return s == sampler::CvfSign::reflect ? "reflect" : "attract"; }

inline nlohmann::json spec_json(const ExperimentSpec& s) {
  nlohmann::json scenes = nlohmann::json::object();
  for (const auto& [kind, n] : s.train_scenes) scenes[std::string(scenario::to_string(kind))] = n;
  const auto& sc = s.eval.sampler;
  return {
      {"name", s.name},
      {"seed", s.seed},
      {"dataset", {{"scenes", scenes}, {"eval_scenes_per_kind", s.eval_scenes_per_kind}}},
      {"vocab", {{"size", s.vocab_size}}},
      {"model", flownet::config_json(s.model)},
      {"train",
       {{"epochs", s.train.epochs},
        {"lr", s.train.lr},
        {"lr_min_ratio", s.train.lr_min_ratio},
        {"batch", s.train.batch},
        {"mask_rate", s.train.mask_rate},
        {"rfe", s.train.rfe},
        {"w_rfe", s.train.w_rfe},
        {"rfe_steps", s.train.rfe_steps},
        {"rfe_start_epoch", s.train.rfe_start_epoch},
        {"energy_dt", s.train.energy_dt}}},
      {"sampler",
       {{"steps", sc.steps},
        {"truncation_step", sc.truncation_step},
        {"lambda", sc.lambda},
        {"gamma", sc.gamma},
        {"refine_steps", sc.refine_steps},
        {"eta_scale", sc.eta_scale},
        {"cvf_sign", std::string(to_string(sc.cvf_sign))},
        {"langevin", sc.langevin_noise},
        {"seed", sc.seed}}},
      {"eval",
       {{"strategy", std::string(to_string(s.eval.strategy))},
        {"samples_per_scene", s.eval.samples_per_scene},
        {"ras_reward", s.ras_reward}}},
      {"modules", {{"cvf", s.modules.cvf}, {"cf", s.modules.cf}, {"rfe", s.modules.rfe}, {"ras", s.modules.ras}}},
  };
}

/// Short content hash of the canonical spec echo; carried by result file names.
inline std::string spec_hash(const ExperimentSpec& s) { return sha1_hex(spec_json(s).dump()).substr(0, 12); }

inline nlohmann::json metrics_json(const Metrics& m) {
  nlohmann::json modes = nlohmann::json::object();
  for (const auto& [mode, f] : m.mode_coverage) modes[std::to_string(mode)] = f;
  return {{"collision_1s", m.collision[0]},
          {"collision_2s", m.collision[1]},
          {"collision_3s", m.collision[2]},
          {"collision_avg", m.collision_avg},
          {"road_compliance", m.road_compliance},
          {"ep_mean", m.ep_mean},
          {"composite", m.composite},
          {"mode_coverage", modes},
          {"scenes", m.scenes},
          {"samples", m.samples}};
}

// ---------------------------------------------------------------------------
// Ablation grid and hyperparameter sweeps.

struct AblationRow {
  std::string group;  // "modules", "lambda", "k_c" or "K"
  ModuleToggles modules;
  sampler::SamplerConfig sampler;
  Metrics metrics;
};

struct AblationPlan {
  std::vector<ModuleToggles> grid;
  std::vector<double> lambdas;
  std::vector<std::size_t> truncation_steps;
  std::vector<std::size_t> step_counts;

  /// Module grid {none, CVF, CF, RFE, CF+RFE, CF+RFE+RAS} and the full sweeps.
  static AblationPlan standard() {
    return {{{}, {true, false, false, false}, {false, true, false, false}, {false, false, true, false},
             {false, true, true, false}, {false, true, true, true}},
            {0.1, 0.2, 0.3, 0.4, 0.5},
            {10, 20, 30, 40, 50},
            {100, 50, 25, 10}};
  }
};

struct AblationModels {
  const VelocityModel* rf = nullptr;
  const VelocityModel* rfe = nullptr;  // used by rows with RFE on; falls back to rf
};

inline Metrics run_configuration(const AblationModels& models, const std::vector<SceneGroup>& scenes,
                                 const vocab::AnchorVocab& vocab, EvalConfig eval, const ModuleToggles& t,
                                 double ras_reward) {
  eval.sampler.cvf_enabled = t.cvf;
  eval.sampler.cf_enabled = t.cf;
  eval.sampler.rfe_enabled = t.rfe;
  eval.reward = t.ras ? std::optional<double>(ras_reward) : std::nullopt;
  const VelocityModel& m = t.rfe && models.rfe ? *models.rfe : *models.rf;
  return evaluate(m, scenes, vocab, eval);
}

/// Rows of the module grid, then the lambda (CVF on), k_c (CF on) and K sweeps.
/// k_c values outside (0, K) are dropped.
inline std::vector<AblationRow> ablation_suite(const ExperimentSpec& spec, const AblationModels& models,
                                               const std::vector<SceneGroup>& scenes, const vocab::AnchorVocab& vocab,
                                               const AblationPlan& plan = AblationPlan::standard()) {
  if (!models.rf) throw ConfigError("ablation_suite: base checkpoint missing");
  std::vector<AblationRow> rows;
  auto run = [&](const std::string& group, const ModuleToggles& t, const sampler::SamplerConfig& sc) {
    EvalConfig e = spec.eval;
    e.sampler = sc;
    rows.push_back({group, t, sc, run_configuration(models, scenes, vocab, e, t, spec.ras_reward)});
  };
  for (const ModuleToggles& t : plan.grid) run("modules", t, spec.eval.sampler);
  for (double lambda : plan.lambdas) {
    auto sc = spec.eval.sampler;
    sc.lambda = lambda;
    run("lambda", {true, false, false, false}, sc);
  }
  for (std::size_t kc : plan.truncation_steps) {
    if (kc == 0 || kc >= spec.eval.sampler.steps) continue;  // needs 0 < k_c < K
    auto sc = spec.eval.sampler;
    sc.truncation_step = kc;
    run("k_c", {false, true, false, false}, sc);
  }
  for (std::size_t k : plan.step_counts) {
    auto sc = spec.eval.sampler;
    sc.steps = k;
    sc.truncation_step = std::min(sc.truncation_step, k / 2);
    run("K", {}, sc);
  }
  return rows;
}

namespace detail {
inline std::string fmt9(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}
}  // namespace detail

inline constexpr const char* kResultsHeader =
    "group,modules,cvf,cf,rfe,ras,lambda,k_c,K,collision_1s,collision_2s,collision_3s,collision_avg,road_compliance,"
    "ep_mean,composite\n";

inline std::string results_csv(const std::vector<AblationRow>& rows) {
  std::string out = kResultsHeader;
  for (const AblationRow& r : rows) {
    const Metrics& m = r.metrics;
    std::ostringstream line;
    line << r.group << ',' << r.modules.label() << ',' << r.modules.cvf << ',' << r.modules.cf << ',' << r.modules.rfe
         << ',' << r.modules.ras << ',' << detail::fmt9(r.sampler.lambda) << ',' << r.sampler.truncation_step << ','
         << r.sampler.steps;
    for (double v : {m.collision[0], m.collision[1], m.collision[2], m.collision_avg, m.road_compliance, m.ep_mean,
                     m.composite})
      line << ',' << detail::fmt9(v);
    out += line.str() + '\n';
  }
  return out;
}

inline nlohmann::json results_json(const ExperimentSpec& spec, const std::vector<AblationRow>& rows) {
  nlohmann::json j;
  j["spec"] = spec_json(spec);
  j["spec_hash"] = spec_hash(spec);
  j["rows"] = nlohmann::json::array();
  for (const AblationRow& r : rows) {
    j["rows"].push_back({{"group", r.group},
                         {"modules", r.modules.label()},
                         {"lambda", r.sampler.lambda},
                         {"k_c", r.sampler.truncation_step},
                         {"K", r.sampler.steps},
                         {"metrics", metrics_json(r.metrics)}});
  }
  return j;
}

/// Writes <stem>_<hash>.csv and <stem>_<hash>.json; returns both paths.
inline std::vector<std::filesystem::path> write_results(const std::filesystem::path& dir, const std::string& stem,
                                                        const ExperimentSpec& spec,
                                                        const std::vector<AblationRow>& rows) {
  const std::string base = stem + "_" + spec_hash(spec);
  const auto csv = dir / (base + ".csv");
  const auto json = dir / (base + ".json");
  diff::write_file(csv, results_csv(rows));
  diff::write_file(json, results_json(spec, rows).dump(2) + "\n");
  return {csv, json};
}

}  // namespace cfmplan::harness
