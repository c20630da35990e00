#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "cfmplan/harness/train.hpp"
#include "cfmplan/parallel.hpp"

namespace cfmplan::harness {

using scenario::SceneGroup;
using scenario::Trajectory;

/// Waypoint prefixes for the 1 s / 2 s / 3 s collision horizons at dt = 0.5.
inline constexpr std::array<std::size_t, 3> kHorizonSteps{2, 4, 6};

struct Metrics {
  std::array<double, 3> collision{};  // 1 s, 2 s, 3 s
  double collision_avg = 0.0;
  double road_compliance = 0.0;
  std::map<std::size_t, double> mode_coverage;  // expert mode -> frequency on fork scenes
  double ep_mean = 0.0;
  double composite = 0.0;
  std::size_t scenes = 0;
  std::size_t samples = 0;
};

/// Geometric mean of (1 - collision), road compliance and EP.
inline double composite_score(double collision_avg, double road, double ep) {
  return std::cbrt(std::max(0.0, 1.0 - collision_avg) * road * ep);
}

/// Index into `experts` of the nearest expert in flattened L2.
inline std::size_t nearest_expert(const std::vector<Record>& experts, const Trajectory& t) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < experts.size(); ++i) {
    const double d = vocab::squared_distance(experts[i].trajectory, t);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

inline double distance_to_nearest_mode(const std::vector<Record>& experts, const Trajectory& t) {
  return std::sqrt(vocab::squared_distance(experts[nearest_expert(experts, t)].trajectory, t));
}

/// Metrics of given planner outputs, samples[s] belonging to scenes[s]. Rates are
/// averaged within a scene, then across scenes in scene order.
inline Metrics evaluate_trajectories(const std::vector<SceneGroup>& scenes,
                                     const std::vector<std::vector<Trajectory>>& samples,
                                     const scenario::Limits& lim = scenario::default_limits()) {
  if (scenes.size() != samples.size()) {
    throw DimensionError("evaluate: " + std::to_string(samples.size()) + " sample sets for " +
                         std::to_string(scenes.size()) + " scenes");
  }
  if (scenes.empty()) throw ConfigError("evaluate: no scenes");
  Metrics m;
  std::map<std::size_t, std::size_t> mode_counts;
  std::size_t assigned = 0;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto& set = samples[s];
    if (set.empty()) throw ConfigError("evaluate: scene " + std::to_string(s) + " has no samples");
    std::array<double, 3> col{};
    double road = 0.0, ep = 0.0;
    for (const Trajectory& t : set) {
      for (std::size_t h = 0; h < kHorizonSteps.size(); ++h) {
        col[h] += scenario::hard_collision(t, scenes[s].scene, kHorizonSteps[h], lim) ? 1.0 : 0.0;
      }
      road += scenario::road_compliant(t, scenes[s].scene) ? 1.0 : 0.0;
      ep += scenario::ep_reward(t, scenes[s].scene, lim);
      if (scenes[s].scene.kind == scenario::ScenarioKind::fork && !scenes[s].experts.empty()) {
        ++mode_counts[scenes[s].experts[nearest_expert(scenes[s].experts, t)].mode];
        ++assigned;
      }
    }
    const double n = static_cast<double>(set.size());
    for (std::size_t h = 0; h < 3; ++h) m.collision[h] += col[h] / n;
    m.road_compliance += road / n;
    m.ep_mean += ep / n;
    m.samples += set.size();
  }
  const double ns = static_cast<double>(scenes.size());
  for (double& c : m.collision) c /= ns;
  m.collision_avg = (m.collision[0] + m.collision[1] + m.collision[2]) / 3.0;
  m.road_compliance /= ns;
  m.ep_mean /= ns;
  for (const auto& [mode, count] : mode_counts) m.mode_coverage[mode] = static_cast<double>(count) / static_cast<double>(assigned);
  m.composite = composite_score(m.collision_avg, m.road_compliance, m.ep_mean);
  m.scenes = scenes.size();
  return m;
}

enum class SampleStrategy {
  multimodal,  // one sample per vocabulary anchor
  seeded,      // `samples_per_scene` seeds with the intent group masked
};

struct EvalConfig {
  sampler::SamplerConfig sampler;
  SampleStrategy strategy = SampleStrategy::seeded;
  std::size_t samples_per_scene = 8;
  std::optional<double> reward;  // reward condition (RAS); masked when empty
};

/// Planner samples for one scene under the evaluation protocol.
inline std::vector<Trajectory> plan_scene(const VelocityModel& m, const scenario::Scene& scene,
                                          const vocab::AnchorVocab& vocab, const EvalConfig& cfg,
                                          std::uint64_t scene_seed) {
  sampler::SamplerConfig sc = cfg.sampler;
  sc.seed = scene_seed;
  if (cfg.strategy == SampleStrategy::multimodal) {
    std::vector<Trajectory> out;
    for (auto& s : sampler::sample_multimodal(m, scene, vocab, sc, cfg.reward)) out.push_back(std::move(s.trajectory));
    return out;
  }
  const auto cache = flownet::make_scene_cache(m, scenario::scene_tokens(scene));
  std::optional<vocab::ConstraintAnchor> anchor;
  if (sc.cvf_enabled || sc.cf_enabled) {
    if (vocab.empty()) throw ConfigError("evaluate: CVF/CF need a vocabulary");
    anchor = vocab::select_constraint_anchor(vocab, scene);
    if (anchor->infeasible_best) sc.cvf_enabled = sc.cf_enabled = false;
  }
  ConditionSet c;
  c.intent_mask = true;
  c.reward = cfg.reward;
  c.reward_mask = !cfg.reward.has_value();
  std::vector<Trajectory> out;
  for (std::size_t i = 0; i < cfg.samples_per_scene; ++i) {
    sampler::SamplerConfig run = sc;
    run.seed = derive_seed(scene_seed, i);
    out.push_back(sampler::sample(m, scene, cache, c, anchor, run).trajectory);
  }
  return out;
}

/// Sample every scene (in parallel, reduced in scene order) and score the results.
inline std::vector<std::vector<Trajectory>> plan_scenes(const VelocityModel& m, const std::vector<SceneGroup>& scenes,
                                                        const vocab::AnchorVocab& vocab, const EvalConfig& cfg) {
  std::vector<std::vector<Trajectory>> samples(scenes.size());
  const std::uint64_t base = derive_seed(cfg.sampler.seed, SeedStream::eval);
  parallel_for(scenes.size(), [&](std::size_t s) { samples[s] = plan_scene(m, scenes[s].scene, vocab, cfg, derive_seed(base, s)); });
  return samples;
}

inline Metrics evaluate(const VelocityModel& m, const std::vector<SceneGroup>& scenes, const vocab::AnchorVocab& vocab,
                        const EvalConfig& cfg) {
  if (scenes.empty()) throw ConfigError("evaluate: no scenes");
  if (scenes.front().experts.front().trajectory.steps() != m.config().horizon) {
    throw DimensionError("evaluate: dataset horizon differs from the checkpoint's");
  }
  return evaluate_trajectories(scenes, plan_scenes(m, scenes, vocab, cfg));
}

/// Seeded Gaussian random walk from the ego at its current speed; a reference planner.
inline std::vector<std::vector<Trajectory>> random_walk_plans(const std::vector<SceneGroup>& scenes, std::size_t per_scene,
                                                               std::uint64_t seed, double step_sd = 1.5,
                                                               const scenario::Limits& lim = scenario::default_limits()) {
  Rng rng(derive_seed(seed, SeedStream::baseline));
  std::vector<std::vector<Trajectory>> out(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const double v = scenes[s].scene.ego.speed;
    for (std::size_t k = 0; k < per_scene; ++k) {
      Tensor2 w(lim.horizon, 2);
      scenario::Vec2 p{0.0, 0.0};
      for (std::size_t i = 0; i < lim.horizon; ++i) {
        p.x += v * lim.dt + step_sd * rng.normal();
        p.y += step_sd * rng.normal();
        w(i, 0) = p.x;
        w(i, 1) = p.y;
      }
      out[s].emplace_back(std::move(w), lim.dt);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mode-collapse report: flow samples vs the imitation baseline on fork scenes.

struct ModelModeStats {
  std::map<std::size_t, double> frequency;
  double mean_distance = 0.0;  // to the nearest expert mode, m
  bool collapsed = false;      // some expert mode below 5 %
};

struct ModeCollapseReport {
  ModelModeStats flow;
  ModelModeStats imitation;
  bool single_mode_data = false;
  std::string note;
};

inline constexpr double kCollapseThreshold = 0.05;

inline ModelModeStats mode_stats(const std::vector<SceneGroup>& scenes, const std::vector<std::vector<Trajectory>>& samples) {
  ModelModeStats out;
  std::map<std::size_t, std::size_t> counts;
  std::set<std::size_t> modes;
  std::size_t n = 0;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (const Record& e : scenes[s].experts) modes.insert(e.mode);
    for (const Trajectory& t : samples[s]) {
      ++counts[scenes[s].experts[nearest_expert(scenes[s].experts, t)].mode];
      out.mean_distance += distance_to_nearest_mode(scenes[s].experts, t);
      ++n;
    }
  }
  if (n == 0) throw ConfigError("mode_collapse_report: no samples");
  out.mean_distance /= static_cast<double>(n);
  for (std::size_t mode : modes) {
    out.frequency[mode] = static_cast<double>(counts[mode]) / static_cast<double>(n);
    out.collapsed = out.collapsed || (modes.size() > 1 && out.frequency[mode] < kCollapseThreshold);
  }
  return out;
}

inline ModeCollapseReport mode_collapse_report(const std::vector<SceneGroup>& forks,
                                               const std::vector<std::vector<Trajectory>>& flow_samples,
                                               const ImitationBaseline& baseline) {
  std::vector<std::vector<Trajectory>> imitation(forks.size());
  for (std::size_t s = 0; s < forks.size(); ++s) imitation[s].push_back(predict(baseline, forks[s].scene));
  ModeCollapseReport r{mode_stats(forks, flow_samples), mode_stats(forks, imitation), false, ""};
  std::set<std::size_t> modes;
  for (const auto& g : forks)
    for (const Record& e : g.experts) modes.insert(e.mode);
  if (modes.size() < 2) {
    r.single_mode_data = true;
    r.note = "dataset has a single expert mode; collapse cannot be assessed";
    r.flow.collapsed = r.imitation.collapsed = false;
  }
  return r;
}

}  // namespace cfmplan::harness
