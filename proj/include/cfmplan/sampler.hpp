#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfmplan/flownet/losses.hpp"
#include "cfmplan/vocab.hpp"

namespace cfmplan::sampler {

using diff::Tensor2;
using flownet::ConditionSet;
using flownet::VelocityModel;
using scenario::Trajectory;
using vocab::ConstraintAnchor;

/// Direction semantics of the velocity correction.
/// `reflect`: v* = v - 2 lambda (<v, vc> / |vc|^2) vc.
/// `attract`: v* = v + 2 lambda (<v, vc> / |vc|^2) (vc - v).
enum class CvfSign { reflect, attract };

struct SamplerConfig {
  std::size_t steps = 100;        // K
  std::size_t truncation_step = 50;  // k_c
  double lambda = 0.1;
  double gamma = 1.5;
  std::size_t refine_steps = 20;  // R
  double eta_scale = 1.0;
  bool cvf_enabled = false;
  bool cf_enabled = false;
  bool rfe_enabled = false;
  CvfSign cvf_sign = CvfSign::reflect;
  bool langevin_noise = false;  // refinement noise sqrt(2 eta eps(t)); off for deterministic planning
  std::uint64_t seed = 0;

  void validate() const {
    if (steps == 0) throw ConfigError("sampler: K must be >= 1");
    if (!(truncation_step > 0 && truncation_step < steps)) {
      throw ConfigError("sampler: k_c must satisfy 0 < k_c < K (k_c=" + std::to_string(truncation_step) +
                        ", K=" + std::to_string(steps) + ")");
    }
    if (!(lambda >= 0.0 && lambda < 1.0)) throw ConfigError("sampler: lambda must lie in [0, 1)");
    if (gamma < 0.0) throw ConfigError("sampler: gamma must be >= 0");
    if (eta_scale < 0.0) throw ConfigError("sampler: eta scale must be >= 0");
  }

  [[nodiscard]] std::size_t active_refine_steps() const { return rfe_enabled ? refine_steps : 0; }
};

/// 0 before tau*, linear ramp to eps_max at t = 1, eps_max afterwards.
inline double epsilon_schedule(double t, double tau_star, double eps_max) {
  if (t < tau_star) return 0.0;
  if (t >= 1.0) return eps_max;
  return eps_max * (t - tau_star) / (1.0 - tau_star);
}

struct CvfResult {
  Tensor2 velocity;
  bool skipped = false;  // reference too small to define a direction
};

/// Global correction over the flattened T x 2 arrays.
inline CvfResult cvf_correct(const Tensor2& v, const Tensor2& vc, double lambda, CvfSign sign = CvfSign::reflect) {
  require_same_shape(v, vc, "cvf_correct");
  const double nc2 = diff::squared_norm(vc.data);
  if (std::sqrt(nc2) < 1e-9) return {v, true};
  const double coef = 2.0 * lambda * diff::dot(v.data, vc.data) / nc2;
  Tensor2 out = v;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data[i] = sign == CvfSign::reflect ? v.data[i] - coef * vc.data[i]
                                         : v.data[i] + coef * (vc.data[i] - v.data[i]);
  }
  return {std::move(out), false};
}

/// Straight-line velocity from the initial noise to the constraint anchor.
inline Tensor2 cvf_reference(const Tensor2& x0, const ConstraintAnchor& anchor) {
  require_same_shape(x0, anchor.trajectory.waypoints, "cvf_reference");
  Tensor2 out = anchor.trajectory.waypoints;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= x0.data[i];
  return out;
}

struct Truncation {
  std::size_t step = 0;
  Tensor2 anchor;
};

/// States x(0) .. x(K + R) with their flow times.
struct FlowPath {
  std::vector<Tensor2> states;
  std::vector<double> times;
  std::optional<Truncation> truncation;
  std::size_t cvf_skipped = 0;
};

struct SampleResult {
  Trajectory trajectory;
  FlowPath path;
};

inline void check_finite(const Tensor2& x, std::size_t step) {
  if (x.all_finite()) return;
  double mx = 0.0;
  for (double v : x.data) mx = std::max(mx, std::isfinite(v) ? std::abs(v) : INFINITY);
  throw SamplingError("sampling diverged at step " + std::to_string(step) + " (max |x| = " + std::to_string(mx) + ")");
}

/// Pluggable dynamics for the refinement phase.
struct RefinementField {
  std::function<Tensor2(const Tensor2& x, double t)> velocity;
  std::function<double(const Tensor2& x)> energy;
  std::function<Tensor2(const Tensor2& x)> energy_gradient;
};

/// Refinement field of a trained model on one scene.
inline RefinementField model_field(const VelocityModel& m, const flownet::SceneCache& cache, const ConditionSet& c,
                                   const scenario::Scene& scene, const SamplerConfig& cfg) {
  const double dt_ref = 1.0 / static_cast<double>(cfg.steps);
  return {
      [&m, &cache, c, gamma = cfg.gamma](const Tensor2& x, double t) {
        return flownet::cfg_velocity(m, x, t, cache, c, gamma);
      },
      [&m, &cache, c, &scene, dt_ref](const Tensor2& x) { return flownet::energy_value(m, x, cache, c, scene, dt_ref); },
      [&m, &cache, c, &scene, dt_ref](const Tensor2& x) {
        return flownet::energy_gradient(m, x, cache, c, scene, dt_ref).gradient;
      },
  };
}

/// One refinement update x + v dt - eta grad E (+ noise), eta = eta_scale * eps(t) * dt.
/// Without noise the energy step is halved until it does not raise E above the
/// transport-only point.
inline Tensor2 refine_step(const RefinementField& f, const Tensor2& x, double t, double dt, const SamplerConfig& cfg,
                           double tau_star, double eps_max, Rng* noise) {
  const Tensor2 v = f.velocity(x, t);
  Tensor2 moved = x;
  for (std::size_t i = 0; i < x.size(); ++i) moved.data[i] += v.data[i] * dt;
  const double eps = epsilon_schedule(t, tau_star, eps_max);
  double eta = cfg.eta_scale * eps * dt;
  if (eta == 0.0) return moved;
  const Tensor2 g = f.energy_gradient(x);
  auto step = [&](double e) {
    Tensor2 out = moved;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= e * g.data[i];
    return out;
  };
  if (noise) {
    Tensor2 out = step(eta);
    const double sd = std::sqrt(2.0 * eta * eps);
    for (double& xv : out.data) xv += sd * noise->normal();
    return out;
  }
  const double base = f.energy(moved);
  Tensor2 out = step(eta);
  for (int halvings = 0; halvings < 40 && f.energy(out) > base; ++halvings) {
    eta *= 0.5;
    out = step(eta);
  }
  return f.energy(out) > base ? moved : out;
}

/// Energy-descent phase alone from a given start, for t = 1, 1 + dt, ...
inline Tensor2 refine_only(const RefinementField& f, Tensor2 x, std::size_t r, const SamplerConfig& cfg, double tau_star,
                           double eps_max, Rng* noise = nullptr) {
  if (r == 0) throw ConfigError("refine_only: R must be >= 1");
  const double dt = 1.0 / static_cast<double>(cfg.steps);
  for (std::size_t k = 0; k < r; ++k) {
    x = refine_step(f, x, 1.0 + static_cast<double>(k) * dt, dt, cfg, tau_star, eps_max, noise);
    check_finite(x, cfg.steps + k + 1);
  }
  return x;
}

/// Euler transport over K steps with optional velocity correction (CVF), state
/// truncation at k_c (CF) and R energy-refinement steps past t = 1 (RFE).
inline SampleResult sample(const VelocityModel& m, const scenario::Scene& scene, const flownet::SceneCache& cache,
                           const ConditionSet& cond, const std::optional<ConstraintAnchor>& anchor,
                           const SamplerConfig& cfg) {
  cfg.validate();
  const auto& mc = m.config();
  if ((cfg.cvf_enabled || cfg.cf_enabled) && !anchor) {
    throw ConfigError("sample: CVF/CF enabled without a constraint anchor");
  }
  if ((cfg.cvf_enabled || cfg.cf_enabled) && anchor->infeasible_best) {
    throw ConfigError("sample: constraint anchor is flagged infeasible; disable CVF/CF for this scene");
  }
  Rng rng(cfg.seed);
  const double dt = 1.0 / static_cast<double>(cfg.steps);
  FlowPath path;
  Tensor2 x = flownet::draw_noise(mc, rng);
  path.states.push_back(x);
  path.times.push_back(0.0);
  Tensor2 vc;
  if (cfg.cvf_enabled) vc = cvf_reference(path.states.front(), *anchor);

  for (std::size_t k = 0; k < cfg.steps; ++k) {
    const double t = static_cast<double>(k) * dt;
    if (cfg.cf_enabled && k == cfg.truncation_step) {
      x = anchor->trajectory.waypoints;
      path.states[k] = x;
      path.truncation = Truncation{k, x};
    }
    Tensor2 v = flownet::cfg_velocity(m, x, t, cache, cond, cfg.gamma);
    if (cfg.cvf_enabled) {
      auto corrected = cvf_correct(v, vc, cfg.lambda, cfg.cvf_sign);
      path.cvf_skipped += corrected.skipped ? 1 : 0;
      v = std::move(corrected.velocity);
    }
    for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += v.data[i] * dt;
    check_finite(x, k + 1);
    path.states.push_back(x);
    path.times.push_back(static_cast<double>(k + 1) * dt);
  }

  const std::size_t r = cfg.active_refine_steps();
  if (r > 0) {
    const RefinementField f = model_field(m, cache, cond, scene, cfg);
    Rng noise(derive_seed(cfg.seed, SeedStream::sampler));
    for (std::size_t k = 0; k < r; ++k) {
      const double t = 1.0 + static_cast<double>(k) * dt;
      x = refine_step(f, x, t, dt, cfg, mc.tau_star, mc.eps_max, cfg.langevin_noise ? &noise : nullptr);
      check_finite(x, cfg.steps + k + 1);
      path.states.push_back(x);
      path.times.push_back(t + dt);
    }
  }
  return {Trajectory(x, mc.dt), std::move(path)};
}

inline SampleResult sample(const VelocityModel& m, const scenario::Scene& scene, const ConditionSet& cond,
                           const std::optional<ConstraintAnchor>& anchor, const SamplerConfig& cfg) {
  const auto cache = flownet::make_scene_cache(m, scenario::scene_tokens(scene));
  return sample(m, scene, cache, cond, anchor, cfg);
}

/// Conditions for a given vocabulary anchor under the model's intent type.
inline ConditionSet anchor_conditions(flownet::ConditionType type, const Trajectory& anchor,
                                      std::optional<double> reward) {
  ConditionSet c;
  switch (type) {
    case flownet::ConditionType::anchor: c.plan_anchor = anchor; break;
    case flownet::ConditionType::goal: c.goal = vocab::goal_from_anchor(anchor); break;
    case flownet::ConditionType::command: c.command = flownet::command_from_trajectory(anchor); break;
    case flownet::ConditionType::none: c.intent_mask = true; break;
  }
  c.reward = reward;
  c.reward_mask = !reward.has_value();
  return c;
}

struct MultimodalSample {
  Trajectory trajectory;
  std::size_t anchor_index = 0;
};

/// One sample per vocabulary anchor with seeds split from cfg.seed. CVF/CF use the
/// scene's constraint anchor and are skipped when that anchor is flagged infeasible.
inline std::vector<MultimodalSample> sample_multimodal(const VelocityModel& m, const scenario::Scene& scene,
                                                       const vocab::AnchorVocab& vocab, const SamplerConfig& cfg,
                                                       std::optional<double> reward = std::nullopt) {
  if (vocab.empty()) throw ConfigError("sample_multimodal: empty vocabulary");
  const auto cache = flownet::make_scene_cache(m, scenario::scene_tokens(scene));
  std::optional<ConstraintAnchor> ca;
  SamplerConfig run = cfg;
  if (cfg.cvf_enabled || cfg.cf_enabled) {
    ca = vocab::select_constraint_anchor(vocab, scene);
    if (ca->infeasible_best) run.cvf_enabled = run.cf_enabled = false;
  }
  std::vector<MultimodalSample> out;
  out.reserve(vocab.size());
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    run.seed = derive_seed(cfg.seed, i);
    auto cond = anchor_conditions(m.config().condition, vocab[i], reward);
    out.push_back({sample(m, scene, cache, cond, ca, run).trajectory, i});
  }
  return out;
}

// ---------------------------------------------------------------------------
// FlowPath export: JSON-lines, one state per record {"step", "t", "waypoints"}.

inline std::string encode_path(const FlowPath& path) {
  std::string out;
  for (std::size_t k = 0; k < path.states.size(); ++k) {
    nlohmann::json j;
    j["step"] = k;
    j["t"] = path.times[k];
    j["waypoints"] = path.states[k].data;
    out += j.dump();
    out += '\n';
  }
  return out;
}

struct PathRecord {
  std::size_t step = 0;
  double t = 0.0;
  std::vector<double> waypoints;
};

inline std::vector<PathRecord> decode_path(const std::string& text) {
  std::vector<PathRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      PathRecord r{j.at("step").get<std::size_t>(), j.at("t").get<double>(), j.at("waypoints").get<std::vector<double>>()};
      if (r.waypoints.empty() || r.waypoints.size() % 2 != 0) throw ParseError("waypoints must hold x, y pairs");
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw ParseError("path line " + std::to_string(n) + ": " + e.what());
    }
  }
  if (out.empty()) throw ParseError("path file holds no states");
  return out;
}

}  // namespace cfmplan::sampler
