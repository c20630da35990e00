#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "cfmplan/flownet/model.hpp"
#include "cfmplan/scenario/constraints.hpp"

namespace cfmplan::flownet {

/// Rectified-flow regression at x_t = (1 - t) x0 + t x1 against target x1 - x0,
/// averaged over waypoints and coordinates.
inline Var rf_loss(Tape& t, diff::ParamStore& p, const ModelConfig& cfg, const Tensor2& x0, const Tensor2& x1,
                   double time, const SceneKeys& scene, const ConditionSet& c) {
  require_same_shape(x0, x1, "rf_loss");
  Tensor2 xt(1, x0.size());
  Tensor2 target(1, x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    xt.data[i] = (1.0 - time) * x0.data[i] + time * x1.data[i];
    target.data[i] = x1.data[i] - x0.data[i];
  }
  Var v = velocity(t, p, cfg, t.constant(std::move(xt)), time, scene, c);
  return diff::mean(t, diff::square(t, diff::sub(t, v, t.constant(std::move(target)))));
}

/// Single-example loss with gradients accumulated into the model's store.
inline double rf_loss(VelocityModel& m, const Tensor2& x0, const Trajectory& x1, double time,
                      const scenario::SceneTokens& tokens, const ConditionSet& c) {
  Tape t(diff::GradMode::full);
  SceneKeys keys = encode_scene(t, m.params(), tokens);
  Var loss = rf_loss(t, m.params(), m.config(), x0, x1.waypoints, time, keys, c);
  t.backward(loss);
  return t.value(loss).data[0];
}

/// E(x) = || j(f(x)) - j(x) ||^2 with f(x) = x + v(x, 1, c) dt_ref, one self-refinement step.
/// `x` is a 1 x 2T node.
template <class Store>
Var energy(Tape& t, Store& p, const ModelConfig& cfg, Var x, const SceneKeys& keys, const ConditionSet& c,
           const scenario::Scene& scene, double dt_ref) {
  Var v = velocity(t, p, cfg, x, 1.0, keys, c);
  Var fx = diff::add(t, x, diff::scale(t, v, dt_ref));
  Var jf = scenario::constraint_vector(t, fx, scene, cfg.dt);
  Var jx = scenario::constraint_vector(t, x, scene, cfg.dt);
  return diff::sum(t, diff::square(t, diff::sub(t, jf, jx)));
}

struct EnergyGradient {
  double value = 0.0;
  Tensor2 gradient;  // T x 2
};

/// Energy and its gradient with respect to the state; parameters are read-only.
inline EnergyGradient energy_gradient(const VelocityModel& m, const Tensor2& x, const SceneCache& cache,
                                      const ConditionSet& c, const scenario::Scene& scene, double dt_ref) {
  Tape t(diff::GradMode::inputs_only);
  Var xin = t.input(as_row(x));
  Var e = energy(t, m.params(), m.config(), xin, bind(t, cache), c, scene, dt_ref);
  t.backward(e);
  return {t.value(e).data[0], as_waypoints(t.grad(xin))};
}

inline double energy_value(const VelocityModel& m, const Tensor2& x, const SceneCache& cache, const ConditionSet& c,
                           const scenario::Scene& scene, double dt_ref) {
  Tape t(diff::GradMode::none);
  Var e = energy(t, m.params(), m.config(), t.constant(as_row(x)), bind(t, cache), c, scene, dt_ref);
  return t.value(e).data[0];
}

/// E(x_generated) - E(x_target); the generated endpoint is a constant of the graph.
inline Var rfe_loss(Tape& t, diff::ParamStore& p, const ModelConfig& cfg, const Tensor2& generated,
                    const Tensor2& target, const SceneKeys& keys, const ConditionSet& c, const scenario::Scene& scene,
                    double dt_ref) {
  require_same_shape(generated, target, "rfe_loss");
  Var eg = energy(t, p, cfg, t.constant(as_row(generated)), keys, c, scene, dt_ref);
  Var et = energy(t, p, cfg, t.constant(as_row(target)), keys, c, scene, dt_ref);
  return diff::sub(t, eg, et);
}

inline double rfe_loss(VelocityModel& m, const Tensor2& generated, const Trajectory& target,
                       const scenario::SceneTokens& tokens, const ConditionSet& c, const scenario::Scene& scene,
                       double dt_ref) {
  Tape t(diff::GradMode::full);
  SceneKeys keys = encode_scene(t, m.params(), tokens);
  Var loss = rfe_loss(t, m.params(), m.config(), generated, target.waypoints, keys, c, scene, dt_ref);
  t.backward(loss);
  return t.value(loss).data[0];
}

// ---------------------------------------------------------------------------
// Checkpoint = block container (<path>) + hyperparameter sidecar (<path>.json).

inline nlohmann::json config_json(const ModelConfig& c) {
  return {{"format", 1},
          {"horizon", c.horizon},
          {"dt", c.dt},
          {"embed_dim", c.embed_dim},
          {"hidden_dim", c.hidden_dim},
          {"condition", std::string(to_string(c.condition))},
          {"tau_star", c.tau_star},
          {"eps_max", c.eps_max},
          {"frequency_base", c.frequency_base},
          {"noise_scale", c.noise_scale},
          {"position_scale", c.position_scale},
          {"velocity_scale", c.velocity_scale},
          {"init_seed", c.init_seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.horizon = j.at("horizon").get<std::size_t>();
  c.dt = j.at("dt").get<double>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  auto cond = condition_from_string(j.at("condition").get<std::string>());
  if (!cond) throw ParseError("unknown condition type '" + j.at("condition").get<std::string>() + "'");
  c.condition = *cond;
  c.tau_star = j.at("tau_star").get<double>();
  c.eps_max = j.at("eps_max").get<double>();
  c.frequency_base = j.at("frequency_base").get<double>();
  c.noise_scale = j.at("noise_scale").get<double>();
  c.position_scale = j.at("position_scale").get<double>();
  c.velocity_scale = j.at("velocity_scale").get<double>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  return c;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& ckpt) {
  auto p = ckpt;
  p += ".json";
  return p;
}

inline void save_model(const std::filesystem::path& path, const VelocityModel& m, const std::string& vocab_ref = "") {
  diff::write_blocks(path, diff::snapshot(m.params()));
  auto j = config_json(m.config());
  j["vocab"] = vocab_ref;
  diff::write_file(sidecar_path(path), j.dump(2) + "\n");
}

inline VelocityModel load_model(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError(path.string() + ": checkpoint not found");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(diff::read_file(sidecar_path(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(sidecar_path(path).string() + ": " + e.what());
  }
  VelocityModel m(config_from_json(j));
  diff::restore(m.params(), diff::read_blocks(path));
  return m;
}

}  // namespace cfmplan::flownet
