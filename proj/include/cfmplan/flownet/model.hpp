#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

#include "cfmplan/diffcore.hpp"
#include "cfmplan/scenario/tokens.hpp"
#include "cfmplan/scenario/types.hpp"

namespace cfmplan::flownet {

using diff::Tape;
using diff::Tensor2;
using diff::Var;
using scenario::Trajectory;

/// Which intent signal the model is trained with. Only one is active per model.
enum class ConditionType { anchor, goal, command, none };

inline std::string_view to_string(ConditionType c) {
  switch (c) {
    case ConditionType::anchor: return "anchor";
    case ConditionType::goal: return "goal";
    case ConditionType::command: return "command";
    case ConditionType::none: return "none";
  }
  return "?";
}

inline std::optional<ConditionType> condition_from_string(std::string_view s) {
  for (auto c : {ConditionType::anchor, ConditionType::goal, ConditionType::command, ConditionType::none})
    if (to_string(c) == s) return c;
  return std::nullopt;
}

enum class Command : std::size_t { left = 0, straight = 1, right = 2 };

/// Command implied by a trajectory's lateral offset at the horizon.
inline Command command_from_trajectory(const Trajectory& t) {
  const double y = t.final_point().y;
  if (y > 2.0) return Command::left;
  if (y < -2.0) return Command::right;
  return Command::straight;
}

struct ModelConfig {
  std::size_t horizon = 8;
  double dt = 0.5;
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 256;  // encoder / decoder MLP width
  ConditionType condition = ConditionType::anchor;
  double tau_star = 0.8;
  double eps_max = 0.5;
  double frequency_base = 1000.0;
  double noise_scale = 16.0;     // m, prior x0 ~ N(0, noise_scale^2 I)
  double position_scale = 16.0;  // m, network input normalization
  double velocity_scale = 16.0;  // decoder output multiplier
  std::uint64_t init_seed = 0;

  [[nodiscard]] std::size_t state_dim() const { return 2 * horizon; }

  void validate() const {
    if (horizon == 0) throw ConfigError("horizon must be >= 1");
    if (embed_dim == 0 || embed_dim % 2 != 0) throw ConfigError("embed_dim must be even and positive");
    if (hidden_dim == 0) throw ConfigError("hidden_dim must be >= 1");
    if (!(tau_star >= 0.0 && tau_star < 1.0)) throw ConfigError("tau_star must lie in [0, 1)");
    if (!(eps_max > 0.0)) throw ConfigError("eps_max must be positive");
    if (!(noise_scale > 0.0 && position_scale > 0.0 && velocity_scale > 0.0)) {
      throw ConfigError("noise, position and velocity scales must be positive");
    }
    if (!(frequency_base > 0.0)) throw ConfigError("frequency_base must be positive");
  }
};

/// Optional conditioning groups plus the classifier-free masks.
///
/// The intent group carries whichever of plan_anchor / goal / command the
/// model's ConditionType selects; a set mask replaces the group by its learned
/// null embedding so the stored values are ignored.
struct ConditionSet {
  std::optional<Trajectory> plan_anchor;
  std::optional<scenario::Vec2> goal;
  std::optional<Command> command;
  std::optional<double> reward;
  bool intent_mask = false;
  bool reward_mask = false;

  [[nodiscard]] ConditionSet masked() const {
    ConditionSet c = *this;
    c.intent_mask = true;
    c.reward_mask = true;
    return c;
  }
};

/// Conditioned velocity field v(x_t, t, c).
class VelocityModel {
 public:
  explicit VelocityModel(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(cfg_.init_seed, SeedStream::init));
    const std::size_t e = cfg_.embed_dim;
    const std::size_t f = scenario::kTokenFeatures;
    const std::size_t hid = cfg_.hidden_dim;
    diff::add_dense(params_, "enc1", cfg_.state_dim(), hid, rng);
    diff::add_dense(params_, "enc2", hid, e, rng);
    diff::add_dense(params_, "time", e, e, rng);
    diff::add_dense(params_, "agent_embed", f, e, rng);
    diff::add_dense(params_, "map_embed", f, e, rng);
    params_.add("agent_null", diff::kaiming_uniform(1, e, rng));
    diff::add_attention(params_, "attn_agent", e, rng);
    diff::add_attention(params_, "attn_map", e, rng);
    switch (cfg_.condition) {
      case ConditionType::anchor: diff::add_dense(params_, "cond_anchor", cfg_.state_dim(), e, rng); break;
      case ConditionType::goal: diff::add_dense(params_, "cond_goal", 2, e, rng); break;
      case ConditionType::command: params_.add("cond_command", diff::kaiming_uniform(3, e, rng)); break;
      case ConditionType::none: break;
    }
    diff::add_dense(params_, "cond_reward", 1, e, rng);
    params_.add("intent_null", diff::kaiming_uniform(1, e, rng));
    params_.add("reward_null", diff::kaiming_uniform(1, e, rng));
    diff::add_attention(params_, "fuse", e, rng);
    diff::add_dense(params_, "dec1", e, hid, rng);
    diff::add_dense(params_, "dec2", hid, cfg_.state_dim(), rng, /*zero=*/true);
  }

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  [[nodiscard]] const diff::ParamStore& params() const { return params_; }
  diff::ParamStore& params() { return params_; }

 private:
  ModelConfig cfg_;
  diff::ParamStore params_;
};

// ---------------------------------------------------------------------------
// Forward pieces. `Store` is ParamStore (training) or const ParamStore (inference).

template <class Store>
Var encode_state(Tape& t, Store& p, const ModelConfig& cfg, Var x, double time) {
  const Tensor2& xv = t.value(x);
  if (xv.size() != cfg.state_dim()) {
    throw DimensionError("encode_state: state " + xv.shape() + " vs horizon " + std::to_string(cfg.horizon));
  }
  Var xin = t.value(x).rows == 1 ? x : diff::reshape(t, x, 1, cfg.state_dim());
  xin = diff::scale(t, xin, 1.0 / cfg.position_scale);
  Var h = diff::dense(t, xin, diff::dense_params(t, p, "enc1"), diff::Activation::gelu);
  h = diff::dense(t, h, diff::dense_params(t, p, "enc2"), diff::Activation::identity);
  const auto emb = diff::sinusoidal_embed(time, {cfg.embed_dim, cfg.frequency_base});
  Var te = diff::dense(t, t.constant(Tensor2::row_vector(emb)), diff::dense_params(t, p, "time"),
                       diff::Activation::identity);
  return diff::add(t, h, te);
}

/// Embedded scene tokens with per-block projected keys and values.
struct SceneKeys {
  diff::KeyValues agent;
  diff::KeyValues map;
};

template <class Store>
SceneKeys encode_scene(Tape& t, Store& p, const scenario::SceneTokens& tokens) {
  Var agents = tokens.null_agent
                   ? t.param(p, "agent_null")
                   : diff::dense(t, t.constant_ref(tokens.agents), diff::dense_params(t, p, "agent_embed"),
                                 diff::Activation::identity);
  if (tokens.map.rows == 0) throw DimensionError("encode_scene: scene has no map tokens");
  Var map = diff::dense(t, t.constant_ref(tokens.map), diff::dense_params(t, p, "map_embed"), diff::Activation::identity);
  return {diff::project_keys_values(t, agents, diff::attention_params(t, p, "attn_agent")),
          diff::project_keys_values(t, map, diff::attention_params(t, p, "attn_map"))};
}

/// Projected keys/values evaluated once per scene for repeated inference.
struct SceneCache {
  Tensor2 agent_keys, agent_values, map_keys, map_values;
};

inline SceneCache make_scene_cache(const VelocityModel& m, const scenario::SceneTokens& tokens) {
  Tape t(diff::GradMode::none);
  SceneKeys k = encode_scene(t, m.params(), tokens);
  return {t.value(k.agent.keys), t.value(k.agent.values), t.value(k.map.keys), t.value(k.map.values)};
}

inline SceneKeys bind(Tape& t, const SceneCache& c) {
  return {{t.constant_ref(c.agent_keys), t.constant_ref(c.agent_values)},
          {t.constant_ref(c.map_keys), t.constant_ref(c.map_values)}};
}

template <class Store>
Var intent_token(Tape& t, Store& p, const ModelConfig& cfg, const ConditionSet& c) {
  if (c.intent_mask || cfg.condition == ConditionType::none) return t.param(p, "intent_null");
  const bool has_anchor = c.plan_anchor.has_value();
  const bool has_goal = c.goal.has_value();
  const bool has_command = c.command.has_value();
  if (has_anchor + has_goal + has_command > 1) {
    throw ConfigError("condition_fuse: plan anchor, goal and command are mutually exclusive");
  }
  switch (cfg.condition) {
    case ConditionType::anchor: {
      if (!has_anchor) throw ConfigError("condition_fuse: anchor-conditioned model needs a plan anchor");
      const Tensor2& a = c.plan_anchor->waypoints;
      if (a.size() != cfg.state_dim()) throw DimensionError("condition_fuse: anchor " + a.shape());
      Tensor2 flat(1, a.size(), a.data);
      for (double& v : flat.data) v /= cfg.position_scale;
      return diff::dense(t, t.constant(std::move(flat)), diff::dense_params(t, p, "cond_anchor"),
                         diff::Activation::identity);
    }
    case ConditionType::goal: {
      if (!has_goal) throw ConfigError("condition_fuse: goal-conditioned model needs a goal point");
      Tensor2 g(1, 2, {c.goal->x / cfg.position_scale, c.goal->y / cfg.position_scale});
      return diff::dense(t, t.constant(std::move(g)), diff::dense_params(t, p, "cond_goal"), diff::Activation::identity);
    }
    case ConditionType::command: {
      if (!has_command) throw ConfigError("condition_fuse: command-conditioned model needs a command");
      Tensor2 onehot(1, 3);
      onehot.data[static_cast<std::size_t>(*c.command)] = 1.0;
      return diff::matmul(t, t.constant(std::move(onehot)), t.param(p, "cond_command"));
    }
    case ConditionType::none: break;
  }
  return t.param(p, "intent_null");
}

template <class Store>
Var reward_token(Tape& t, Store& p, const ConditionSet& c) {
  if (c.reward_mask) return t.param(p, "reward_null");
  if (!c.reward) throw ConfigError("condition_fuse: unmasked reward group without a reward value");
  return diff::dense(t, t.constant(Tensor2(1, 1, {*c.reward})), diff::dense_params(t, p, "cond_reward"),
                     diff::Activation::identity);
}

/// Cross-attention of the hidden state over [intent token; reward token].
template <class Store>
Var condition_fuse(Tape& t, Store& p, const ModelConfig& cfg, Var hidden, const ConditionSet& c) {
  Var tokens = diff::concat_rows(t, {intent_token(t, p, cfg, c), reward_token(t, p, c)});
  return diff::cross_attention(t, hidden, tokens, diff::attention_params(t, p, "fuse")).out;
}

/// v(x, t, c) as a 1 x 2T row: encode, attend agents, attend map, fuse conditions, decode.
template <class Store>
Var velocity(Tape& t, Store& p, const ModelConfig& cfg, Var x, double time, const SceneKeys& scene,
             const ConditionSet& c) {
  Var h = encode_state(t, p, cfg, x, time);
  h = diff::attend(t, h, scene.agent, diff::attention_params(t, p, "attn_agent")).out;
  h = diff::attend(t, h, scene.map, diff::attention_params(t, p, "attn_map")).out;
  h = condition_fuse(t, p, cfg, h, c);
  h = diff::dense(t, h, diff::dense_params(t, p, "dec1"), diff::Activation::gelu);
  Var out = diff::dense(t, h, diff::dense_params(t, p, "dec2"), diff::Activation::identity);
  return diff::scale(t, out, cfg.velocity_scale);
}

/// (1 - gamma) v(x, t, masked) + gamma v(x, t, c).
template <class Store>
Var cfg_velocity(Tape& t, Store& p, const ModelConfig& cfg, Var x, double time, const SceneKeys& scene,
                 const ConditionSet& c, double gamma) {
  if (gamma < 0.0) throw ConfigError("cfg_velocity: guidance scale must be >= 0");
  Var vu = velocity(t, p, cfg, x, time, scene, c.masked());
  Var vc = velocity(t, p, cfg, x, time, scene, c);
  return diff::add(t, diff::scale(t, vu, 1.0 - gamma), diff::scale(t, vc, gamma));
}

// ---------------------------------------------------------------------------
// Eager inference helpers on T x 2 states.

inline Tensor2 as_row(const Tensor2& x) { return Tensor2(1, x.size(), x.data); }
inline Tensor2 as_waypoints(const Tensor2& row) { return Tensor2(row.size() / 2, 2, row.data); }

/// T x 2 draw from the model's prior.
inline Tensor2 draw_noise(const ModelConfig& cfg, Rng& rng) {
  Tensor2 x(cfg.horizon, 2);
  for (double& v : x.data) v = cfg.noise_scale * rng.normal();
  return x;
}

inline Tensor2 velocity(const VelocityModel& m, const Tensor2& x, double time, const SceneCache& scene,
                        const ConditionSet& c) {
  Tape t(diff::GradMode::none);
  Var v = velocity(t, m.params(), m.config(), t.constant(as_row(x)), time, bind(t, scene), c);
  return as_waypoints(t.value(v));
}

inline Tensor2 cfg_velocity(const VelocityModel& m, const Tensor2& x, double time, const SceneCache& scene,
                            const ConditionSet& c, double gamma) {
  Tape t(diff::GradMode::none);
  Var v = cfg_velocity(t, m.params(), m.config(), t.constant(as_row(x)), time, bind(t, scene), c, gamma);
  return as_waypoints(t.value(v));
}

}  // namespace cfmplan::flownet
