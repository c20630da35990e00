#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <vector>

#include "cfmplan/flownet/losses.hpp"
#include "cfmplan/sampler.hpp"
#include "cfmplan/scenario/dataset.hpp"
#include "cfmplan/vocab.hpp"

namespace cfmplan::harness {

using diff::Tape;
using diff::Tensor2;
using diff::Var;
using flownet::ConditionSet;
using flownet::ModelConfig;
using flownet::VelocityModel;
using scenario::Record;

struct TrainConfig {
  std::size_t epochs = 30;
  double lr = 2e-4;
  std::size_t batch = 32;
  double mask_rate = 0.2;
  bool rfe = false;
  double w_rfe = 0.1;
  std::size_t rfe_steps = 10;        // Euler steps used to draw x(1) for the RFE term
  std::size_t rfe_start_epoch = 0;   // RFE term joins from this epoch on
  double energy_dt = 0.01;           // self-step of the energy surrogate, 1/K of the sampler
  double lr_min_ratio = 1.0;         // cosine decay to lr * ratio over the run; 1 keeps lr constant

  void validate() const {
    if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
    if (batch == 0) throw ConfigError("train: batch must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) throw ConfigError("train: mask rate must lie in [0, 1]");
    if (rfe && rfe_steps == 0) throw ConfigError("train: rfe_steps must be >= 1");
    if (!(energy_dt > 0.0)) throw ConfigError("train: energy_dt must be positive");
    if (!(lr_min_ratio > 0.0 && lr_min_ratio <= 1.0)) throw ConfigError("train: lr_min_ratio must lie in (0, 1]");
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double rf_loss = 0.0;
  double rfe_loss = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

inline double learning_rate(const TrainConfig& c, std::size_t epoch) {
  if (c.lr_min_ratio >= 1.0 || c.epochs == 1) return c.lr;
  const double progress = static_cast<double>(epoch) / static_cast<double>(c.epochs - 1);
  return c.lr * (c.lr_min_ratio + (1.0 - c.lr_min_ratio) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

/// Fisher-Yates with the project Rng, so the order is the same on every platform.
inline std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);
  return idx;
}

/// Unmasked conditions a record is trained with: the intent group comes from the
/// vocabulary anchor nearest to the expert, the reward group is the expert's EP.
inline ConditionSet record_conditions(flownet::ConditionType type, const Record& r, const vocab::AnchorVocab& vocab) {
  ConditionSet c;
  switch (type) {
    case flownet::ConditionType::anchor:
    case flownet::ConditionType::goal: {
      if (vocab.empty()) throw ConfigError("anchor- and goal-conditioned training needs a vocabulary");
      const auto& a = vocab[vocab::nearest_anchor(vocab, r.trajectory)];
      if (type == flownet::ConditionType::anchor) {
        c.plan_anchor = a;
      } else {
        c.goal = vocab::goal_from_anchor(a);
      }
      break;
    }
    case flownet::ConditionType::command: c.command = flownet::command_from_trajectory(r.trajectory); break;
    case flownet::ConditionType::none: c.intent_mask = true; break;
  }
  c.reward = r.ep;
  return c;
}

/// Classifier-free dropout: each condition group is masked independently with probability `rate`.
inline void apply_training_masks(ConditionSet& c, double rate, Rng& rng) {
  c.intent_mask = rng.bernoulli(rate) || c.intent_mask;
  c.reward_mask = rng.bernoulli(rate);
}

/// Euler endpoint of the conditional field from x0; used to draw x(1) for the RFE term.
inline Tensor2 euler_endpoint(const VelocityModel& m, Tensor2 x, const flownet::SceneCache& cache, const ConditionSet& c,
                              std::size_t steps) {
  const double dt = 1.0 / static_cast<double>(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const Tensor2 v = flownet::velocity(m, x, static_cast<double>(k) * dt, cache, c);
    for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += v.data[i] * dt;
  }
  return x;
}

struct TrainResult {
  VelocityModel model;
  std::vector<EpochLog> log;
};

/// Rectified-flow training (+ RFE when enabled) with Adam. Deterministic for a given seed.
inline TrainResult train(ModelConfig mcfg, const std::vector<Record>& records, const vocab::AnchorVocab& vocab,
                         const TrainConfig& tcfg, std::uint64_t seed, const EpochCallback& on_epoch = {}) {
  tcfg.validate();
  if (records.empty()) throw ConfigError("train: empty dataset");
  mcfg.init_seed = derive_seed(seed, SeedStream::init);
  VelocityModel model(mcfg);
  Rng rng(derive_seed(seed, SeedStream::train));

  std::vector<scenario::SceneTokens> tokens;
  std::vector<ConditionSet> conds;
  tokens.reserve(records.size());
  for (const Record& r : records) {
    if (r.trajectory.steps() != mcfg.horizon) {
      throw DimensionError("train: record horizon " + std::to_string(r.trajectory.steps()) + " vs model " +
                           std::to_string(mcfg.horizon));
    }
    tokens.push_back(scenario::scene_tokens(r.scene));
    conds.push_back(record_conditions(mcfg.condition, r, vocab));
  }

  TrainResult out{std::move(model), {}};
  VelocityModel& m = out.model;
  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const bool rfe_on = tcfg.rfe && epoch >= tcfg.rfe_start_epoch;
    const diff::AdamConfig adam{learning_rate(tcfg, epoch)};
    const auto order = permutation(records.size(), rng);
    double rf_sum = 0.0, rfe_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch) {
      const std::size_t end = std::min(order.size(), start + tcfg.batch);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t i = order[b];
        const Record& r = records[i];
        const Tensor2 x0 = flownet::draw_noise(mcfg, rng);
        const double time = rng.uniform();
        ConditionSet c = conds[i];
        apply_training_masks(c, tcfg.mask_rate, rng);

        Tensor2 generated;
        if (rfe_on) {
          const Tensor2 noise = flownet::draw_noise(mcfg, rng);
          generated = euler_endpoint(m, noise, flownet::make_scene_cache(m, tokens[i]), conds[i], tcfg.rfe_steps);
        }

        Tape t(diff::GradMode::full);
        const auto keys = flownet::encode_scene(t, m.params(), tokens[i]);
        Var loss = flownet::rf_loss(t, m.params(), mcfg, x0, r.trajectory.waypoints, time, keys, c);
        rf_sum += t.value(loss).data[0];
        if (rfe_on) {
          Var e = flownet::rfe_loss(t, m.params(), mcfg, generated, r.trajectory.waypoints, keys, conds[i], r.scene,
                                    tcfg.energy_dt);
          rfe_sum += t.value(e).data[0];
          loss = diff::add(t, loss, diff::scale(t, e, tcfg.w_rfe));
        }
        t.backward(diff::scale(t, loss, inv_b));
      }
      diff::adam_step(m.params(), adam);
    }
    const double n = static_cast<double>(records.size());
    out.log.push_back({epoch, rf_sum / n, rfe_sum / n});
    if (on_epoch) on_epoch(out.log.back());
  }
  return out;
}

// ---------------------------------------------------------------------------
// L2 imitation baseline: the flow model's scene trunk queried by a learned plan
// token, decoded straight to T x 2 waypoints.

class ImitationBaseline {
 public:
  explicit ImitationBaseline(ModelConfig cfg) : cfg_(cfg) {
    Rng rng(cfg_.init_seed);
    const std::size_t e = cfg_.embed_dim;
    const std::size_t f = scenario::kTokenFeatures;
    params_.add("query", diff::kaiming_uniform(1, e, rng));
    diff::add_dense(params_, "agent_embed", f, e, rng);
    diff::add_dense(params_, "map_embed", f, e, rng);
    params_.add("agent_null", diff::kaiming_uniform(1, e, rng));
    diff::add_attention(params_, "attn_agent", e, rng);
    diff::add_attention(params_, "attn_map", e, rng);
    diff::add_dense(params_, "dec1", e, e, rng);
    diff::add_dense(params_, "dec2", e, cfg_.state_dim(), rng, /*zero=*/true);
  }

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  [[nodiscard]] const diff::ParamStore& params() const { return params_; }
  diff::ParamStore& params() { return params_; }

 private:
  ModelConfig cfg_;
  diff::ParamStore params_;
};

template <class Store>
Var imitation_forward(Tape& t, Store& p, const ModelConfig& cfg, const flownet::SceneKeys& keys) {
  Var h = t.param(p, "query");
  h = diff::attend(t, h, keys.agent, diff::attention_params(t, p, "attn_agent")).out;
  h = diff::attend(t, h, keys.map, diff::attention_params(t, p, "attn_map")).out;
  h = diff::dense(t, h, diff::dense_params(t, p, "dec1"), diff::Activation::gelu);
  Var out = diff::dense(t, h, diff::dense_params(t, p, "dec2"), diff::Activation::identity);
  return diff::scale(t, out, cfg.position_scale);
}

inline scenario::Trajectory predict(const ImitationBaseline& b, const scenario::Scene& scene) {
  Tape t(diff::GradMode::none);
  const auto keys = flownet::encode_scene(t, b.params(), scenario::scene_tokens(scene));
  Var y = imitation_forward(t, b.params(), b.config(), keys);
  return scenario::Trajectory(flownet::as_waypoints(t.value(y)), b.config().dt);
}

struct ImitationResult {
  ImitationBaseline model;
  std::vector<EpochLog> log;  // rf_loss column holds the regression MSE
};

/// Mean squared error against each record's expert trajectory.
inline ImitationResult train_imitation(ModelConfig mcfg, const std::vector<Record>& records, const TrainConfig& tcfg,
                                       std::uint64_t seed, const EpochCallback& on_epoch = {}) {
  tcfg.validate();
  if (records.empty()) throw ConfigError("train_imitation: empty dataset");
  mcfg.init_seed = derive_seed(seed, SeedStream::baseline);
  ImitationResult out{ImitationBaseline(mcfg), {}};
  auto& m = out.model;
  Rng rng(derive_seed(derive_seed(seed, SeedStream::baseline), SeedStream::train));
  std::vector<scenario::SceneTokens> tokens;
  for (const Record& r : records) tokens.push_back(scenario::scene_tokens(r.scene));
  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const auto order = permutation(records.size(), rng);
    double sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch) {
      const std::size_t end = std::min(order.size(), start + tcfg.batch);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t i = order[b];
        Tape t(diff::GradMode::full);
        const auto keys = flownet::encode_scene(t, m.params(), tokens[i]);
        Var y = imitation_forward(t, m.params(), mcfg, keys);
        Var target = t.constant(flownet::as_row(records[i].trajectory.waypoints));
        Var loss = diff::mean(t, diff::square(t, diff::sub(t, y, target)));
        sum += t.value(loss).data[0];
        t.backward(diff::scale(t, loss, inv_b));
      }
      diff::adam_step(m.params(), diff::AdamConfig{learning_rate(tcfg, epoch)});
    }
    out.log.push_back({epoch, sum / static_cast<double>(records.size()), 0.0});
    if (on_epoch) on_epoch(out.log.back());
  }
  return out;
}

}  // namespace cfmplan::harness
