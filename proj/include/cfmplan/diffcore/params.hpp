#pragma once

#include <cmath>
#include <map>
#include <string>
#include <string_view>

#include "cfmplan/diffcore/tensor.hpp"
#include "cfmplan/random.hpp"

namespace cfmplan::diff {

struct ParamBlock {
  Tensor2 value;
  Tensor2 grad;
  // Adam moments
  Tensor2 m;
  Tensor2 v;
};

/// Named parameter blocks with matching gradient and optimizer state.
///
/// Values change only through the optimizer (or explicit assignment when
/// loading a checkpoint). Iteration order is the lexicographic block name,
/// which keeps serialization and reductions deterministic.
class ParamStore {
 public:
  Tensor2& add(const std::string& name, Tensor2 init) {
    if (blocks_.contains(name)) throw ConfigError("ParamStore: duplicate block '" + name + "'");
    ParamBlock b;
    b.grad = Tensor2(init.rows, init.cols);
    b.m = Tensor2(init.rows, init.cols);
    b.v = Tensor2(init.rows, init.cols);
    b.value = std::move(init);
    return blocks_.emplace(name, std::move(b)).first->second.value;
  }

  [[nodiscard]] bool contains(std::string_view name) const { return blocks_.find(name) != blocks_.end(); }

  [[nodiscard]] const Tensor2& value(std::string_view name) const { return block(name).value; }
  Tensor2& value(std::string_view name) { return block(name).value; }
  [[nodiscard]] const Tensor2& grad(std::string_view name) const { return block(name).grad; }
  Tensor2& grad(std::string_view name) { return block(name).grad; }

  ParamBlock& block(std::string_view name) {
    auto it = blocks_.find(name);
    if (it == blocks_.end()) throw ConfigError("ParamStore: no block '" + std::string(name) + "'");
    return it->second;
  }
  [[nodiscard]] const ParamBlock& block(std::string_view name) const {
    auto it = blocks_.find(name);
    if (it == blocks_.end()) throw ConfigError("ParamStore: no block '" + std::string(name) + "'");
    return it->second;
  }

  [[nodiscard]] const std::map<std::string, ParamBlock, std::less<>>& blocks() const { return blocks_; }
  std::map<std::string, ParamBlock, std::less<>>& blocks() { return blocks_; }

  [[nodiscard]] std::size_t step() const { return step_; }
  void set_step(std::size_t s) { step_ = s; }

  [[nodiscard]] bool has_gradients() const { return has_grad_; }
  void mark_gradients() { has_grad_ = true; }

  void zero_grad() {
    for (auto& [_, b] : blocks_) b.grad.fill(0.0);
    has_grad_ = false;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, b] : blocks_) n += b.value.size();
    return n;
  }

 private:
  std::map<std::string, ParamBlock, std::less<>> blocks_;
  std::size_t step_ = 0;
  bool has_grad_ = false;
};

/// Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Tensor2 kaiming_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor2 w(fan_in, fan_out);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& x : w.data) x = rng.uniform(-bound, bound);
  return w;
}

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update over every block, then zero the gradients.
inline void adam_step(ParamStore& store, const AdamConfig& cfg) {
  if (!store.has_gradients()) throw StateError("adam_step: gradients not populated");
  const std::size_t t = store.step() + 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (auto& [_, b] : store.blocks()) {
    for (std::size_t i = 0; i < b.value.size(); ++i) {
      const double g = b.grad.data[i];
      b.m.data[i] = cfg.beta1 * b.m.data[i] + (1.0 - cfg.beta1) * g;
      b.v.data[i] = cfg.beta2 * b.v.data[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = b.m.data[i] / c1;
      const double vhat = b.v.data[i] / c2;
      b.value.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  store.set_step(t);
  store.zero_grad();
}

}  // namespace cfmplan::diff
