#pragma once

#include <filesystem>
#include <functional>
#include <limits>
#include <vector>

#include "cfmplan/diffcore/checkpoint.hpp"
#include "cfmplan/scenario/constraints.hpp"
#include "cfmplan/scenario/reward.hpp"

namespace cfmplan::vocab {

using scenario::Trajectory;

/// Farthest-point-sampled set of anchor trajectories in the ego frame.
struct AnchorVocab {
  std::vector<Trajectory> anchors;

  [[nodiscard]] std::size_t size() const { return anchors.size(); }
  [[nodiscard]] bool empty() const { return anchors.empty(); }
  const Trajectory& operator[](std::size_t i) const { return anchors[i]; }
};

inline double squared_distance(const Trajectory& a, const Trajectory& b) {
  if (!a.waypoints.same_shape(b.waypoints)) {
    throw DimensionError("trajectory shapes differ: " + a.waypoints.shape() + " vs " + b.waypoints.shape());
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.waypoints.size(); ++i) {
    const double d = a.waypoints.data[i] - b.waypoints.data[i];
    s += d * d;
  }
  return s;
}

/// Greedy farthest point sampling under flattened L2. The first pick is the trajectory
/// closest to the set mean; later picks maximize distance to the picked set. Ties go to
/// the lowest input index. Exact duplicates in the input are considered once.
inline AnchorVocab fps_build(const std::vector<Trajectory>& trajectories, std::size_t n) {
  if (n == 0) throw ConfigError("fps_build: vocabulary size must be >= 1");
  if (n > trajectories.size()) {
    throw ConfigError("fps_build: vocabulary size " + std::to_string(n) + " exceeds " +
                      std::to_string(trajectories.size()) + " trajectories");
  }
  std::vector<const Trajectory*> pool;
  for (const Trajectory& t : trajectories) {
    if (!pool.empty() && !t.waypoints.same_shape(pool.front()->waypoints)) {
      throw DimensionError("fps_build: mixed trajectory shapes " + t.waypoints.shape() + " vs " +
                           pool.front()->waypoints.shape());
    }
    bool dup = false;
    for (const Trajectory* p : pool) dup = dup || p->waypoints == t.waypoints;
    if (!dup) pool.push_back(&t);
  }
  if (n > pool.size()) {
    throw ConfigError("fps_build: only " + std::to_string(pool.size()) + " distinct trajectories for size " +
                      std::to_string(n));
  }

  Trajectory mean(diff::Tensor2(pool.front()->waypoints.rows, pool.front()->waypoints.cols), pool.front()->dt);
  for (const Trajectory* p : pool)
    for (std::size_t i = 0; i < mean.waypoints.size(); ++i) mean.waypoints.data[i] += p->waypoints.data[i];
  for (double& x : mean.waypoints.data) x /= static_cast<double>(pool.size());

  std::size_t first = 0;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const double d = squared_distance(*pool[i], mean);
    if (d < best) {
      best = d;
      first = i;
    }
  }

  AnchorVocab out;
  std::vector<double> min_d(pool.size(), std::numeric_limits<double>::infinity());
  std::vector<bool> taken(pool.size(), false);
  std::size_t pick = first;
  for (std::size_t k = 0; k < n; ++k) {
    taken[pick] = true;
    out.anchors.push_back(*pool[pick]);
    double far = -1.0;
    std::size_t next = 0;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (taken[i]) continue;
      min_d[i] = std::min(min_d[i], squared_distance(*pool[i], *pool[pick]));
      if (min_d[i] > far) {
        far = min_d[i];
        next = i;
      }
    }
    pick = next;
  }
  return out;
}

/// Index of the anchor nearest to `gt` in flattened L2; lowest index on ties.
inline std::size_t nearest_anchor(const AnchorVocab& vocab, const Trajectory& gt) {
  if (vocab.empty()) throw ConfigError("nearest_anchor: empty vocabulary");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    const double d = squared_distance(vocab[i], gt);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

inline scenario::Vec2 goal_from_anchor(const Trajectory& anchor) { return anchor.final_point(); }

/// Lower is better. The rule-based scorer is the total constraint penalty.
using TrajectoryScorer = std::function<double(const Trajectory&, const scenario::Scene&)>;

inline double rule_based_score(const Trajectory& t, const scenario::Scene& s) {
  return scenario::constraint_eval(t, s).total();
}

enum class AnchorSource { vocab, external };

inline constexpr double kFeasibilityThreshold = 0.5;

struct ConstraintAnchor {
  Trajectory trajectory;
  scenario::ConstraintScore score;
  AnchorSource source = AnchorSource::vocab;
  std::size_t index = 0;
  bool infeasible_best = false;
};

/// Anchor minimizing the scorer over the vocabulary. Equal scores prefer higher ego
/// progress, then the lower index. Flags `infeasible_best` when even the best total
/// penalty exceeds kFeasibilityThreshold.
inline ConstraintAnchor select_constraint_anchor(const AnchorVocab& vocab, const scenario::Scene& scene,
                                                 const TrajectoryScorer& scorer = rule_based_score,
                                                 AnchorSource source = AnchorSource::vocab) {
  if (vocab.empty()) throw ConfigError("select_constraint_anchor: empty vocabulary");
  std::size_t best = 0;
  double best_score = std::numeric_limits<double>::infinity();
  double best_ep = -1.0;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    const double s = scorer(vocab[i], scene);
    if (s > best_score) continue;
    const double ep = scenario::ep_reward(vocab[i], scene);
    if (s < best_score || ep > best_ep) {
      best = i;
      best_score = s;
      best_ep = ep;
    }
  }
  ConstraintAnchor out;
  out.trajectory = vocab[best];
  out.score = scenario::constraint_eval(vocab[best], scene);
  out.source = source;
  out.index = best;
  out.infeasible_best = out.score.total() > kFeasibilityThreshold;
  return out;
}

// Vocabulary files reuse the checkpoint container: "anchors" (N x 2T) and "dt" (1 x 1).
inline diff::NamedBlocks vocab_blocks(const AnchorVocab& v) {
  if (v.empty()) throw ConfigError("vocabulary is empty");
  const std::size_t width = v[0].waypoints.size();
  diff::Tensor2 a(v.size(), width);
  for (std::size_t i = 0; i < v.size(); ++i) std::copy(v[i].waypoints.data.begin(), v[i].waypoints.data.end(), a.row(i).begin());
  return {{"anchors", std::move(a)}, {"dt", diff::Tensor2(1, 1, {v[0].dt})}};
}

inline AnchorVocab vocab_from_blocks(const diff::NamedBlocks& blocks) {
  auto it = blocks.find("anchors");
  auto dt = blocks.find("dt");
  if (it == blocks.end() || dt == blocks.end()) throw ParseError("vocabulary container lacks 'anchors' or 'dt'");
  AnchorVocab v;
  const auto& a = it->second;
  for (std::size_t i = 0; i < a.rows; ++i) {
    v.anchors.emplace_back(diff::Tensor2(a.cols / 2, 2, std::vector<double>(a.row(i).begin(), a.row(i).end())),
                           dt->second.data.at(0));
  }
  return v;
}

inline void write_vocab(const std::filesystem::path& path, const AnchorVocab& v) { diff::write_blocks(path, vocab_blocks(v)); }
inline AnchorVocab read_vocab(const std::filesystem::path& path) { return vocab_from_blocks(diff::read_blocks(path)); }

}  // namespace cfmplan::vocab
