#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <utility>
#include <vector>

#include "cfmplan/random.hpp"
#include "cfmplan/scenario/constraints.hpp"
#include "cfmplan/scenario/types.hpp"

namespace cfmplan::scenario {

struct ExpertTrajectory {
  Trajectory trajectory;
  std::size_t mode = 0;  // index of the lane the expert follows
};

namespace detail {

inline std::vector<Vec2> straight_line(Vec2 from, double heading, double length, double spacing = 1.0) {
  std::vector<Vec2> pts;
  const auto n = static_cast<std::size_t>(std::ceil(length / spacing));
  for (std::size_t i = 0; i <= n; ++i) pts.push_back(from + unit(heading) * (length * static_cast<double>(i) / static_cast<double>(n)));
  return pts;
}

/// Straight stem, circular arc of signed radius turning by `angle`, then a straight tail.
inline std::vector<Vec2> stem_arc_tail(double stem_start, double stem_end, double radius, double angle, double tail,
                                       double spacing = 1.0) {
  std::vector<Vec2> pts = straight_line({stem_start, 0.0}, 0.0, stem_end - stem_start, spacing);
  const double sign = angle >= 0.0 ? 1.0 : -1.0;
  const Vec2 center{stem_end, sign * radius};
  const double arc_len = radius * std::abs(angle);
  const auto n = std::max<std::size_t>(2, static_cast<std::size_t>(std::ceil(arc_len / spacing)));
  for (std::size_t i = 1; i <= n; ++i) {
    const double phi = angle * static_cast<double>(i) / static_cast<double>(n);
    pts.push_back(center + Vec2{radius * std::sin(std::abs(phi)), -sign * radius * std::cos(phi)});
  }
  const Vec2 end = pts.back();
  auto rest = straight_line(end, angle, tail, spacing);
  pts.insert(pts.end(), rest.begin() + 1, rest.end());
  return pts;
}

using SpeedProfile = std::function<double(double)>;

/// Pure-pursuit tracking of a lane centerline by a unicycle with curvature limit.
inline Trajectory pure_pursuit(const Lane& lane, const EgoState& ego, const SpeedProfile& speed, const Limits& lim) {
  constexpr int kSubsteps = 20;
  const double h = lim.dt / kSubsteps;
  const double kappa_cap = 0.6 * lim.kappa_max;
  Vec2 p = ego.position;
  double heading = ego.heading;
  diff::Tensor2 w(lim.horizon, 2);
  double t = 0.0;
  for (std::size_t i = 0; i < lim.horizon; ++i) {
    for (int s = 0; s < kSubsteps; ++s) {
      const double v = speed(t + 0.5 * h);
      const double lookahead = std::max(5.0, 1.2 * std::max(v, ego.speed));
      const Projection pr = project(lane.centerline, p);
      const Vec2 target = point_at(lane.centerline, pr.arc_length + lookahead).first;
      const Vec2 to = target - p;
      const double alpha = wrap_angle(std::atan2(to.y, to.x) - heading);
      const double kappa = std::clamp(2.0 * std::sin(alpha) / std::max(norm(to), 1e-6), -kappa_cap, kappa_cap);
      const double mid_heading = heading + 0.5 * v * kappa * h;
      p += unit(mid_heading) * (v * h);
      heading += v * kappa * h;
      t += h;
    }
    w(i, 0) = p.x;
    w(i, 1) = p.y;
  }
  return Trajectory(std::move(w), lim.dt);
}

inline constexpr double kStopBuffer = 0.75;  // extra gap (m) kept behind a stopped lead beyond the penalty margin

/// Stopped obstacle closest ahead on the ego lane, if any.
inline const Obstacle* stopped_lead(const Scene& scene) {
  const Obstacle* best = nullptr;
  for (const Obstacle& o : scene.obstacles) {
    if (norm(o.velocity) > 0.1 || o.position.x <= 0.0) continue;
    if (project(scene.lanes.front().centerline, o.position).distance > 1.0) continue;
    if (!best || o.position.x < best->position.x) best = &o;
  }
  return best;
}

}  // namespace detail

/// Kinematic rollouts along every lane, kept only when all penalties are exactly zero.
/// Lead-stop scenes brake at constant deceleration to halt behind the stopped lead.
inline std::vector<ExpertTrajectory> expert_trajectories(const Scene& scene, const Limits& lim = default_limits()) {
  detail::SpeedProfile speed = [v = scene.ego.speed](double) { return v; };
  if (scene.kind == ScenarioKind::lead_stop) {
    const Obstacle* lead = detail::stopped_lead(scene);
    if (!lead) throw GenerationError("lead_stop scene " + std::to_string(scene.seed) + " has no stopped lead");
    const double stop_x = lead->position.x - lead->radius - lim.ego_radius - 1.0 / lim.sharpness - detail::kStopBuffer;
    if (stop_x <= 0.0) throw GenerationError("lead_stop scene: no room to stop");
    const double v0 = scene.ego.speed;
    const double decel = v0 * v0 / (2.0 * stop_x);
    speed = [v0, decel](double t) { return std::max(0.0, v0 - decel * t); };
  }
  std::vector<ExpertTrajectory> out;
  const std::size_t lanes = scene.kind == ScenarioKind::lead_stop ? 1 : scene.lanes.size();
  for (std::size_t k = 0; k < lanes; ++k) {
    Trajectory traj = detail::pure_pursuit(scene.lanes[k], scene.ego, speed, lim);
    if (constraint_eval(traj, scene, lim).total() == 0.0) out.push_back({std::move(traj), k});
  }
  if (out.empty()) throw GenerationError("scene " + std::string(to_string(scene.kind)) + "/" +
                                         std::to_string(scene.seed) + " has no collision-free corridor");
  return out;
}

namespace detail {

inline Scene candidate_scene(ScenarioKind kind, std::uint64_t seed, Rng& rng, const Limits& lim) {
  Scene s;
  s.kind = kind;
  s.seed = seed;
  s.ego.position = {0.0, 0.0};
  s.ego.heading = 0.0;
  const double horizon_time = static_cast<double>(lim.horizon) * lim.dt;
  switch (kind) {
    case ScenarioKind::straight: {
      s.ego.speed = rng.uniform(2.0, 16.0);
      const double hw = rng.uniform(1.6, 2.0);
      s.lanes.push_back({straight_line({-5.0, 0.0}, 0.0, s.ego.speed * horizon_time + 20.0, 2.0), hw});
      const auto n_obs = rng.index(3);
      for (std::size_t i = 0; i < n_obs; ++i) {
        const double r = rng.uniform(0.5, 1.5);
        const double side = rng.bernoulli(0.5) ? 1.0 : -1.0;
        const double x = rng.uniform(5.0, 10.0) + 15.0 * static_cast<double>(i);
        s.obstacles.push_back({{x, side * (hw + r + rng.uniform(1.5, 3.0))}, {rng.uniform(-1.0, 1.0), 0.0}, r});
      }
      break;
    }
    case ScenarioKind::fork: {
      s.ego.speed = rng.uniform(4.0, 10.0);
      const double stem = rng.uniform(2.0, 6.0);
      const double radius = rng.uniform(12.0, 20.0);
      const double angle = rng.uniform(0.35, 0.6);
      const double tail = s.ego.speed * horizon_time + 15.0;
      const double hw = rng.uniform(1.6, 1.9);
      s.lanes.push_back({stem_arc_tail(-5.0, stem, radius, angle, tail), hw});
      s.lanes.push_back({stem_arc_tail(-5.0, stem, radius, -angle, tail), hw});
      break;
    }
    case ScenarioKind::turn: {
      s.ego.speed = rng.uniform(3.0, 8.0);
      const double stem = rng.uniform(0.0, 10.0);
      const double radius = rng.uniform(15.0, 30.0);
      const double angle = (rng.bernoulli(0.5) ? 1.0 : -1.0) * std::numbers::pi / 2.0;
      s.lanes.push_back({stem_arc_tail(-5.0, stem, radius, angle, 30.0), rng.uniform(1.7, 2.0)});
      break;
    }
    case ScenarioKind::obstacle_avoid: {
      s.ego.speed = rng.uniform(5.0, 10.0);
      const double len = s.ego.speed * horizon_time + 20.0;
      const double hw = 2.0;
      const double spacing = 3.5;
      s.lanes.push_back({straight_line({-5.0, 0.0}, 0.0, len, 2.0), hw});
      const auto sides = rng.index(3);  // 0: left, 1: right, 2: both
      if (sides != 1) s.lanes.push_back({straight_line({-5.0, spacing}, 0.0, len, 2.0), hw});
      if (sides != 0) s.lanes.push_back({straight_line({-5.0, -spacing}, 0.0, len, 2.0), hw});
      const double r = rng.uniform(0.8, 1.5);
      s.obstacles.push_back({{rng.uniform(12.0, 24.0), rng.uniform(-0.3, 0.3)}, {rng.uniform(0.0, 2.0), 0.0}, r});
      break;
    }
    case ScenarioKind::lead_stop: {
      s.ego.speed = rng.uniform(3.0, 8.0);
      const double hw = rng.uniform(1.6, 2.0);
      s.lanes.push_back({straight_line({-5.0, 0.0}, 0.0, s.ego.speed * horizon_time + 20.0, 2.0), hw});
      const double r = 1.0;
      const double stop_x = rng.uniform(0.8, 1.8) * s.ego.speed;
      const double lead_x = stop_x + r + lim.ego_radius + 1.0 / lim.sharpness + kStopBuffer;
      s.obstacles.push_back({{lead_x, 0.0}, {0.0, 0.0}, r});
      break;
    }
  }
  return s;
}

inline bool scene_acceptable(const Scene& s, const std::vector<ExpertTrajectory>& experts) {
  if (s.kind == ScenarioKind::fork) {
    return experts.size() == 2 && norm(experts[0].trajectory.final_point() - experts[1].trajectory.final_point()) > 3.0;
  }
  if (s.kind == ScenarioKind::obstacle_avoid) {
    // The ego lane itself must be blocked.
    return std::none_of(experts.begin(), experts.end(), [](const auto& e) { return e.mode == 0; });
  }
  return true;
}

}  // namespace detail

/// Deterministic scene for (kind, seed); rejection-samples until every expert corridor is feasible.
inline Scene generate_scene(ScenarioKind kind, std::uint64_t seed, const Limits& lim = default_limits()) {
  Rng rng(derive_seed(seed, SeedStream::dataset) ^ (static_cast<std::uint64_t>(kind) + 1));
  for (int attempt = 0; attempt < 256; ++attempt) {
    Scene s = detail::candidate_scene(kind, seed, rng, lim);
    try {
      if (detail::scene_acceptable(s, expert_trajectories(s, lim))) return s;
    } catch (const GenerationError&) {
    }
  }
  throw GenerationError("generate_scene: no feasible " + std::string(to_string(kind)) + " scene for seed " +
                        std::to_string(seed));
}

}  // namespace cfmplan::scenario
