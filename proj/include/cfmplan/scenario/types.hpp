#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cfmplan/diffcore/tensor.hpp"
#include "cfmplan/scenario/geometry.hpp"

namespace cfmplan::scenario {

/// World constants shared by the constraint evaluator, experts and metrics.
struct Limits {
  double v_max = 20.0;        // m/s
  double kappa_max = 0.3;     // 1/m
  double ego_radius = 1.0;    // m
  double sharpness = 4.0;     // penalty transition width is 1/sharpness
  std::size_t horizon = 8;    // waypoints
  double dt = 0.5;            // s
};

inline const Limits& default_limits() {
  static const Limits limits{};
  return limits;
}

struct Lane {
  std::vector<Vec2> centerline;
  double half_width = 1.75;
};

struct Obstacle {
  Vec2 position;
  Vec2 velocity;
  double radius = 1.0;

  [[nodiscard]] Vec2 at(double t) const { return position + velocity * t; }
};

struct EgoState {
  Vec2 position;
  double heading = 0.0;
  double speed = 0.0;
};

enum class ScenarioKind { straight, fork, turn, obstacle_avoid, lead_stop };

inline constexpr std::array<ScenarioKind, 5> kAllKinds{ScenarioKind::straight, ScenarioKind::fork, ScenarioKind::turn,
                                                       ScenarioKind::obstacle_avoid, ScenarioKind::lead_stop};

inline std::string_view to_string(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::straight: return "straight";
    case ScenarioKind::fork: return "fork";
    case ScenarioKind::turn: return "turn";
    case ScenarioKind::obstacle_avoid: return "obstacle_avoid";
    case ScenarioKind::lead_stop: return "lead_stop";
  }
  return "?";
}

inline std::optional<ScenarioKind> kind_from_string(std::string_view s) {
  for (ScenarioKind k : kAllKinds)
    if (to_string(k) == s) return k;
  return std::nullopt;
}

/// Scene in the ego frame: the ego starts at the origin facing +x.
struct Scene {
  std::vector<Lane> lanes;
  std::vector<Obstacle> obstacles;
  EgoState ego;
  ScenarioKind kind = ScenarioKind::straight;
  std::uint64_t seed = 0;
};

/// T x 2 ego-frame waypoints; row i is the position at time (i + 1) * dt.
struct Trajectory {
  diff::Tensor2 waypoints;
  double dt = 0.5;

  Trajectory() = default;
  explicit Trajectory(diff::Tensor2 w, double step = 0.5) : waypoints(std::move(w)), dt(step) {}

  [[nodiscard]] std::size_t steps() const { return waypoints.rows; }
  [[nodiscard]] Vec2 point(std::size_t i) const { return {waypoints(i, 0), waypoints(i, 1)}; }
  [[nodiscard]] Vec2 final_point() const { return point(steps() - 1); }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// Smooth penalties, 0 when the hard check passes with margin.
struct ConstraintScore {
  double collision = 0.0;
  double road_departure = 0.0;
  double kinematic = 0.0;

  [[nodiscard]] double total() const { return collision + road_departure + kinematic; }
};

}  // namespace cfmplan::scenario
