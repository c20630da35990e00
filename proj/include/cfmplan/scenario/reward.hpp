#pragma once

#include <algorithm>
#include <limits>

#include "cfmplan/scenario/types.hpp"

namespace cfmplan::scenario {

/// Lane whose centerline is closest to the waypoints on average (lowest index on ties).
inline std::size_t matched_lane(const Trajectory& traj, const Scene& scene) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < scene.lanes.size(); ++k) {
    double d = 0.0;
    for (std::size_t i = 0; i < traj.steps(); ++i) d += project(scene.lanes[k].centerline, traj.point(i)).distance;
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

/// Ego progress: arc length from the ego's projection to the final waypoint's projection on the
/// matched lane, over the distance covered at v_max for the full horizon, clamped to [0, 1].
inline double ep_reward(const Trajectory& traj, const Scene& scene, const Limits& lim = default_limits()) {
  if (scene.lanes.empty() || traj.steps() == 0) return 0.0;
  const auto& center = scene.lanes[matched_lane(traj, scene)].centerline;
  const double start = project(center, scene.ego.position).arc_length;
  const double end = project(center, traj.final_point()).arc_length;
  const double horizon_distance = static_cast<double>(traj.steps()) * traj.dt * lim.v_max;
  return std::clamp((end - start) / horizon_distance, 0.0, 1.0);
}

}  // namespace cfmplan::scenario
