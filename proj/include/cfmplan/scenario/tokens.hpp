#pragma once

#include <array>
#include <vector>

#include "cfmplan/diffcore/tensor.hpp"
#include "cfmplan/scenario/types.hpp"

namespace cfmplan::scenario {

inline constexpr std::size_t kTokenFeatures = 8;
inline constexpr double kMapTokenSpacing = 2.0;  // m
inline constexpr double kPositionScale = 20.0;   // m
inline constexpr double kVelocityScale = 10.0;   // m/s
inline constexpr double kSizeScale = 2.0;        // m

/// Raw scene features; the model embeds them.
///
/// Agent rows: (x, y, vx, vy, radius, 0, 0, 0), scaled. A scene without obstacles
/// yields one all-zero row with `null_agent` set; the model swaps in its learned
/// null embedding for it.
/// Map rows: lanes resampled every 2 m, endpoints inclusive: (x, y, tx, ty, half_width, lane_index, ego_speed, 0).
/// Ego speed rides on every map row since the ego is otherwise implicit (origin, heading 0).
struct SceneTokens {
  diff::Tensor2 agents;
  diff::Tensor2 map;
  bool null_agent = false;
};

inline SceneTokens scene_tokens(const Scene& scene) {
  SceneTokens out;
  if (scene.obstacles.empty()) {
    out.agents = diff::Tensor2(1, kTokenFeatures);
    out.null_agent = true;
  } else {
    out.agents = diff::Tensor2(scene.obstacles.size(), kTokenFeatures);
    for (std::size_t i = 0; i < scene.obstacles.size(); ++i) {
      const Obstacle& o = scene.obstacles[i];
      auto row = out.agents.row(i);
      row[0] = o.position.x / kPositionScale;
      row[1] = o.position.y / kPositionScale;
      row[2] = o.velocity.x / kVelocityScale;
      row[3] = o.velocity.y / kVelocityScale;
      row[4] = o.radius / kSizeScale;
    }
  }
  std::vector<std::array<double, kTokenFeatures>> rows;
  for (std::size_t k = 0; k < scene.lanes.size(); ++k) {
    const Lane& lane = scene.lanes[k];
    for (const auto& [p, tangent] : resample(lane.centerline, kMapTokenSpacing)) {
      rows.push_back({p.x / kPositionScale, p.y / kPositionScale, tangent.x, tangent.y, lane.half_width / kSizeScale,
                      static_cast<double>(k) / 4.0, scene.ego.speed / kVelocityScale, 0.0});
    }
  }
  out.map = diff::Tensor2(rows.size(), kTokenFeatures);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), out.map.row(i).begin());
  return out;
}

}  // namespace cfmplan::scenario
