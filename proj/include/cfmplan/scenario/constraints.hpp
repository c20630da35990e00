#pragma once

#include <algorithm>
#include <cmath>

#include "cfmplan/diffcore/tape.hpp"
#include "cfmplan/scenario/types.hpp"

namespace cfmplan::scenario {

/// C1 hinge: 0 for z <= -w, quadratic on (-w, w), z for z >= w.
/// Exactly zero once the violation margin exceeds w, linear far past it.
inline double smooth_hinge(double z, double w) {
  if (z <= -w) return 0.0;
  if (z >= w) return z;
  return (z + w) * (z + w) / (4.0 * w);
}

inline double smooth_hinge_slope(double z, double w) {
  if (z <= -w) return 0.0;
  if (z >= w) return 1.0;
  return (z + w) / (2.0 * w);
}

/// Regularizer (m^3) in the three-point curvature denominator; keeps near-stationary
/// jitter from reading as a tight turn.
inline constexpr double kCurvatureRegularizer = 0.125;

namespace detail {

inline constexpr double kNormFloor = 1e-12;

inline double safe_norm(Vec2 a) { return std::sqrt(a.x * a.x + a.y * a.y + kNormFloor); }

inline Vec2 row_point(const diff::Tensor2& w, std::size_t i) {
  return w.cols == 2 ? Vec2{w(i, 0), w(i, 1)} : Vec2{w.data[2 * i], w.data[2 * i + 1]};
}

struct CurvatureTerm {
  double kappa;
  Vec2 d_prev, d_mid, d_next;
};

// Menger-style curvature 2 cross(a, b) / (|a||b||a+b| + reg) at the middle point.
inline CurvatureTerm curvature(Vec2 p0, Vec2 p1, Vec2 p2) {
  const Vec2 a = p1 - p0;
  const Vec2 b = p2 - p1;
  const Vec2 c = a + b;
  const double na = safe_norm(a), nb = safe_norm(b), nc = safe_norm(c);
  const double num = 2.0 * cross(a, b);
  const double den = na * nb * nc + kCurvatureRegularizer;
  const Vec2 dnum_da{2.0 * b.y, -2.0 * b.x};
  const Vec2 dnum_db{-2.0 * a.y, 2.0 * a.x};
  const Vec2 dden_da = a * (nb * nc / na) + c * (na * nb / nc);
  const Vec2 dden_db = b * (na * nc / nb) + c * (na * nb / nc);
  const double inv_den2 = 1.0 / (den * den);
  const Vec2 dk_da = (dnum_da * den - dden_da * num) * inv_den2;
  const Vec2 dk_db = (dnum_db * den - dden_db * num) * inv_den2;
  return {num / den, dk_da * -1.0, dk_da - dk_db, dk_db};
}

}  // namespace detail

/// Constraint penalties and, optionally, their 3 x 2T Jacobian with respect to the
/// row-major flattened waypoints (x0, y0, x1, y1, ...).
struct ConstraintEvaluation {
  ConstraintScore score;
  diff::Tensor2 jacobian;
};

/// Accepts waypoints as T x 2 or 1 x 2T.
inline ConstraintEvaluation evaluate_constraints(const diff::Tensor2& waypoints, const Scene& scene, double dt,
                                                 const Limits& lim, bool with_jacobian) {
  const std::size_t n = waypoints.size() / 2;
  if (waypoints.size() != 2 * n || n == 0 || (waypoints.cols != 2 && waypoints.rows != 1)) {
    throw DimensionError("constraint_eval: waypoints must be T x 2 or 1 x 2T, got " + waypoints.shape());
  }
  const double w = 1.0 / lim.sharpness;
  ConstraintEvaluation out;
  if (with_jacobian) out.jacobian = diff::Tensor2(3, 2 * n);
  auto acc = [&](std::size_t row, std::size_t point, Vec2 g) {
    if (!with_jacobian) return;
    out.jacobian(row, 2 * point) += g.x;
    out.jacobian(row, 2 * point + 1) += g.y;
  };

  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 p = detail::row_point(waypoints, i);
    const double t = static_cast<double>(i + 1) * dt;

    for (const Obstacle& o : scene.obstacles) {
      const Vec2 d = p - o.at(t);
      const double dist = detail::safe_norm(d);
      const double z = o.radius + lim.ego_radius - dist;
      if (z <= -w) continue;
      out.score.collision += smooth_hinge(z, w);
      acc(0, i, d * (-smooth_hinge_slope(z, w) / dist));
    }

    double best_z = std::numeric_limits<double>::infinity();
    Vec2 best_dir{};
    for (const Lane& lane : scene.lanes) {
      const Projection pr = project(lane.centerline, p);
      const double z = pr.distance - lane.half_width;
      if (z < best_z) {
        best_z = z;
        best_dir = pr.distance > 0.0 ? (p - pr.point) * (1.0 / pr.distance) : Vec2{};
      }
    }
    if (!scene.lanes.empty() && best_z > -w) {
      out.score.road_departure += smooth_hinge(best_z, w);
      acc(1, i, best_dir * smooth_hinge_slope(best_z, w));
    }
  }

  // Kinematics over the chain ego, p0, ..., p_{T-1}; index 0 of the chain is fixed.
  auto chain = [&](std::size_t k) { return k == 0 ? scene.ego.position : detail::row_point(waypoints, k - 1); };
  for (std::size_t k = 1; k <= n; ++k) {
    const Vec2 d = chain(k) - chain(k - 1);
    const double len = detail::safe_norm(d);
    const double z = len / dt - lim.v_max;
    if (z <= -w) continue;
    out.score.kinematic += smooth_hinge(z, w);
    const Vec2 g = d * (smooth_hinge_slope(z, w) / (len * dt));
    acc(2, k - 1, g);
    if (k >= 2) acc(2, k - 2, g * -1.0);
  }
  for (std::size_t k = 1; k + 1 <= n; ++k) {
    const auto term = detail::curvature(chain(k - 1), chain(k), chain(k + 1));
    // Normalized so the margin is a fraction of kappa_max.
    const double z = (std::abs(term.kappa) - lim.kappa_max) / lim.kappa_max;
    if (z <= -w) continue;
    out.score.kinematic += smooth_hinge(z, w);
    const double s = smooth_hinge_slope(z, w) * (term.kappa >= 0.0 ? 1.0 : -1.0) / lim.kappa_max;
    if (k >= 2) acc(2, k - 2, term.d_prev * s);
    acc(2, k - 1, term.d_mid * s);
    acc(2, k, term.d_next * s);
  }
  return out;
}

inline ConstraintScore constraint_eval(const Trajectory& traj, const Scene& scene,
                                       const Limits& lim = default_limits()) {
  return evaluate_constraints(traj.waypoints, scene, traj.dt, lim, false).score;
}

/// Differentiable 1 x 3 (collision, road_departure, kinematic) node over waypoints.
inline diff::Var constraint_vector(diff::Tape& tape, diff::Var waypoints, const Scene& scene, double dt,
                                   const Limits& lim = default_limits()) {
  const bool grad = tape.recording() && tape.needs_grad(waypoints);
  ConstraintEvaluation ev = evaluate_constraints(tape.value(waypoints), scene, dt, lim, grad);
  diff::Tensor2 value(1, 3, {ev.score.collision, ev.score.road_departure, ev.score.kinematic});
  const std::size_t rows = tape.value(waypoints).rows;
  const std::size_t cols = tape.value(waypoints).cols;
  return diff::custom_unary(tape, waypoints, std::move(value),
                            [jac = std::move(ev.jacobian), rows, cols](const diff::Tensor2& g) {
                              diff::Tensor2 gi(rows, cols);
                              for (std::size_t r = 0; r < 3; ++r)
                                for (std::size_t c = 0; c < gi.size(); ++c) gi.data[c] += g.data[r] * jac(r, c);
                              return gi;
                            });
}

// ---------------------------------------------------------------------------
// Hard checks used by evaluation metrics.

/// True if any of the first `steps` waypoints lies inside r_o + r_ego of a propagated obstacle.
inline bool hard_collision(const Trajectory& traj, const Scene& scene, std::size_t steps,
                           const Limits& lim = default_limits()) {
  steps = std::min(steps, traj.steps());
  for (std::size_t i = 0; i < steps; ++i) {
    const Vec2 p = traj.point(i);
    const double t = static_cast<double>(i + 1) * traj.dt;
    for (const Obstacle& o : scene.obstacles)
      if (norm(p - o.at(t)) < o.radius + lim.ego_radius) return true;
  }
  return false;
}

/// True if every waypoint lies within the half-width of some lane centerline.
inline bool road_compliant(const Trajectory& traj, const Scene& scene) {
  for (std::size_t i = 0; i < traj.steps(); ++i) {
    const Vec2 p = traj.point(i);
    bool inside = false;
    for (const Lane& lane : scene.lanes) inside = inside || project(lane.centerline, p).distance <= lane.half_width;
    if (!inside) return false;
  }
  return true;
}

}  // namespace cfmplan::scenario
