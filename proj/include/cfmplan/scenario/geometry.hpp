#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

namespace cfmplan::scenario {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  Vec2& operator+=(Vec2 o) {
    x += o.x;
    y += o.y;
    return *this;
  }
  friend bool operator==(Vec2, Vec2) = default;
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }
inline Vec2 rotate(Vec2 a, double ang) {
  const double c = std::cos(ang), s = std::sin(ang);
  return {c * a.x - s * a.y, s * a.x + c * a.y};
}
inline Vec2 unit(double ang) { return {std::cos(ang), std::sin(ang)}; }

inline double wrap_angle(double a) {
  while (a > std::numbers::pi) a -= 2.0 * std::numbers::pi;
  while (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

/// Closest point on a polyline with its arc-length coordinate.
struct Projection {
  Vec2 point;
  double distance = std::numeric_limits<double>::infinity();
  double arc_length = 0.0;
  std::size_t segment = 0;
};

inline Projection project(std::span<const Vec2> poly, Vec2 p) {
  Projection best;
  double s0 = 0.0;
  for (std::size_t i = 0; i + 1 < poly.size(); ++i) {
    const Vec2 a = poly[i];
    const Vec2 ab = poly[i + 1] - a;
    const double len2 = dot(ab, ab);
    const double len = std::sqrt(len2);
    double u = len2 > 0.0 ? dot(p - a, ab) / len2 : 0.0;
    u = std::clamp(u, 0.0, 1.0);
    const Vec2 q = a + ab * u;
    const double d = norm(p - q);
    if (d < best.distance) {
      best = {q, d, s0 + u * len, i};
    }
    s0 += len;
  }
  return best;
}

inline double polyline_length(std::span<const Vec2> poly) {
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < poly.size(); ++i) s += norm(poly[i + 1] - poly[i]);
  return s;
}

/// Point and unit tangent at arc length s (clamped to the polyline).
inline std::pair<Vec2, Vec2> point_at(std::span<const Vec2> poly, double s) {
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < poly.size(); ++i) {
    const Vec2 ab = poly[i + 1] - poly[i];
    const double len = norm(ab);
    if (acc + len >= s || i + 2 == poly.size()) {
      const double u = len > 0.0 ? std::clamp((s - acc) / len, 0.0, 1.0) : 0.0;
      return {poly[i] + ab * u, len > 0.0 ? ab * (1.0 / len) : Vec2{1.0, 0.0}};
    }
    acc += len;
  }
  return {poly.front(), {1.0, 0.0}};
}

/// Resample at fixed arc-length spacing, endpoints inclusive.
inline std::vector<std::pair<Vec2, Vec2>> resample(std::span<const Vec2> poly, double spacing) {
  const double total = polyline_length(poly);
  const auto n = static_cast<std::size_t>(std::floor(total / spacing + 1e-9));
  std::vector<std::pair<Vec2, Vec2>> out;
  out.reserve(n + 2);
  for (std::size_t k = 0; k <= n; ++k) out.push_back(point_at(poly, static_cast<double>(k) * spacing));
  if (total - static_cast<double>(n) * spacing > 1e-9) out.push_back(point_at(poly, total));
  return out;
}

}  // namespace cfmplan::scenario
