#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

namespace hgbev {

/// Oriented 3D box in the ego frame. `center` is the geometric center, so the
/// box spans center.z +- h/2.
struct Box3D {
  std::array<double, 3> center{0, 0, 0};
  std::array<double, 3> size{1, 1, 1};  // l (along yaw), w, h
  double yaw = 0;
  std::array<double, 2> velocity{0, 0};
  int class_id = 0;

  bool operator==(const Box3D&) const = default;
};

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
  a = std::remainder(a, 2 * std::numbers::pi);
  if (a <= -std::numbers::pi) a += 2 * std::numbers::pi;
  return a;
}

/// True if (x, y) lies inside the yaw-rotated footprint of `b`.
inline bool footprint_contains(const Box3D& b, double x, double y) {
  const double dx = x - b.center[0], dy = y - b.center[1];
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  return std::abs(lx) <= 0.5 * b.size[0] && std::abs(ly) <= 0.5 * b.size[1];
}

}  // namespace hgbev
