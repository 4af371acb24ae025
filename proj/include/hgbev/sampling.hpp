#pragma once

// Inline sampling math shared by the geometry API and the compute kernels.

#include <array>
#include <cmath>

namespace hgbev {

/// Depth below which a projected point is treated as behind the camera.
inline constexpr double kDepthEpsilon = 1e-6;

/// Corner indices and weights of a clamp-to-edge bilinear lookup.
///
/// Coordinates are (u, v) = (column, row) with integer values at cell
/// centers. Queries outside [0, cols-1] x [0, rows-1] are clamped, and the
/// derivative along a clamped axis is zero.
struct BilinearTap {
  int u0, u1, v0, v1;
  double fu, fv;
  bool u_free, v_free;  // false when the axis was clamped

  double w00() const { return (1 - fu) * (1 - fv); }
  double w01() const { return fu * (1 - fv); }
  double w10() const { return (1 - fu) * fv; }
  double w11() const { return fu * fv; }
};

inline BilinearTap bilinear_tap(double u, double v, int rows, int cols) {
  BilinearTap t{};
  const double umax = cols - 1, vmax = rows - 1;
  t.u_free = u > 0.0 && u < umax;
  t.v_free = v > 0.0 && v < vmax;
  const double uc = u < 0.0 ? 0.0 : (u > umax ? umax : u);
  const double vc = v < 0.0 ? 0.0 : (v > vmax ? vmax : v);
  t.u0 = static_cast<int>(std::floor(uc));
  t.v0 = static_cast<int>(std::floor(vc));
  if (t.u0 > cols - 1) t.u0 = cols - 1;
  if (t.v0 > rows - 1) t.v0 = rows - 1;
  t.u1 = t.u0 + 1 < cols ? t.u0 + 1 : t.u0;
  t.v1 = t.v0 + 1 < rows ? t.v0 + 1 : t.v0;
  t.fu = uc - t.u0;
  t.fv = vc - t.v0;
  return t;
}

/// Result of a 3x4 perspective projection.
struct Projection {
  double u = 0, v = 0, depth = 0;
  bool in_front = false;
};

inline Projection project_homogeneous(const std::array<double, 12>& P, double x, double y,
                                      double z) {
  const double a = P[0] * x + P[1] * y + P[2] * z + P[3];
  const double b = P[4] * x + P[5] * y + P[6] * z + P[7];
  const double c = P[8] * x + P[9] * y + P[10] * z + P[11];
  Projection p;
  p.depth = c;
  p.in_front = c > kDepthEpsilon;
  if (std::abs(c) > kDepthEpsilon) {
    p.u = a / c;
    p.v = b / c;
  }
  return p;
}

/// d(u, v)/d(x, y) of the projection at a point with depth `c` and pixel (u, v).
inline std::array<double, 4> projection_planar_jacobian(const std::array<double, 12>& P,
                                                        const Projection& p) {
  const double c = p.depth;
  return {(P[0] - p.u * P[8]) / c, (P[1] - p.u * P[9]) / c,  // du/dx, du/dy
          (P[4] - p.v * P[8]) / c, (P[5] - p.v * P[9]) / c};  // dv/dx, dv/dy
}

}  // namespace hgbev
