#include "hgbev/geometry.hpp"

#include "hgbev/sampling.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace hgbev {

void GridSpec::validate() const {
  if (h_cells <= 0 || w_cells <= 0) throw std::invalid_argument("GridSpec: cell counts must be positive");
  if (d_bins <= 0) throw std::invalid_argument("GridSpec: d_bins must be positive");
  if (c_channels <= 0) throw std::invalid_argument("GridSpec: c_channels must be positive");
  if (!(x_range.max > x_range.min) || !(y_range.max > y_range.min) || !(z_range.max > z_range.min))
    throw std::invalid_argument("GridSpec: every range needs max > min");
}

double bin_center(const GridSpec& spec, int m) {
  if (m < 1 || m > spec.d_bins)
    throw std::invalid_argument("bin_center: bin " + std::to_string(m) + " outside 1.." +
                                std::to_string(spec.d_bins));
  return spec.z_range.min + (m - 0.5) * spec.bin_height();
}

int bin_index_of(const GridSpec& spec, double z) {
  const int m = static_cast<int>(std::floor((z - spec.z_range.min) / spec.bin_height()));
  return std::clamp(m, 0, spec.d_bins - 1);
}

Point2 cell_center(const GridSpec& spec, int i, int j) {
  if (i < 0 || i >= spec.h_cells || j < 0 || j >= spec.w_cells)
    throw std::invalid_argument("cell_center: (" + std::to_string(i) + ", " + std::to_string(j) +
                                ") outside the grid");
  return {spec.x_range.min + (j + 0.5) * spec.cell_size_x(),
          spec.y_range.min + (i + 0.5) * spec.cell_size_y()};
}

bool inside_grid(const GridSpec& spec, double x, double y) {
  return x >= spec.x_range.min && x < spec.x_range.max && y >= spec.y_range.min &&
         y < spec.y_range.max;
}

std::optional<std::pair<int, int>> nearest_cell(const GridSpec& spec, double x, double y) {
  if (!inside_grid(spec, x, y)) return std::nullopt;
  const int j = std::min(spec.w_cells - 1, static_cast<int>((x - spec.x_range.min) / spec.cell_size_x()));
  const int i = std::min(spec.h_cells - 1, static_cast<int>((y - spec.y_range.min) / spec.cell_size_y()));
  return std::make_pair(i, j);
}

Point2 grid_coords(const GridSpec& spec, double x, double y) {
  return {(x - spec.x_range.min) / spec.cell_size_x() - 0.5,
          (y - spec.y_range.min) / spec.cell_size_y() - 0.5};
}

void CameraModel::validate() const {
  if (image_w <= 0 || image_h <= 0) throw std::invalid_argument("CameraModel: image size must be positive");
  for (double v : projection)
    if (!std::isfinite(v)) throw std::invalid_argument("CameraModel: non-finite projection entry");
  // Rank 3 iff some 3x3 minor is nonzero.
  const auto& P = projection;
  double best = 0;
  for (int skip = 0; skip < 4; ++skip) {
    int c[3], k = 0;
    for (int j = 0; j < 4; ++j)
      if (j != skip) c[k++] = j;
    const double det = P[c[0]] * (P[4 + c[1]] * P[8 + c[2]] - P[4 + c[2]] * P[8 + c[1]]) -
                       P[c[1]] * (P[4 + c[0]] * P[8 + c[2]] - P[4 + c[2]] * P[8 + c[0]]) +
                       P[c[2]] * (P[4 + c[0]] * P[8 + c[1]] - P[4 + c[1]] * P[8 + c[0]]);
    best = std::max(best, std::abs(det));
  }
  double scale = 0;
  for (double v : P) scale = std::max(scale, std::abs(v));
  if (best <= 1e-12 * scale * scale * scale)
    throw std::invalid_argument("CameraModel: projection must have rank 3");
}

CameraModel make_pinhole_camera(int id, double yaw, std::array<double, 3> position, double focal,
                                double cx, double cy, int image_w, int image_h) {
  // Camera axes in the ego frame: x right, y down, z forward.
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double R[3][3] = {{s, -c, 0}, {0, 0, -1}, {c, s, 0}};
  double t[3];
  for (int r = 0; r < 3; ++r)
    t[r] = -(R[r][0] * position[0] + R[r][1] * position[1] + R[r][2] * position[2]);
  const double K[3][3] = {{focal, 0, cx}, {0, focal, cy}, {0, 0, 1}};
  CameraModel cam;
  cam.camera_id = id;
  cam.image_w = image_w;
  cam.image_h = image_h;
  for (int r = 0; r < 3; ++r) {
    for (int col = 0; col < 3; ++col) {
      double acc = 0;
      for (int k = 0; k < 3; ++k) acc += K[r][k] * R[k][col];
      cam.projection[static_cast<size_t>(r * 4 + col)] = acc;
    }
    double acc = 0;
    for (int k = 0; k < 3; ++k) acc += K[r][k] * t[k];
    cam.projection[static_cast<size_t>(r * 4 + 3)] = acc;
  }
  return cam;
}

PixelProjection project_point(const ReferencePoint3D& p, const CameraModel& cam) {
  const Projection pr = project_homogeneous(cam.projection, p.x, p.y, p.z);
  PixelProjection out;
  out.u = pr.u;
  out.v = pr.v;
  out.depth = pr.depth;
  out.valid = pr.in_front && pr.u >= 0 && pr.u < cam.image_w && pr.v >= 0 && pr.v < cam.image_h;
  return out;
}

EgoMotion2D EgoMotion2D::from_rotation(double angle, double tx, double ty) {
  EgoMotion2D m;
  const double c = std::cos(angle), s = std::sin(angle);
  m.rotation = {c, -s, s, c};
  m.translation = {tx, ty};
  return m;
}

EgoMotion2D EgoMotion2D::between(const Pose2D& previous, const Pose2D& current) {
  // p_world = Rot(h_cur) p + t_cur;  p_prev = Rot(-h_prev) (p_world - t_prev)
  const double c = std::cos(-previous.heading), s = std::sin(-previous.heading);
  const double dx = current.x - previous.x, dy = current.y - previous.y;
  return from_rotation(current.heading - previous.heading, c * dx - s * dy, s * dx + c * dy);
}

EgoMotion2D EgoMotion2D::then(const EgoMotion2D& next) const {
  const auto& A = next.rotation;
  const auto& B = rotation;
  EgoMotion2D m;
  m.rotation = {A[0] * B[0] + A[1] * B[2], A[0] * B[1] + A[1] * B[3], A[2] * B[0] + A[3] * B[2],
                A[2] * B[1] + A[3] * B[3]};
  m.translation = {A[0] * translation[0] + A[1] * translation[1] + next.translation[0],
                   A[2] * translation[0] + A[3] * translation[1] + next.translation[1]};
  return m;
}

EgoMotion2D EgoMotion2D::inverse() const {
  const auto& R = rotation;
  EgoMotion2D m;
  m.rotation = {R[0], R[2], R[1], R[3]};
  m.translation = {-(R[0] * translation[0] + R[2] * translation[1]),
                   -(R[1] * translation[0] + R[3] * translation[1])};
  return m;
}

void EgoMotion2D::validate() const {
  const auto& R = rotation;
  const double tol = 1e-9;
  const bool ortho = std::abs(R[0] * R[0] + R[2] * R[2] - 1) <= tol &&
                     std::abs(R[1] * R[1] + R[3] * R[3] - 1) <= tol &&
                     std::abs(R[0] * R[1] + R[2] * R[3]) <= tol;
  const double det = R[0] * R[3] - R[1] * R[2];
  if (!ortho || std::abs(det - 1) > tol)
    throw std::invalid_argument("EgoMotion2D: rotation must be orthonormal with determinant +1");
}

Point2 warp_point(Point2 p, const EgoMotion2D& m) {
  return {m.rotation[0] * p.x + m.rotation[1] * p.y + m.translation[0],
          m.rotation[2] * p.x + m.rotation[3] * p.y + m.translation[1]};
}

std::vector<double> bilinear_sample(const Tensor& map, double u, double v) {
  if (map.rank() != 3 || map.numel() == 0)
    throw std::invalid_argument("bilinear_sample: map must be a non-empty (rows, cols, channels) array");
  if (!std::isfinite(u) || !std::isfinite(v))
    throw std::invalid_argument("bilinear_sample: non-finite query");
  const int rows = map.dim(0), cols = map.dim(1), c = map.dim(2);
  const BilinearTap t = bilinear_tap(u, v, rows, cols);
  std::vector<double> out(static_cast<size_t>(c));
  for (int k = 0; k < c; ++k)
    out[static_cast<size_t>(k)] = t.w00() * map[(t.v0 * cols + t.u0) * c + k] +
                                  t.w01() * map[(t.v0 * cols + t.u1) * c + k] +
                                  t.w10() * map[(t.v1 * cols + t.u0) * c + k] +
                                  t.w11() * map[(t.v1 * cols + t.u1) * c + k];
  return out;
}

}  // namespace hgbev
