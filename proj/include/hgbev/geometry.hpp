#pragma once

// BEV grid and height-bin geometry, camera projection, planar ego motion and
// the bilinear sampling primitive.
//
// Frames: the ego frame is x forward, y left, z up (meters). BEV cell (i, j)
// has row i along y and column j along x. Pixels: u is the column (rightward),
// v is the row (downward), integer values at pixel centers.

#include "hgbev/tensor.hpp"

#include <array>
#include <optional>
#include <utility>
#include <vector>

namespace hgbev {

struct Range {
  double min = 0;
  double max = 0;
  double span() const { return max - min; }
  bool operator==(const Range&) const = default;
};

struct GridSpec {
  int h_cells = 50;
  int w_cells = 50;
  Range x_range{-25.0, 25.0};
  Range y_range{-25.0, 25.0};
  Range z_range{-5.0, 3.0};
  int d_bins = 8;
  int c_channels = 16;

  /// Throws std::invalid_argument when any invariant fails.
  void validate() const;

  double cell_size_x() const { return x_range.span() / w_cells; }
  double cell_size_y() const { return y_range.span() / h_cells; }
  double bin_height() const { return z_range.span() / d_bins; }
  int n_cells() const { return h_cells * w_cells; }

  bool operator==(const GridSpec&) const = default;
};

struct Point2 {
  double x = 0, y = 0;
};

struct ReferencePoint3D {
  double x = 0, y = 0, z = 0;
  bool operator==(const ReferencePoint3D&) const = default;
};

/// Center height of 1-based bin m: z_min + (m - 0.5) * bin_height.
double bin_center(const GridSpec& spec, int m);
/// Index (0-based) of the bin containing z; z outside the range is clamped.
int bin_index_of(const GridSpec& spec, double z);

Point2 cell_center(const GridSpec& spec, int i, int j);
/// Cell containing (x, y), if inside the grid.
std::optional<std::pair<int, int>> nearest_cell(const GridSpec& spec, double x, double y);
/// Continuous (column, row) coordinates of a metric point; cell centers map to integers.
Point2 grid_coords(const GridSpec& spec, double x, double y);
bool inside_grid(const GridSpec& spec, double x, double y);

struct CameraModel {
  int camera_id = 0;
  std::array<double, 12> projection{};  // row-major 3x4, ego point -> homogeneous pixel
  int image_w = 160;
  int image_h = 90;

  void validate() const;
};

/// Pinhole camera at `position` looking along ego yaw `yaw` (level, no roll).
CameraModel make_pinhole_camera(int id, double yaw, std::array<double, 3> position, double focal,
                                double cx, double cy, int image_w, int image_h);

struct PixelProjection {
  double u = 0, v = 0;
  double depth = 0;
  bool valid = false;
};

PixelProjection project_point(const ReferencePoint3D& p, const CameraModel& cam);

struct Pose2D {
  double x = 0, y = 0, heading = 0;
};

/// Maps points of the current ego frame into the previous one: p' = R p + T.
struct EgoMotion2D {
  std::array<double, 4> rotation{1, 0, 0, 1};  // row-major 2x2
  std::array<double, 2> translation{0, 0};

  static EgoMotion2D identity() { return {}; }
  static EgoMotion2D from_rotation(double angle, double tx, double ty);
  /// Motion taking current-frame points to previous-frame points.
  static EgoMotion2D between(const Pose2D& previous, const Pose2D& current);

  /// Applies `this` then `next` (e.g. t -> t-1 followed by t-1 -> t-2).
  EgoMotion2D then(const EgoMotion2D& next) const;
  EgoMotion2D inverse() const;
  void validate() const;
};

Point2 warp_point(Point2 p, const EgoMotion2D& motion);

/// Clamp-to-edge bilinear lookup in a (rows, cols, channels) map at (u, v).
std::vector<double> bilinear_sample(const Tensor& map, double u, double v);

}  // namespace hgbev
