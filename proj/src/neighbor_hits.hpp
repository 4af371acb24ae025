#pragma once

#include "hgbev/kernels.hpp"
#include "hgbev/sampling.hpp"

#include <array>
#include <span>
#include <stdexcept>

namespace hgbev::kernels {

inline constexpr int kMaxViews = 16;

struct NeighborHit {
  int view;
  double fu, fv;  // feature-map coordinates
  Projection proj;
};

struct HitList {
  int count = 0;
  std::array<NeighborHit, kMaxViews> hits;
  bool empty() const { return count == 0; }
  const NeighborHit* begin() const { return hits.data(); }
  const NeighborHit* end() const { return hits.data() + count; }
  int size() const { return count; }
};

/// Views into which (x, y, z) projects in front of the camera and inside the image.
inline HitList neighbor_hits(std::span<const ViewGeometry> views, double x, double y, double z) {
  if (views.size() > static_cast<size_t>(kMaxViews))
    throw std::invalid_argument("neighbor_hits: too many views");
  HitList out;
  for (int i = 0; i < static_cast<int>(views.size()); ++i) {
    const auto& vg = views[static_cast<size_t>(i)];
    const Projection p = project_homogeneous(vg.projection, x, y, z);
    if (!p.in_front || p.u < 0 || p.u >= vg.image_w || p.v < 0 || p.v >= vg.image_h) continue;
    out.hits[static_cast<size_t>(out.count++)] = {i, p.u / vg.stride, p.v / vg.stride, p};
  }
  return out;
}

}  // namespace hgbev::kernels
