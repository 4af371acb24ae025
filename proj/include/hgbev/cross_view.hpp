#pragma once

// Cross-view aggregation around 3D reference points: deformable attention at
// the projected reference point (x_p), bilinear features at learned planar
// neighbors (x_k), per-channel edge weights (w_k) and the residual update
// x'_p = x_p + sum_k w_k * x_k. Reference points of a cell are summed.
//
// Reference point r of cell n is row n * n_ref + r; neighbor k of that point
// is row (n * n_ref + r) * M + k.

#include "hgbev/attention.hpp"
#include "hgbev/geometry.hpp"

#include <memory>
#include <vector>

namespace hgbev {

/// Per-view image feature maps (n_view, rows, cols, C) with their stride.
struct MultiViewFeatures {
  Var maps;
  int n_view = 0;
  double stride = 8.0;
};

using ViewList = std::shared_ptr<const std::vector<kernels::ViewGeometry>>;
ViewList make_view_list(const std::vector<CameraModel>& cams, double stride);

struct DhcaShape {
  int channels = 16;
  int n_ref = 4;
  int neighbors = 4;            // M; 0 disables the neighbor branch
  int heads = 4;
  int points = 2;
  double neighbor_radius = 1.0;  // meters, initial ring of the offset head
};

/// Registers `<prefix>.sca` (deformable attention, one offset group per
/// reference index), `<prefix>.nbr.{w,tag}` (C -> M*2 with a per-index tag
/// bias) and `<prefix>.edge.{w,tag}` (C -> M*C).
void init_dhca(ParamStore& store, const std::string& prefix, const DhcaShape& shape, std::mt19937_64& rng);

/// (N, C) queries -> (N * n_ref * M, 2) offsets in meters.
Var neighbor_offsets(Graph& g, ParamStore& store, const std::string& prefix, const DhcaShape& shape,
                     Var queries);
/// (N, C) queries -> (N * n_ref * M, C) weights, softmax over M per channel.
Var edge_weights(Graph& g, ParamStore& store, const std::string& prefix, const DhcaShape& shape,
                 Var queries);

/// Hit-view entries of every reference point (out/param row = point index).
std::shared_ptr<const std::vector<kernels::SampleEntry>> reference_entries(
    const std::vector<ReferencePoint3D>& refs, const std::vector<CameraModel>& cams, double stride);

/// (N * n_ref, C) deformable-attention features x_p; zero rows for points
/// without hit views.
Var ref_point_features(Graph& g, ParamStore& store, const std::string& prefix, const DhcaShape& shape,
                       Var queries, const MultiViewFeatures& views, const std::vector<CameraModel>& cams,
                       const std::vector<ReferencePoint3D>& refs);

/// (N * n_ref * M, C) hit-view averaged bilinear features at refs + offsets.
Var neighbor_features(Graph& g, const MultiViewFeatures& views, const ViewList& geometry,
                      const std::vector<ReferencePoint3D>& refs, Var offsets, int neighbors);

/// x_p (Q, C), X (Q*M, C), W (Q*M, C) -> x_p + sum_k W_k * X_k.
Var aggregate_reference(Graph& g, Var x_p, Var X, Var W, int neighbors);

struct DhcaTrace {
  std::vector<ReferencePoint3D> neighbor_points;  // v_k, row-aligned with offsets
};

/// Full cross-view update of every cell: (N, C) queries -> (N, C) summed
/// refined reference features.
Var dhca_query(Graph& g, ParamStore& store, const std::string& prefix, const DhcaShape& shape,
               Var queries, const MultiViewFeatures& views, const std::vector<CameraModel>& cams,
               const std::vector<ReferencePoint3D>& refs, DhcaTrace* trace = nullptr);

}  // namespace hgbev
