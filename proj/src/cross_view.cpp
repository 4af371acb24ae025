#include "hgbev/cross_view.hpp"

#include "neighbor_hits.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace hgbev {

ViewList make_view_list(const std::vector<CameraModel>& cams, double stride) {
  if (cams.empty()) throw std::invalid_argument("camera list is empty");
  if (static_cast<int>(cams.size()) > kernels::kMaxViews)
    throw std::invalid_argument("at most " + std::to_string(kernels::kMaxViews) + " cameras are supported");
  auto views = std::make_shared<std::vector<kernels::ViewGeometry>>();
  for (const CameraModel& c : cams) views->push_back({c.projection, c.image_w, c.image_h, stride});
  return views;
}

namespace {

DeformAttnShape sca_shape(const DhcaShape& s) {
  DeformAttnShape a;
  a.query_dim = s.channels;
  a.value_dim = s.channels;
  a.channels = s.channels;
  a.heads = s.heads;
  a.points = s.points;
  a.groups = s.n_ref;
  return a;
}

void require_queries(Graph& g, Var q, const DhcaShape& s, const char* op) {
  const Shape& qs = g.shape(q);
  if (qs.size() != 2 || qs[1] != s.channels)
    throw std::invalid_argument(std::string(op) + ": queries must be (N, " + std::to_string(s.channels) +
                                "), got " + shape_str(qs));
}

}  // namespace

void init_dhca(ParamStore& store, const std::string& prefix, const DhcaShape& s, std::mt19937_64& rng) {
  init_deform_attention(store, prefix + ".sca", sca_shape(s), rng);
  if (s.neighbors <= 0) return;
  const int m = s.neighbors;
  Tensor tag({s.n_ref, m * 2});
  for (int r = 0; r < s.n_ref; ++r)
    for (int k = 0; k < m; ++k) {
      const double angle = 2 * std::numbers::pi * (k + 0.5 * (r % 2)) / m;
      tag[r * m * 2 + 2 * k] = s.neighbor_radius * std::cos(angle);
      tag[r * m * 2 + 2 * k + 1] = s.neighbor_radius * std::sin(angle);
    }
  store.add(prefix + ".nbr.w", init::zeros({s.channels, m * 2}));
  store.add(prefix + ".nbr.tag", std::move(tag));
  store.add(prefix + ".edge.w", init::zeros({s.channels, m * s.channels}));
  store.add(prefix + ".edge.tag", init::zeros({s.n_ref, m * s.channels}));
}

Var neighbor_offsets(Graph& g, ParamStore& store, const std::string& prefix, const DhcaShape& s,
                     Var queries) {
  require_queries(g, queries, s, "neighbor_offsets");
  const int n = g.shape(queries)[0];
  Var off = ops::linear_tagged(g, queries, g.param(store, prefix + ".nbr.w"),
                               g.param(store, prefix + ".nbr.tag"));
  return ops::reshape(g, off, {n * s.n_ref * s.neighbors, 2});
}

Var edge_weights(Graph& g, ParamStore& store, const std::string& prefix, const DhcaShape& s,
                 Var queries) {
  require_queries(g, queries, s, "edge_weights");
  const int n = g.shape(queries)[0];
  Var logits = ops::linear_tagged(g, queries, g.param(store, prefix + ".edge.w"),
                                  g.param(store, prefix + ".edge.tag"));
  Var w = ops::softmax(g, logits, s.neighbors, s.channels);
  return ops::reshape(g, w, {n * s.n_ref * s.neighbors, s.channels});
}

std::shared_ptr<const std::vector<kernels::SampleEntry>> reference_entries(
    const std::vector<ReferencePoint3D>& refs, const std::vector<CameraModel>& cams, double stride) {
  if (cams.empty()) throw std::invalid_argument("reference_entries: camera list is empty");
  auto entries = std::make_shared<std::vector<kernels::SampleEntry>>();
  entries->reserve(refs.size() * 2);
  std::vector<PixelProjection> hits;
  std::vector<int> hit_view;
  for (size_t q = 0; q < refs.size(); ++q) {
    hits.clear();
    hit_view.clear();
    for (size_t v = 0; v < cams.size(); ++v) {
      const PixelProjection p = project_point(refs[q], cams[v]);
      if (!p.valid) continue;
      hits.push_back(p);
      hit_view.push_back(static_cast<int>(v));
    }
    const double scale = hits.empty() ? 0.0 : 1.0 / static_cast<double>(hits.size());
    for (size_t h = 0; h < hits.size(); ++h)
      entries->push_back({static_cast<int>(q), static_cast<int>(q), hit_view[h], hits[h].u / stride,
                          hits[h].v / stride, scale});
  }
  return entries;
}

Var ref_point_features(Graph& g, ParamStore& store, const std::string& prefix, const DhcaShape& s,
                       Var queries, const MultiViewFeatures& views, const std::vector<CameraModel>& cams,
                       const std::vector<ReferencePoint3D>& refs) {
  require_queries(g, queries, s, "ref_point_features");
  if (static_cast<int>(cams.size()) != views.n_view)
    throw std::invalid_argument("ref_point_features: camera count does not match the feature views");
  const int n = g.shape(queries)[0];
  if (static_cast<int>(refs.size()) != n * s.n_ref)
    throw std::invalid_argument("ref_point_features: expected " + std::to_string(n * s.n_ref) +
                                " reference points");
  auto entries = reference_entries(refs, cams, views.stride);
  return deformable_attention(g, store, prefix + ".sca", sca_shape(s), queries, views.maps, entries,
                              n * s.n_ref);
}

Var neighbor_features(Graph& g, const MultiViewFeatures& views, const ViewList& geometry,
                      const std::vector<ReferencePoint3D>& refs, Var offsets, int neighbors) {
  auto base = std::make_shared<std::vector<double>>();
  base->reserve(refs.size() * 3);
  for (const ReferencePoint3D& p : refs) {
    base->push_back(p.x);
    base->push_back(p.y);
    base->push_back(p.z);
  }
  return ops::neighbor_sample(g, views.maps, offsets, geometry, base, neighbors);
}

Var aggregate_reference(Graph& g, Var x_p, Var X, Var W, int neighbors) {
  return ops::weighted_neighbor_sum(g, x_p, X, W, neighbors);
}

Var dhca_query(Graph& g, ParamStore& store, const std::string& prefix, const DhcaShape& s,
               Var queries, const MultiViewFeatures& views, const std::vector<CameraModel>& cams,
               const std::vector<ReferencePoint3D>& refs, DhcaTrace* trace) {
  Var x = ref_point_features(g, store, prefix, s, queries, views, cams, refs);
  if (s.neighbors > 0) {
    Var off = neighbor_offsets(g, store, prefix, s, queries);
    Var X = neighbor_features(g, views, make_view_list(cams, views.stride), refs, off, s.neighbors);
    Var W = edge_weights(g, store, prefix, s, queries);
    x = aggregate_reference(g, x, X, W, s.neighbors);
    if (trace) {
      const Tensor& o = g.value(off);
      trace->neighbor_points.clear();
      trace->neighbor_points.reserve(refs.size() * static_cast<size_t>(s.neighbors));
      for (size_t q = 0; q < refs.size(); ++q)
        for (int k = 0; k < s.neighbors; ++k) {
          const long row = static_cast<long>(q) * s.neighbors + k;
          trace->neighbor_points.push_back({refs[q].x + o[2 * row], refs[q].y + o[2 * row + 1], refs[q].z});
        }
    }
  } else if (trace) {
    trace->neighbor_points.clear();
  }
  return ops::sum_row_groups(g, x, s.n_ref);
}

}  // namespace hgbev
