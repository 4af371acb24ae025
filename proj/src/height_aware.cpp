#include "hgbev/height_aware.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>

namespace hgbev {

const char* to_string(HeightKind k) {
  switch (k) {
    case HeightKind::current: return "current";
    case HeightKind::historical: return "historical";
    case HeightKind::warped_historical: return "warped_historical";
    case HeightKind::fused: return "fused";
    case HeightKind::ground_truth: return "ground_truth";
  }
  return "?";
}

HeightField HeightField::uniform(int h, int w, int d, HeightKind kind) {
  return {Tensor({h, w, d}, 1.0 / d), kind};
}

HeightField HeightField::from_rows(const Tensor& rows, int h, int w, HeightKind kind) {
  if (rows.rank() != 2 || rows.dim(0) != h * w)
    throw std::invalid_argument("HeightField: expected (" + std::to_string(h * w) + ", D) rows, got " +
                                shape_str(rows.shape));
  return {rows.reshaped({h, w, rows.dim(1)}), kind};
}

double HeightField::normalization_error() const {
  double worst = 0;
  const long cells = static_cast<long>(h()) * w();
  for (long c = 0; c < cells; ++c) {
    double s = 0;
    for (int m = 0; m < d(); ++m) {
      const double v = values[c * d() + m];
      if (!(v >= 0)) worst = std::max(worst, std::isfinite(v) ? -v : INFINITY);
      s += v;
    }
    worst = std::max(worst, std::isfinite(s) ? std::abs(s - 1) : INFINITY);
  }
  return worst;
}

// ---------------------------------------------------------------- prediction

void init_height_head(ParamStore& store, const std::string& prefix, int channels, int hidden,
                      int d_bins, std::mt19937_64& rng) {
  init_linear(store, prefix + ".fc1", channels, hidden, rng);
  store.add(prefix + ".fc2.w", init::uniform({hidden, d_bins}, 0.05, rng));
  store.add(prefix + ".fc2.b", init::zeros({d_bins}));
}

Var predict_height(Graph& g, ParamStore& store, const std::string& prefix, Var features) {
  const int channels = store.value(prefix + ".fc1.w").dim(0);
  const Shape& s = g.shape(features);
  if (s.size() != 2 || s[1] != channels)
    throw std::invalid_argument("predict_height: features " + shape_str(s) + " do not match head input " +
                                std::to_string(channels));
  Var h = ops::relu(g, apply_linear(g, store, prefix + ".fc1", features));
  Var logits = apply_linear(g, store, prefix + ".fc2", h);
  return ops::softmax(g, logits, g.shape(logits)[1]);
}

HeightField predict_height_field(const Tensor& features, ParamStore& store, const std::string& prefix,
                                 HeightKind kind) {
  if (features.rank() != 3) throw std::invalid_argument("predict_height_field: features must be (H, W, C)");
  const int h = features.dim(0), w = features.dim(1);
  Graph g(false);
  Var f = g.constant(features.reshaped({h * w, features.dim(2)}));
  return HeightField::from_rows(g.value(predict_height(g, store, prefix, f)), h, w, kind);
}

// ---------------------------------------------------------------- warping

WarpPlan make_warp_plan(const GridSpec& spec, const EgoMotion2D& motion) {
  motion.validate();
  WarpPlan plan;
  plan.uv.resize(static_cast<size_t>(2 * spec.n_cells()));
  plan.valid.resize(static_cast<size_t>(spec.n_cells()));
  for (int i = 0; i < spec.h_cells; ++i)
    for (int j = 0; j < spec.w_cells; ++j) {
      const int r = i * spec.w_cells + j;
      const Point2 p = warp_point(cell_center(spec, i, j), motion);
      const Point2 q = grid_coords(spec, p.x, p.y);
      plan.uv[static_cast<size_t>(2 * r)] = q.x;
      plan.uv[static_cast<size_t>(2 * r + 1)] = q.y;
      plan.valid[static_cast<size_t>(r)] = inside_grid(spec, p.x, p.y) ? 1 : 0;
    }
  return plan;
}

Var warp_height(Graph& g, Var hist, const GridSpec& spec, const EgoMotion2D& motion) {
  const Shape& s = g.shape(hist);
  if (s.size() != 2 || s[0] != spec.n_cells())
    throw std::invalid_argument("warp_height: field " + shape_str(s) + " does not match the grid");
  const int d = s[1];
  WarpPlan plan = make_warp_plan(spec, motion);
  Var map = ops::reshape(g, hist, {spec.h_cells, spec.w_cells, d});
  Var sampled = ops::grid_sample(g, map, std::move(plan.uv), std::move(plan.valid), 1.0 / d);
  return ops::normalize_rows(g, sampled);
}

HeightField warp_height_field(const HeightField& hist, const EgoMotion2D& motion, const GridSpec& spec) {
  if (hist.kind != HeightKind::historical)
    throw std::invalid_argument("warp_height_field: expects a historical field");
  if (hist.h() != spec.h_cells || hist.w() != spec.w_cells)
    throw std::invalid_argument("warp_height_field: field shape does not match the grid");
  Graph g(false);
  Var out = warp_height(g, g.constant(hist.rows()), spec, motion);
  return HeightField::from_rows(g.value(out), spec.h_cells, spec.w_cells, HeightKind::warped_historical);
}

// ---------------------------------------------------------------- fusion

namespace {

DeformAttnShape dca_attention_shape(const DcaShape& s) {
  DeformAttnShape a;
  a.query_dim = s.d_bins;
  a.value_dim = s.d_bins;
  a.channels = s.d_bins;
  a.heads = 1;
  a.points = s.points;
  a.groups = 1;
  return a;
}

std::shared_ptr<const std::vector<kernels::SampleEntry>> cell_entries(const GridSpec& spec) {
  auto entries = std::make_shared<std::vector<kernels::SampleEntry>>();
  entries->reserve(static_cast<size_t>(spec.n_cells()));
  for (int i = 0; i < spec.h_cells; ++i)
    for (int j = 0; j < spec.w_cells; ++j) {
      const int r = i * spec.w_cells + j;
      entries->push_back({r, r, 0, static_cast<double>(j), static_cast<double>(i), 1.0});
    }
  return entries;
}

}  // namespace

void init_dca(ParamStore& store, const std::string& prefix, const DcaShape& s, std::mt19937_64& rng) {
  const DeformAttnShape a = dca_attention_shape(s);
  init_deform_attention(store, prefix + ".cur", a, rng);
  init_deform_attention(store, prefix + ".hist", a, rng);
  init_linear(store, prefix + ".mlp1", s.d_bins, s.hidden, rng);
  store.add(prefix + ".mlp2.w", init::uniform({s.hidden, s.d_bins}, 0.05, rng));
  store.add(prefix + ".mlp2.b", init::zeros({s.d_bins}));
}

Var dca_fuse(Graph& g, ParamStore& store, const std::string& prefix, const DcaShape& s,
             const GridSpec& spec, Var cur, Var warped_hist) {
  const Shape want{spec.n_cells(), s.d_bins};
  if (g.shape(cur) != want || g.shape(warped_hist) != want)
    throw std::invalid_argument("dca_fuse: fields must both be " + shape_str(want));
  const DeformAttnShape a = dca_attention_shape(s);
  auto entries = cell_entries(spec);
  const Shape map_shape{1, spec.h_cells, spec.w_cells, s.d_bins};
  Var branch_cur = deformable_attention(g, store, prefix + ".cur", a, cur,
                                        ops::reshape(g, warped_hist, map_shape), entries, spec.n_cells());
  Var branch_hist = deformable_attention(g, store, prefix + ".hist", a, warped_hist,
                                         ops::reshape(g, cur, map_shape), entries, spec.n_cells());
  Var h = ops::relu(g, apply_linear(g, store, prefix + ".mlp1", ops::add(g, branch_cur, branch_hist)));
  return ops::softmax(g, apply_linear(g, store, prefix + ".mlp2", h), s.d_bins);
}

HeightField dca_fuse(const HeightField& cur, const HeightField& warped_hist, ParamStore& store,
                     const std::string& prefix, const DcaShape& shape, const GridSpec& spec) {
  if (cur.values.shape != warped_hist.values.shape)
    throw std::invalid_argument("dca_fuse: field shapes differ");
  Graph g(false);
  Var out = dca_fuse(g, store, prefix, shape, spec, g.constant(cur.rows()), g.constant(warped_hist.rows()));
  return HeightField::from_rows(g.value(out), spec.h_cells, spec.w_cells, HeightKind::fused);
}

// ---------------------------------------------------------------- selection

std::vector<int> topk_bins(const double* probs, int d_bins, int n_ref) {
  if (n_ref < 1 || n_ref > d_bins)
    throw std::invalid_argument("top-k heights: n_ref " + std::to_string(n_ref) + " outside 1.." +
                                std::to_string(d_bins));
  std::vector<int> idx(static_cast<size_t>(d_bins));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [probs](int a, int b) { return probs[a] > probs[b]; });
  idx.resize(static_cast<size_t>(n_ref));
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<double> sample_topk_heights(const HeightField& fused, int i, int j, int n_ref,
                                        const GridSpec& spec) {
  if (fused.d() != spec.d_bins) throw std::invalid_argument("sample_topk_heights: bin count mismatch");
  std::vector<double> z;
  for (int m : topk_bins(fused.cell(i, j), fused.d(), n_ref)) z.push_back(bin_center(spec, m + 1));
  return z;
}

std::vector<double> uniform_heights(const GridSpec& spec, int n) {
  if (n < 1) throw std::invalid_argument("uniform_heights: n must be positive");
  std::vector<double> z(static_cast<size_t>(n));
  for (int k = 0; k < n; ++k) z[static_cast<size_t>(k)] = spec.z_range.min + (k + 0.5) * spec.z_range.span() / n;
  return z;
}

// ---------------------------------------------------------------- supervision

double gaussian_kernel(double z, double z_m, double sigma) {
  const double d = z - z_m;
  return std::exp(-d * d / (2 * sigma * sigma));
}

HeightField gt_height_field(const std::vector<Box3D>& boxes, const GridSpec& spec,
                            const GaussianTargetParams& params, std::vector<int>* covering_box) {
  if (spec.n_cells() <= 0 || spec.d_bins <= 0) throw std::invalid_argument("gt_height_field: empty grid");
  if (!(params.sigma > 0)) throw std::invalid_argument("gt_height_field: sigma must be positive");
  const int d = spec.d_bins;
  HeightField out = HeightField::uniform(spec.h_cells, spec.w_cells, d, HeightKind::ground_truth);
  if (covering_box) covering_box->assign(static_cast<size_t>(spec.n_cells()), -1);

  std::vector<double> zgt(boxes.size());
  for (size_t b = 0; b < boxes.size(); ++b) {
    const double z = boxes[b].center[2];
    zgt[b] = std::clamp(z, spec.z_range.min, spec.z_range.max);
    if (zgt[b] != z)
      std::cerr << "warning: box " << b << " center height " << z << " clamped to the z range\n";
  }
  std::vector<double> centers(static_cast<size_t>(d));
  for (int m = 0; m < d; ++m) centers[static_cast<size_t>(m)] = bin_center(spec, m + 1);

  for (int i = 0; i < spec.h_cells; ++i)
    for (int j = 0; j < spec.w_cells; ++j) {
      const Point2 p = cell_center(spec, i, j);
      int owner = -1;
      double best = INFINITY;
      for (size_t b = 0; b < boxes.size(); ++b) {
        if (!footprint_contains(boxes[b], p.x, p.y)) continue;
        const double dist = std::hypot(p.x - boxes[b].center[0], p.y - boxes[b].center[1]);
        if (dist < best) {
          best = dist;
          owner = static_cast<int>(b);
        }
      }
      if (owner < 0) continue;
      if (covering_box) (*covering_box)[static_cast<size_t>(i * spec.w_cells + j)] = owner;
      double norm = 0;
      for (int m = 0; m < d; ++m) norm += gaussian_kernel(zgt[static_cast<size_t>(owner)], centers[static_cast<size_t>(m)], params.sigma);
      double* cell = out.values.ptr() + (static_cast<long>(i) * spec.w_cells + j) * d;
      for (int m = 0; m < d; ++m)
        cell[m] = gaussian_kernel(zgt[static_cast<size_t>(owner)], centers[static_cast<size_t>(m)], params.sigma) / norm;
    }
  return out;
}

Var height_loss(Graph& g, Var fused, const Tensor& gt_rows) {
  if (g.shape(fused) != gt_rows.shape)
    throw std::invalid_argument("height_loss: shapes " + shape_str(g.shape(fused)) + " and " +
                                shape_str(gt_rows.shape) + " differ");
  return ops::cross_entropy_probs(g, fused, gt_rows, 1e-12);
}

double height_loss(const HeightField& fused, const HeightField& gt) {
  if (fused.values.shape != gt.values.shape) throw std::invalid_argument("height_loss: shape mismatch");
  Graph g(false);
  return g.value(height_loss(g, g.constant(fused.rows()), gt.rows()))[0];
}

}  // namespace hgbev
