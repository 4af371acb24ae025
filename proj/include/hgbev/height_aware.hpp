#pragma once

// Per-cell height distributions: prediction, ego-motion warping, dual-branch
// fusion, top-k height selection, Gaussian targets and the height loss.
//
// Graph functions work on (n_cells, D) rows in row-major cell order
// (cell (i, j) is row i * w_cells + j). HeightField is the plain-value view.

#include "hgbev/attention.hpp"
#include "hgbev/box.hpp"
#include "hgbev/geometry.hpp"

#include <string>
#include <vector>

namespace hgbev {

enum class HeightKind { current, historical, warped_historical, fused, ground_truth };
const char* to_string(HeightKind k);

struct HeightField {
  Tensor values;  // (h_cells, w_cells, d_bins)
  HeightKind kind = HeightKind::current;

  static HeightField uniform(int h, int w, int d, HeightKind kind);
  static HeightField from_rows(const Tensor& rows, int h, int w, HeightKind kind);

  int h() const { return values.dim(0); }
  int w() const { return values.dim(1); }
  int d() const { return values.dim(2); }
  double at(int i, int j, int m) const { return values[(static_cast<long>(i) * w() + j) * d() + m]; }
  const double* cell(int i, int j) const { return values.ptr() + (static_cast<long>(i) * w() + j) * d(); }
  /// (h*w, d) view.
  Tensor rows() const { return values.reshaped({h() * w(), d()}); }

  /// Largest violation of nonnegativity / unit cell sums.
  double normalization_error() const;
};

struct GaussianTargetParams {
  double sigma = 1.0;
};

// ---------------------------------------------------------------- prediction

/// Shared head `<prefix>.fc1` (C -> hidden, ReLU) and `<prefix>.fc2` (hidden -> D).
/// The final layer starts small so the initial distribution is near uniform.
void init_height_head(ParamStore& store, const std::string& prefix, int channels, int hidden,
                      int d_bins, std::mt19937_64& rng);
/// features (N, C) -> softmax distributions (N, D).
Var predict_height(Graph& g, ParamStore& store, const std::string& prefix, Var features);
HeightField predict_height_field(const Tensor& features, ParamStore& store, const std::string& prefix,
                                 HeightKind kind = HeightKind::current);

// ---------------------------------------------------------------- warping

/// Sample locations of the previous-frame grid for every current cell, in
/// previous-grid (column, row) coordinates; valid=0 where the mapped point
/// leaves the grid.
struct WarpPlan {
  std::vector<double> uv;
  std::vector<char> valid;
};
WarpPlan make_warp_plan(const GridSpec& spec, const EgoMotion2D& motion);

/// hist (N, D) -> warped and renormalized (N, D); outside cells are uniform.
Var warp_height(Graph& g, Var hist, const GridSpec& spec, const EgoMotion2D& motion);
HeightField warp_height_field(const HeightField& hist, const EgoMotion2D& motion, const GridSpec& spec);

// ---------------------------------------------------------------- fusion

struct DcaShape {
  int d_bins = 8;
  int points = 2;
  int hidden = 16;
};

/// Branches `<prefix>.cur` and `<prefix>.hist` (deformable attention over D
/// channels, one head) followed by `<prefix>.mlp1` / `<prefix>.mlp2`.
void init_dca(ParamStore& store, const std::string& prefix, const DcaShape& shape, std::mt19937_64& rng);
/// cur, warped_hist (N, D) -> fused distributions (N, D).
Var dca_fuse(Graph& g, ParamStore& store, const std::string& prefix, const DcaShape& shape,
             const GridSpec& spec, Var cur, Var warped_hist);
HeightField dca_fuse(const HeightField& cur, const HeightField& warped_hist, ParamStore& store,
                     const std::string& prefix, const DcaShape& shape, const GridSpec& spec);

// ---------------------------------------------------------------- selection

/// 0-based indices of the n_ref most probable bins (ties: lower index),
/// ascending.
std::vector<int> topk_bins(const double* probs, int d_bins, int n_ref);
std::vector<double> sample_topk_heights(const HeightField& fused, int i, int j, int n_ref,
                                        const GridSpec& spec);
/// Evenly spaced heights z_min + (k + 0.5) * span / n for the baseline.
std::vector<double> uniform_heights(const GridSpec& spec, int n);

// ---------------------------------------------------------------- supervision

double gaussian_kernel(double z, double z_m, double sigma);
/// Cells inside a box footprint get the normalized Gaussian over bin centers,
/// all others the uniform distribution. `covering_box` (optional) receives the
/// index of the box owning each cell, or -1.
HeightField gt_height_field(const std::vector<Box3D>& boxes, const GridSpec& spec,
                            const GaussianTargetParams& params,
                            std::vector<int>* covering_box = nullptr);

/// Mean over cells of the cross-entropy  -sum_m gt log fused.
Var height_loss(Graph& g, Var fused, const Tensor& gt_rows);
double height_loss(const HeightField& fused, const HeightField& gt);

}  // namespace hgbev
