#pragma once

// Dense center-cell detection head, its losses, decoding and a toy
// center-distance mAP.
//
// Regression channels per cell: dx, dy (center offset in cell units), z,
// log l, log w, log h, sin yaw, cos yaw, vx, vy.

#include "hgbev/autograd.hpp"
#include "hgbev/box.hpp"
#include "hgbev/geometry.hpp"
#include "hgbev/params.hpp"

#include <array>
#include <random>
#include <vector>

namespace hgbev {

inline constexpr int kRegChannels = 10;

struct HeadConfig {
  int num_classes = 2;
  int hidden = 16;
  double prior = 0.01;  // initial foreground probability of the class logits
};

/// Registers head.cls1 / head.cls2 / head.reg1 / head.reg2 (3x3 then 1x1 convs).
void init_head(ParamStore& store, int channels, const HeadConfig& cfg, std::mt19937_64& rng);

struct HeadOutput {
  Var cls;  // (N, K) logits
  Var reg;  // (N, 10)
};

HeadOutput head_forward(Graph& g, ParamStore& store, const GridSpec& spec, Var bev);

// ---------------------------------------------------------------- targets

std::array<double, kRegChannels> encode_box(const Box3D& box, const GridSpec& spec, int i, int j);
Box3D decode_box(const double* reg, const GridSpec& spec, int i, int j, int class_id);

struct DetectionTargets {
  Tensor cls;                // (N, K) one-hot on positive cells
  Tensor reg;                // (N, 10)
  std::vector<char> positive;
  std::vector<int> box_of_cell;  // owning box index or -1
  int n_pos = 0;
};

/// Each box claims the cell containing its center; on collisions the box
/// nearest to the cell center wins. Boxes outside the grid are skipped.
DetectionTargets encode_targets(const std::vector<Box3D>& boxes, const GridSpec& spec, int num_classes);

// ---------------------------------------------------------------- losses

struct LossWeights {
  double cls = 2.0;
  double reg = 0.25;
  double hgt = 1.0;
  void validate() const;
};

/// Sigmoid focal loss normalized by max(1, number of positive rows).
Var focal_loss(Graph& g, Var logits, const Tensor& targets, double alpha = 0.25, double gamma = 2.0);
/// Mean absolute error over the channels of positive rows; zero without positives.
Var l1_reg_loss(Graph& g, Var pred, const Tensor& targets, const std::vector<char>& positive);
double total_loss(double cls, double reg, double hgt, const LossWeights& w);
Var total_loss(Graph& g, Var cls, Var reg, Var hgt, const LossWeights& w);

// ---------------------------------------------------------------- decoding

struct DetectionSet {
  std::vector<Box3D> boxes;
  std::vector<double> scores;  // descending
};

/// 3x3 local maxima of each class heatmap above `score_threshold`.
DetectionSet decode_detections(const Tensor& cls_logits, const Tensor& reg, double score_threshold,
                               const GridSpec& spec, int max_detections = 100);

// ---------------------------------------------------------------- metric

inline const std::vector<double> kDefaultMapThresholds{0.5, 1.0, 2.0, 4.0};

struct MapResult {
  double map = 0;
  std::vector<double> per_class;  // NaN for classes without ground truth
};

/// Accumulates frames; detections only match ground truth of their own frame.
class MapAccumulator {
 public:
  explicit MapAccumulator(int num_classes) : num_classes_(num_classes) {}
  void add_frame(const DetectionSet& dets, const std::vector<Box3D>& gts);
  MapResult compute(const std::vector<double>& thresholds = kDefaultMapThresholds) const;

 private:
  int num_classes_;
  std::vector<DetectionSet> dets_;
  std::vector<std::vector<Box3D>> gts_;
};

/// All-point interpolated average precision from a score-ordered TP flag list.
double average_precision(const std::vector<char>& tp_in_score_order, int n_gt);

double toy_map(const DetectionSet& dets, const std::vector<Box3D>& gts,
               const std::vector<double>& thresholds = kDefaultMapThresholds, int num_classes = -1);

}  // namespace hgbev
