#include "hgbev/detection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace hgbev {

void init_head(ParamStore& store, int channels, const HeadConfig& cfg, std::mt19937_64& rng) {
  const int k = cfg.num_classes, hid = cfg.hidden;
  store.add("head.cls1.w", init::xavier({3, 3, channels, hid}, rng));
  store.add("head.cls1.b", init::zeros({hid}));
  store.add("head.cls2.w", init::xavier({1, 1, hid, k}, rng));
  store.add("head.cls2.b", init::constant({k}, -std::log((1 - cfg.prior) / cfg.prior)));
  store.add("head.reg1.w", init::xavier({3, 3, channels, hid}, rng));
  store.add("head.reg1.b", init::zeros({hid}));
  store.add("head.reg2.w", init::xavier({1, 1, hid, kRegChannels}, rng));
  store.add("head.reg2.b", init::zeros({kRegChannels}));
}

HeadOutput head_forward(Graph& g, ParamStore& store, const GridSpec& spec, Var bev) {
  const Shape& s = g.shape(bev);
  if (s.size() != 2 || s[0] != spec.n_cells())
    throw std::invalid_argument("head_forward: bev " + shape_str(s) + " does not match the grid");
  Var img = ops::reshape(g, bev, {1, spec.h_cells, spec.w_cells, s[1]});
  auto branch = [&](const std::string& a, const std::string& b) {
    Var h = ops::relu(g, ops::conv2d(g, img, g.param(store, a + ".w"), g.param(store, a + ".b"), 1, 1));
    Var o = ops::conv2d(g, h, g.param(store, b + ".w"), g.param(store, b + ".b"), 1, 0);
    return ops::reshape(g, o, {spec.n_cells(), g.shape(o)[3]});
  };
  return {branch("head.cls1", "head.cls2"), branch("head.reg1", "head.reg2")};
}

std::array<double, kRegChannels> encode_box(const Box3D& box, const GridSpec& spec, int i, int j) {
  const Point2 c = cell_center(spec, i, j);
  return {(box.center[0] - c.x) / spec.cell_size_x(),
          (box.center[1] - c.y) / spec.cell_size_y(),
          box.center[2],
          std::log(box.size[0]),
          std::log(box.size[1]),
          std::log(box.size[2]),
          std::sin(box.yaw),
          std::cos(box.yaw),
          box.velocity[0],
          box.velocity[1]};
}

Box3D decode_box(const double* r, const GridSpec& spec, int i, int j, int class_id) {
  const Point2 c = cell_center(spec, i, j);
  Box3D b;
  b.center = {c.x + r[0] * spec.cell_size_x(), c.y + r[1] * spec.cell_size_y(), r[2]};
  b.size = {std::exp(r[3]), std::exp(r[4]), std::exp(r[5])};
  b.yaw = wrap_angle(std::atan2(r[6], r[7]));
  b.velocity = {r[8], r[9]};
  b.class_id = class_id;
  return b;
}

DetectionTargets encode_targets(const std::vector<Box3D>& boxes, const GridSpec& spec, int num_classes) {
  const int n = spec.n_cells();
  DetectionTargets t;
  t.cls = Tensor({n, num_classes});
  t.reg = Tensor({n, kRegChannels});
  t.positive.assign(static_cast<size_t>(n), 0);
  t.box_of_cell.assign(static_cast<size_t>(n), -1);
  std::vector<double> best(static_cast<size_t>(n), INFINITY);
  for (size_t b = 0; b < boxes.size(); ++b) {
    const Box3D& box = boxes[b];
    if (box.class_id < 0 || box.class_id >= num_classes)
      throw std::invalid_argument("encode_targets: class id " + std::to_string(box.class_id) + " out of range");
    const auto cell = nearest_cell(spec, box.center[0], box.center[1]);
    if (!cell) continue;
    const int r = cell->first * spec.w_cells + cell->second;
    const Point2 c = cell_center(spec, cell->first, cell->second);
    const double d = std::hypot(box.center[0] - c.x, box.center[1] - c.y);
    if (d >= best[static_cast<size_t>(r)]) continue;
    best[static_cast<size_t>(r)] = d;
    t.box_of_cell[static_cast<size_t>(r)] = static_cast<int>(b);
  }
  for (int r = 0; r < n; ++r) {
    const int b = t.box_of_cell[static_cast<size_t>(r)];
    if (b < 0) continue;
    t.positive[static_cast<size_t>(r)] = 1;
    ++t.n_pos;
    t.cls[static_cast<long>(r) * num_classes + boxes[static_cast<size_t>(b)].class_id] = 1.0;
    const auto enc = encode_box(boxes[static_cast<size_t>(b)], spec, r / spec.w_cells, r % spec.w_cells);
    std::copy(enc.begin(), enc.end(), t.reg.data.begin() + static_cast<long>(r) * kRegChannels);
  }
  return t;
}

void LossWeights::validate() const {
  if (cls < 0 || reg < 0 || hgt < 0) throw std::invalid_argument("loss weights must be nonnegative");
  if (cls == 0 && reg == 0 && hgt == 0) throw std::invalid_argument("loss weights must not all be zero");
}

Var focal_loss(Graph& g, Var logits, const Tensor& targets, double alpha, double gamma) {
  if (g.shape(logits) != targets.shape)
    throw std::invalid_argument("focal_loss: logits " + shape_str(g.shape(logits)) + " vs targets " +
                                shape_str(targets.shape));
  const int rows = targets.dim(0), k = targets.dim(1);
  int n_pos = 0;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < k; ++c)
      if (targets[static_cast<long>(r) * k + c] > 0) {
        ++n_pos;
        break;
      }
  return ops::focal_loss(g, logits, targets, alpha, gamma, std::max(1, n_pos));
}

Var l1_reg_loss(Graph& g, Var pred, const Tensor& targets, const std::vector<char>& positive) {
  return ops::masked_l1(g, pred, targets, positive);
}

double total_loss(double cls, double reg, double hgt, const LossWeights& w) {
  w.validate();
  return w.cls * cls + w.reg * reg + w.hgt * hgt;
}

Var total_loss(Graph& g, Var cls, Var reg, Var hgt, const LossWeights& w) {
  w.validate();
  Var t = ops::add(g, ops::scale(g, cls, w.cls), ops::scale(g, reg, w.reg));
  if (hgt.valid()) t = ops::add(g, t, ops::scale(g, hgt, w.hgt));
  return t;
}

DetectionSet decode_detections(const Tensor& cls_logits, const Tensor& reg, double score_threshold,
                               const GridSpec& spec, int max_detections) {
  const int n = spec.n_cells();
  if (cls_logits.rank() != 2 || cls_logits.dim(0) != n || reg.shape != Shape{n, kRegChannels})
    throw std::invalid_argument("decode_detections: head outputs do not match the grid");
  const int k = cls_logits.dim(1);
  std::vector<double> prob(static_cast<size_t>(cls_logits.numel()));
  for (std::int64_t i = 0; i < cls_logits.numel(); ++i)
    prob[static_cast<size_t>(i)] = 1.0 / (1.0 + std::exp(-cls_logits[i]));
  struct Cand {
    double score;
    int cell, cls;
  };
  std::vector<Cand> cands;
  for (int i = 0; i < spec.h_cells; ++i)
    for (int j = 0; j < spec.w_cells; ++j)
      for (int c = 0; c < k; ++c) {
        const double s = prob[static_cast<size_t>((i * spec.w_cells + j) * k + c)];
        if (!(s > score_threshold)) continue;
        bool peak = true;
        for (int di = -1; di <= 1 && peak; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            const int ii = i + di, jj = j + dj;
            if ((di == 0 && dj == 0) || ii < 0 || jj < 0 || ii >= spec.h_cells || jj >= spec.w_cells) continue;
            if (prob[static_cast<size_t>((ii * spec.w_cells + jj) * k + c)] > s) {
              peak = false;
              break;
            }
          }
        if (peak) cands.push_back({s, i * spec.w_cells + j, c});
      }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });
  if (static_cast<int>(cands.size()) > max_detections) cands.resize(static_cast<size_t>(max_detections));
  DetectionSet out;
  for (const Cand& c : cands) {
    out.boxes.push_back(decode_box(reg.ptr() + static_cast<long>(c.cell) * kRegChannels, spec,
                                   c.cell / spec.w_cells, c.cell % spec.w_cells, c.cls));
    out.scores.push_back(c.score);
  }
  return out;
}

void MapAccumulator::add_frame(const DetectionSet& dets, const std::vector<Box3D>& gts) {
  if (dets.boxes.size() != dets.scores.size()) throw std::invalid_argument("DetectionSet: size mismatch");
  dets_.push_back(dets);
  gts_.push_back(gts);
}

double average_precision(const std::vector<char>& tp, int n_gt) {
  if (n_gt <= 0) return 0.0;
  std::vector<double> recall, precision;
  int cum_tp = 0;
  for (size_t i = 0; i < tp.size(); ++i) {
    cum_tp += tp[i] ? 1 : 0;
    recall.push_back(static_cast<double>(cum_tp) / n_gt);
    precision.push_back(static_cast<double>(cum_tp) / static_cast<double>(i + 1));
  }
  for (size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0, prev_recall = 0;
  for (size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

MapResult MapAccumulator::compute(const std::vector<double>& thresholds) const {
  if (thresholds.empty()) throw std::invalid_argument("toy mAP: no thresholds");
  MapResult res;
  res.per_class.assign(static_cast<size_t>(num_classes_), NAN);
  double total = 0;
  int counted = 0;
  for (int c = 0; c < num_classes_; ++c) {
    int n_gt = 0;
    for (const auto& frame : gts_)
      for (const Box3D& b : frame) n_gt += b.class_id == c ? 1 : 0;
    if (n_gt == 0) continue;
    struct Ref {
      double score;
      size_t frame, idx;
    };
    std::vector<Ref> order;
    for (size_t f = 0; f < dets_.size(); ++f)
      for (size_t d = 0; d < dets_[f].boxes.size(); ++d)
        if (dets_[f].boxes[d].class_id == c) order.push_back({dets_[f].scores[d], f, d});
    std::stable_sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });
    double class_sum = 0;
    for (double tau : thresholds) {
      std::vector<std::vector<char>> used(gts_.size());
      for (size_t f = 0; f < gts_.size(); ++f) used[f].assign(gts_[f].size(), 0);
      std::vector<char> tp;
      tp.reserve(order.size());
      for (const Ref& r : order) {
        const Box3D& d = dets_[r.frame].boxes[r.idx];
        double best = INFINITY;
        size_t best_g = 0;
        for (size_t gi = 0; gi < gts_[r.frame].size(); ++gi) {
          const Box3D& gt = gts_[r.frame][gi];
          if (gt.class_id != c || used[r.frame][gi]) continue;
          const double dist = std::hypot(d.center[0] - gt.center[0], d.center[1] - gt.center[1]);
          if (dist < best) {
            best = dist;
            best_g = gi;
          }
        }
        const bool hit = best <= tau;
        if (hit) used[r.frame][best_g] = 1;
        tp.push_back(hit ? 1 : 0);
      }
      class_sum += average_precision(tp, n_gt);
    }
    res.per_class[static_cast<size_t>(c)] = class_sum / static_cast<double>(thresholds.size());
    total += res.per_class[static_cast<size_t>(c)];
    ++counted;
  }
  res.map = counted ? total / counted : 0.0;
  return res;
}

double toy_map(const DetectionSet& dets, const std::vector<Box3D>& gts, const std::vector<double>& thresholds,
               int num_classes) {
  if (num_classes < 0) {
    num_classes = 0;
    for (const Box3D& b : gts) num_classes = std::max(num_classes, b.class_id + 1);
    for (const Box3D& b : dets.boxes) num_classes = std::max(num_classes, b.class_id + 1);
  }
  MapAccumulator acc(num_classes);
  acc.add_frame(dets, gts);
  return acc.compute(thresholds).map;
}

}  // namespace hgbev
