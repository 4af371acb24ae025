#include "hgbev/harness.hpp"

#include <cmath>
#include <fstream>

namespace hgbev {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

ojson number_or_null(double v) { return std::isfinite(v) ? ojson(v) : ojson(nullptr); }

// Loosest matching threshold; unmatched ground truth counts at this distance.
double center_radius() { return kDefaultMapThresholds.back(); }

int argmax(const double* p, int d) {
  int best = 0;
  for (int m = 1; m < d; ++m)
    if (p[m] > p[best]) best = m;
  return best;
}

}  // namespace

ojson EvalReport::to_json() const {
  ojson per_class = ojson::array();
  for (double v : map.per_class) per_class.push_back(number_or_null(v));
  ojson hacc = ojson::array();
  for (double v : height_accuracy_per_class) hacc.push_back(number_or_null(v));
  return ojson{{"map", map.map},
               {"map_per_class", per_class},
               {"mean_center_error", number_or_null(mean_center_error)},
               {"mean_height_error", number_or_null(mean_height_error)},
               {"height_accuracy", number_or_null(height_accuracy)},
               {"height_accuracy_per_class", hacc},
               {"n_frames", n_frames},
               {"n_gt", n_gt},
               {"eval_sequences", eval_sequences}};
}

EvalReport evaluate(ParamStore& store, const RunConfig& cfg, const Dataset& data, std::vector<FrameDetections>* frames) {
  cfg.validate();
  check_dataset_layout(data, cfg);
  const GridSpec& spec = cfg.encoder.grid;
  const int k_classes = cfg.head.num_classes;
  const Split split = split_sequences(static_cast<int>(data.sequences.size()), cfg.eval_fraction);

  EvalReport report;
  report.eval_sequences = split.eval;
  MapAccumulator acc(k_classes);
  double center_sum = 0;
  int center_n = 0;
  double herr_sum = 0;
  int herr_n = 0;
  std::vector<int> hit(static_cast<size_t>(k_classes), 0), total(static_cast<size_t>(k_classes), 0);

  for (int s : split.eval) {
    const Sequence& seq = data.sequences[static_cast<size_t>(s)];
    std::vector<Tensor> images;
    images.reserve(seq.frames.size());
    for (const SceneFrame& f : seq.frames) images.push_back(images_to_tensor(f.images));
    std::vector<SequenceFrame> inputs;
    for (size_t t = 0; t < seq.frames.size(); ++t) inputs.push_back({&images[t], seq.frames[t].ego_pose});
    const std::vector<EncodedFrame> encoded = run_sequence(store, cfg.encoder, inputs, data.rig);

    for (size_t t = 0; t < seq.frames.size(); ++t) {
      const SceneFrame& f = seq.frames[t];
      Graph g(false);
      HeadOutput head = head_forward(g, store, spec, g.constant(encoded[t].bev));
      DetectionSet dets = decode_detections(g.value(head.cls), g.value(head.reg), cfg.score_threshold, spec);
      acc.add_frame(dets, f.boxes);
      ++report.n_frames;
      report.n_gt += static_cast<int>(f.boxes.size());

      for (const Box3D& gt : f.boxes) {
        double best = center_radius();
        for (const Box3D& d : dets.boxes) {
          if (d.class_id != gt.class_id) continue;
          best = std::min(best, std::hypot(d.center[0] - gt.center[0], d.center[1] - gt.center[1]));
        }
        center_sum += best;
        ++center_n;
      }

      if (!encoded[t].fused.empty()) {
        const HeightField& fused = encoded[t].fused.back();
        std::vector<int> owner;
        gt_height_field(f.boxes, spec, cfg.height_target, &owner);
        for (int n = 0; n < spec.n_cells(); ++n) {
          const int b = owner[static_cast<size_t>(n)];
          if (b < 0) continue;
          const Box3D& box = f.boxes[static_cast<size_t>(b)];
          const int m = argmax(fused.values.ptr() + static_cast<long>(n) * spec.d_bins, spec.d_bins);
          const int want = bin_index_of(spec, box.center[2]);
          herr_sum += std::abs(bin_center(spec, m + 1) - box.center[2]);
          ++herr_n;
          if (box.class_id >= 0 && box.class_id < k_classes) {
            ++total[static_cast<size_t>(box.class_id)];
            if (std::abs(m - want) <= 1) ++hit[static_cast<size_t>(box.class_id)];
          }
        }
      }

      if (frames) {
        FrameDetections fd;
        fd.sequence = s;
        fd.frame = static_cast<int>(t);
        fd.dets = std::move(dets);
        fd.gts = f.boxes;
        if (!encoded[t].fused.empty()) fd.fused.push_back(encoded[t].fused.back());
        frames->push_back(std::move(fd));
      }
    }
  }

  report.map = acc.compute();
  report.mean_center_error = center_n ? center_sum / center_n : NAN;
  report.mean_height_error = herr_n ? herr_sum / herr_n : NAN;
  int all_hit = 0, all_total = 0;
  for (int k = 0; k < k_classes; ++k) {
    const size_t i = static_cast<size_t>(k);
    report.height_accuracy_per_class.push_back(total[i] ? static_cast<double>(hit[i]) / total[i] : NAN);
    all_hit += hit[i];
    all_total += total[i];
  }
  report.height_accuracy = all_total ? static_cast<double>(all_hit) / all_total : NAN;
  return report;
}

void write_detections(const fs::path& path, const GridSpec& spec, const std::vector<FrameDetections>& frames) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << ojson{{"kind", "grid"}, {"grid", grid_to_json(spec)}}.dump() << "\n";
  for (const FrameDetections& fd : frames) {
    for (size_t i = 0; i < fd.dets.boxes.size(); ++i) {
      ojson j{{"sequence", fd.sequence}, {"frame", fd.frame}, {"kind", "pred"}, {"score", fd.dets.scores[i]}};
      j["box"] = box_to_json(fd.dets.boxes[i]);
      f << j.dump() << "\n";
    }
    for (const Box3D& b : fd.gts) {
      ojson j{{"sequence", fd.sequence}, {"frame", fd.frame}, {"kind", "gt"}};
      j["box"] = box_to_json(b);
      f << j.dump() << "\n";
    }
    if (!fd.fused.empty()) {
      const HeightField& h = fd.fused.front();
      ojson j{{"sequence", fd.sequence}, {"frame", fd.frame}, {"kind", "height"},
              {"shape", {h.h(), h.w(), h.d()}}, {"values", h.values.data}};
      f << j.dump() << "\n";
    }
  }
}

DetectionRecords read_detections(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open detection records " + path.string());
  DetectionRecords out;
  bool have_grid = false;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      const std::string kind = j.at("kind").get<std::string>();
      if (kind == "grid") {
        out.grid = grid_from_json(j.at("grid"));
        have_grid = true;
        continue;
      }
      const int seq = j.at("sequence").get<int>(), frame = j.at("frame").get<int>();
      if (out.frames.empty() || out.frames.back().sequence != seq || out.frames.back().frame != frame) {
        out.frames.emplace_back();
        out.frames.back().sequence = seq;
        out.frames.back().frame = frame;
      }
      FrameDetections& fd = out.frames.back();
      if (kind == "pred") {
        fd.dets.boxes.push_back(box_from_json(j.at("box")));
        fd.dets.scores.push_back(j.at("score").get<double>());
      } else if (kind == "gt") {
        fd.gts.push_back(box_from_json(j.at("box")));
      } else if (kind == "height") {
        const auto shape = j.at("shape").get<std::vector<int>>();
        if (shape.size() != 3) throw std::runtime_error("height record needs a 3-entry shape");
        HeightField h;
        h.kind = HeightKind::fused;
        h.values = Tensor({shape[0], shape[1], shape[2]}, j.at("values").get<std::vector<double>>());
        fd.fused.push_back(std::move(h));
      } else {
        throw std::runtime_error("unknown record kind '" + kind + "'");
      }
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_grid) throw std::runtime_error(path.string() + ": missing grid record");
  return out;
}

}  // namespace hgbev
