#pragma once

// Run configuration, training, checkpoints, evaluation, gradient checks,
// ablations and plots behind the command-line tool.

#include "hgbev/detection.hpp"
#include "hgbev/encoder.hpp"
#include "hgbev/scenes.hpp"
#include "hgbev/serialize.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace hgbev {

struct OptimConfig {
  double lr = 2e-4;
  double weight_decay = 0.01;
  int steps = 500;
  int warmup_steps = 0;
  double min_lr_ratio = 1e-3;
  double grad_clip = 35.0;
  int checkpoint_every = 100;  // 0 disables periodic checkpoints
};

struct RunConfig {
  std::string dataset;     // directory written by gen-data
  std::string output_dir;  // relative paths resolve against $HGBEV_OUTPUT_ROOT
  std::uint64_t seed = 0;
  EncoderConfig encoder;
  HeadConfig head;
  LossWeights loss;
  GaussianTargetParams height_target;
  OptimConfig optim;
  double score_threshold = 0.05;
  double eval_fraction = 0.2;
  std::string checkpoint_dtype = "f32";  // "f32" or "f64"
  DatasetConfig data;                     // used by gen-data

  void validate() const;
};

nlohmann::ordered_json config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

/// Directory for outputs: absolute paths are kept, relative ones are placed
/// under $HGBEV_OUTPUT_ROOT when set.
std::filesystem::path resolve_output(const std::string& path);

struct Split {
  std::vector<int> train, eval;
};
/// The last ceil(fraction * n) sequences (at least one when n > 1) form the
/// evaluation split.
Split split_sequences(int n_sequences, double eval_fraction);

/// True when the planar layout (cell counts and x/y ranges) agrees; bins and
/// channels are model settings and may differ from the dataset's.
bool same_planar_layout(const GridSpec& a, const GridSpec& b);
/// Throws std::invalid_argument unless the dataset layout matches `cfg`.
void check_dataset_layout(const Dataset& data, const RunConfig& cfg);

/// Fresh parameters for the configuration, seeded by cfg.seed.
ParamStore init_model(const RunConfig& cfg);

// ---------------------------------------------------------------- training

struct StepLosses {
  int step = 0;
  double cls = 0, reg = 0, hgt = 0, total = 0;
  double grad_norm = 0;
};

/// (sequence, frame) visited at a step; a pure function of (seed, step).
std::pair<int, int> training_sample(const RunConfig& cfg, const Dataset& data, const Split& split, int step);

/// Gradient-free encoding of frames [first, last) of a sequence; returns the
/// history for frame `last`.
std::optional<History> encode_history(ParamStore& store, const RunConfig& cfg, const Dataset& data, int seq,
                                      int first, int last);

/// Forward + backward on one frame; gradients are written into `store`.
StepLosses compute_gradients(ParamStore& store, const RunConfig& cfg, const Dataset& data, int seq, int frame);

struct TrainState {
  ParamStore params;
  int step = 0;  // number of completed updates
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  int stop_after = -1;            // stop once this many updates are done
  bool quiet = true;
};

/// Runs optimizer steps from state.step to cfg.optim.steps. Throws
/// NonFiniteLoss naming the step on divergence.
std::vector<StepLosses> train(TrainState& state, const RunConfig& cfg, const Dataset& data,
                              const TrainOptions& opts = {});

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(int step, const std::string& what) : std::runtime_error(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const RunConfig& cfg);
/// Throws CheckpointMismatch if the stored configuration differs from `cfg`
/// in any field that affects parameter shapes.
TrainState load_checkpoint(const std::filesystem::path& path, const RunConfig& cfg);

class CheckpointMismatch : public std::runtime_error {
 public:
  CheckpointMismatch(std::vector<std::string> fields);
  const std::vector<std::string>& fields() const { return fields_; }

 private:
  std::vector<std::string> fields_;
};

// ---------------------------------------------------------------- evaluation

struct EvalReport {
  MapResult map;
  double mean_center_error = 0;     // matched at the loosest threshold, meters
  double mean_height_error = 0;     // |argmax bin center - z_gt| at GT cells, meters
  std::vector<double> height_accuracy_per_class;  // argmax within one bin of z_gt
  double height_accuracy = 0;
  int n_frames = 0;
  int n_gt = 0;
  std::vector<int> eval_sequences;

  nlohmann::ordered_json to_json() const;
};

struct FrameDetections {
  int sequence = 0, frame = 0;
  DetectionSet dets;
  std::vector<Box3D> gts;
  std::vector<HeightField> fused;  // last layer only when VHA is on
};

EvalReport evaluate(ParamStore& store, const RunConfig& cfg, const Dataset& data,
                    std::vector<FrameDetections>* frames = nullptr);

/// Structured-text records, one JSON object per line: a leading "grid"
/// record, then "pred", "gt" and "height" records per frame.
void write_detections(const std::filesystem::path& path, const GridSpec& spec,
                      const std::vector<FrameDetections>& frames);
struct DetectionRecords {
  GridSpec grid;
  std::vector<FrameDetections> frames;
};
DetectionRecords read_detections(const std::filesystem::path& path);

// ---------------------------------------------------------------- gradient check

struct GradcheckRow {
  std::string op;
  double max_rel_error = 0;
  int n_checked = 0;
  bool pass = false;
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
  std::string corrupt_op;  // test hook: perturbs the analytic gradient of this row
};

std::vector<std::string> gradcheck_ops();
std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& opts);

// ---------------------------------------------------------------- ablations

struct AblationArm {
  std::string name;
  bool vha = true, dhca = true;
  int uniform_nref = 0;
  std::optional<int> d_bins, neighbors;
  std::optional<double> height_weight;
};

struct ArmResult {
  AblationArm arm;
  std::vector<std::uint64_t> seeds;
  std::vector<double> map, center_error, height_accuracy;
  double mean_map() const;
  double mean_center_error() const;
  double mean_height_accuracy() const;
};

std::vector<AblationArm> main_arms();
/// "bins", "neighbors", "nref", or "controls" (16 uniform points without VHA
/// or DHCA, and the full model with lambda3 = 0).
std::vector<AblationArm> sweep_arms(const std::string& sweep);
RunConfig apply_arm(const RunConfig& base, const AblationArm& arm, std::uint64_t seed);

std::vector<ArmResult> run_ablation(const RunConfig& base, const Dataset& data,
                                    const std::vector<AblationArm>& arms, int n_seeds,
                                    const std::function<void(const std::string&)>& log = {});
std::string format_ablation_table(const std::vector<ArmResult>& rows);

// ---------------------------------------------------------------- plots

/// Top-down overlay of GT (green) and predicted (red) box footprints.
Image plot_bev_boxes(const GridSpec& spec, const std::vector<Box3D>& gts, const std::vector<Box3D>& preds,
                     int pixels_per_cell = 8);
/// Per-cell argmax bin of a height field as grey levels; cells flagged in
/// `mask` (when non-empty) are drawn, the rest stay background.
Image plot_height_argmax(const HeightField& field, const std::vector<char>& mask, int pixels_per_cell = 8);

}  // namespace hgbev
