#include "hgbev/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>

namespace fs = std::filesystem;
using namespace hgbev;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

RunConfig config_or_usage(const std::string& path) {
  try {
    return load_config(path);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

Dataset load_dataset(const RunConfig& cfg) {
  if (cfg.dataset.empty()) throw UsageError("config has no dataset path");
  return read_dataset(cfg.dataset);
}

void write_text(const fs::path& path, const std::string& text) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

std::string frame_tag(int seq, int frame) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%03d_f%03d", seq, frame);
  return buf;
}

int cmd_train(const std::string& config, const std::string& resume, bool quiet) {
  const RunConfig cfg = config_or_usage(config);
  const Dataset data = load_dataset(cfg);
  const fs::path out = resolve_output(cfg.output_dir);
  TrainState state;
  if (!resume.empty()) state = load_checkpoint(resume, cfg);
  else state.params = init_model(cfg);
  TrainOptions opts;
  opts.out_dir = out;
  opts.quiet = quiet;
  try {
    const auto log = train(state, cfg, data, opts);
    if (!log.empty())
      std::cout << "trained to step " << state.step << ", last total loss " << log.back().total << "\n";
    std::cout << "outputs in " << out.string() << "\n";
  } catch (const NonFiniteLoss& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kOk;
}

int cmd_eval(const std::string& config, const std::string& ckpt) {
  const RunConfig cfg = config_or_usage(config);
  const Dataset data = load_dataset(cfg);
  TrainState state = load_checkpoint(ckpt, cfg);
  std::vector<FrameDetections> frames;
  const EvalReport report = evaluate(state.params, cfg, data, &frames);
  nlohmann::ordered_json j = report.to_json();
  j["checkpoint"] = ckpt;
  j["step"] = state.step;
  const fs::path out = resolve_output(cfg.output_dir);
  write_text(out / "eval_report.json", j.dump(2) + "\n");
  write_detections(out / "detections.jsonl", cfg.encoder.grid, frames);
  std::cout << j.dump(2) << "\n";
  return kOk;
}

int cmd_gradcheck(const std::string& config, const std::string& corrupt) {
  const RunConfig cfg = config_or_usage(config);
  GradcheckOptions opts;
  opts.seed = cfg.seed;
  opts.corrupt_op = corrupt;
  const auto rows = run_gradcheck(opts);
  bool ok = true;
  std::cout << std::left << std::setw(26) << "operation" << std::setw(16) << "max_rel_error" << std::setw(10)
            << "checked" << "result\n";
  for (const GradcheckRow& r : rows) {
    std::cout << std::left << std::setw(26) << r.op << std::setw(16) << std::scientific << std::setprecision(3)
              << r.max_rel_error << std::setw(10) << r.n_checked << (r.pass ? "pass" : "FAIL") << "\n";
    ok = ok && r.pass;
  }
  return ok ? kOk : kCheckFailed;
}

int cmd_ablate(const std::string& config, int seeds, const std::string& sweep) {
  const RunConfig cfg = config_or_usage(config);
  if (seeds < 1) throw UsageError("--seeds must be at least 1");
  std::vector<AblationArm> arms;
  try {
    arms = sweep == "main" ? main_arms() : sweep_arms(sweep);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const Dataset data = load_dataset(cfg);
  const auto rows = run_ablation(cfg, data, arms, seeds, [](const std::string& s) { std::cerr << s << "\n"; });
  const std::string table = format_ablation_table(rows);
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const ArmResult& r : rows)
    j.push_back({{"arm", r.arm.name},
                 {"vha", r.arm.vha},
                 {"dhca", r.arm.dhca},
                 {"seeds", r.seeds},
                 {"map", r.map},
                 {"center_error", r.center_error},
                 {"height_accuracy", r.height_accuracy}});
  const fs::path out = resolve_output(cfg.output_dir);
  write_text(out / ("ablation_" + sweep + ".md"), table);
  write_text(out / ("ablation_" + sweep + ".json"), j.dump(2) + "\n");
  std::cout << table;
  return kOk;
}

int cmd_plot(const std::string& in, const std::string& out_dir) {
  if (!fs::exists(in)) throw std::runtime_error("plot input " + in + " does not exist");
  const DetectionRecords rec = read_detections(in);
  const fs::path out = resolve_output(out_dir);
  fs::create_directories(out);
  int written = 0;
  for (const FrameDetections& fd : rec.frames) {
    const std::string tag = frame_tag(fd.sequence, fd.frame);
    write_ppm(out / ("bev_" + tag + ".ppm"), plot_bev_boxes(rec.grid, fd.gts, fd.dets.boxes));
    ++written;
    if (!fd.fused.empty()) {
      std::vector<int> owner;
      gt_height_field(fd.gts, rec.grid, GaussianTargetParams{}, &owner);
      std::vector<char> mask(owner.size());
      for (size_t n = 0; n < owner.size(); ++n) mask[n] = owner[n] >= 0;
      write_ppm(out / ("height_" + tag + ".ppm"), plot_height_argmax(fd.fused.front(), mask));
      ++written;
    }
  }
  std::cout << "wrote " << written << " images to " << out.string() << "\n";
  return kOk;
}

int cmd_gen_data(const std::string& config, const std::string& out_dir) {
  const RunConfig cfg = config_or_usage(config);
  const fs::path out = resolve_output(out_dir);
  const Dataset data = generate_dataset(cfg.data);
  write_dataset(data, out);
  std::cout << "wrote " << data.sequences.size() << " sequences to " << out.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Height-aware BEV encoder toolkit"};
  app.require_subcommand(1);
  std::string config, ckpt, resume, in, out, corrupt, sweep = "main";
  int seeds = 3;
  bool quiet = false;

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config, "run configuration")->required();
  train->add_option("--resume", resume, "checkpoint to resume from");
  train->add_flag("--quiet", quiet, "no progress output");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the eval split");
  eval->add_option("--config", config, "run configuration")->required();
  eval->add_option("--ckpt", ckpt, "checkpoint")->required();

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  grad->add_option("--config", config, "run configuration")->required();
  grad->add_option("--corrupt", corrupt, "perturb the analytic gradient of one operation")->group("");

  auto* ablate = app.add_subcommand("ablate", "train and evaluate ablation arms");
  ablate->add_option("--config", config, "run configuration")->required();
  ablate->add_option("--seeds", seeds, "seeds per arm")->required();
  ablate->add_option("--sweep", sweep, "main, bins, neighbors, nref or controls");

  auto* plot = app.add_subcommand("plot", "render detection and height images");
  plot->add_option("--in", in, "detections.jsonl written by eval")->required();
  plot->add_option("--out", out, "output directory")->required();

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--config", config, "run configuration")->required();
  gen->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*train) return cmd_train(config, resume, quiet);
    if (*eval) return cmd_eval(config, ckpt);
    if (*grad) return cmd_gradcheck(config, corrupt);
    if (*ablate) return cmd_ablate(config, seeds, sweep);
    if (*plot) return cmd_plot(in, out);
    if (*gen) return cmd_gen_data(config, out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const CheckpointMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kUsage;
}
