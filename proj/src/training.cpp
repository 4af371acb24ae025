#include "hgbev/harness.hpp"

#include <cmath>
#include <fstream>
#include <iostream>

namespace hgbev {

namespace fs = std::filesystem;

std::pair<int, int> training_sample(const RunConfig& cfg, const Dataset& data, const Split& split, int step) {
  if (split.train.empty()) throw std::invalid_argument("training split is empty");
  std::mt19937_64 rng(cfg.seed * 0x2545F4914F6CDD1DULL + static_cast<std::uint64_t>(step) * 0x9E3779B97F4A7C15ULL);
  const int seq = split.train[static_cast<size_t>(rng() % split.train.size())];
  const int n_frames = static_cast<int>(data.sequences[static_cast<size_t>(seq)].frames.size());
  return {seq, static_cast<int>(rng() % static_cast<std::uint64_t>(n_frames))};
}

std::optional<History> encode_history(ParamStore& store, const RunConfig& cfg, const Dataset& data, int seq,
                                      int first, int last) {
  const auto& frames = data.sequences.at(static_cast<size_t>(seq)).frames;
  std::optional<History> history;
  for (int t = first; t < last; ++t) {
    Graph g(false);
    const Tensor images = images_to_tensor(frames[static_cast<size_t>(t)].images);
    FrameOutput fo = encode_frame(g, store, cfg.encoder, g.constant(images), history ? &*history : nullptr, data.rig);
    history = History{g.value(fo.bev),
                      EgoMotion2D::between(frames[static_cast<size_t>(t)].ego_pose, frames[static_cast<size_t>(t + 1)].ego_pose)};
  }
  return history;
}

StepLosses compute_gradients(ParamStore& store, const RunConfig& cfg, const Dataset& data, int seq, int frame) {
  const auto& frames = data.sequences.at(static_cast<size_t>(seq)).frames;
  const SceneFrame& f = frames.at(static_cast<size_t>(frame));
  const GridSpec& spec = cfg.encoder.grid;
  const int first = std::max(0, frame - (cfg.encoder.history_len - 1));
  const std::optional<History> history = encode_history(store, cfg, data, seq, first, frame);

  Graph g;
  FrameOutput fo = encode_frame(g, store, cfg.encoder, g.constant(images_to_tensor(f.images)),
                                history ? &*history : nullptr, data.rig);
  HeadOutput head = head_forward(g, store, spec, fo.bev);
  const DetectionTargets targets = encode_targets(f.boxes, spec, cfg.head.num_classes);
  Var l_cls = focal_loss(g, head.cls, targets.cls);
  Var l_reg = l1_reg_loss(g, head.reg, targets.reg, targets.positive);
  Var l_hgt;
  if (!fo.fused.empty()) {
    const Tensor gt = gt_height_field(f.boxes, spec, cfg.height_target).rows();
    for (Var fused : fo.fused) {
      Var l = height_loss(g, fused, gt);
      l_hgt = l_hgt.valid() ? ops::add(g, l_hgt, l) : l;
    }
    l_hgt = ops::scale(g, l_hgt, 1.0 / static_cast<double>(fo.fused.size()));
  }
  Var total = total_loss(g, l_cls, l_reg, l_hgt, cfg.loss);
  StepLosses out;
  out.cls = g.value(l_cls)[0];
  out.reg = g.value(l_reg)[0];
  out.hgt = l_hgt.valid() ? g.value(l_hgt)[0] : 0.0;
  out.total = g.value(total)[0];
  store.zero_grad();
  if (std::isfinite(out.total)) {
    g.backward(total);
    g.accumulate_param_grads(store);
  }
  return out;
}

namespace {

AdamWConfig adam_config(const RunConfig& cfg) {
  AdamWConfig a;
  a.lr = cfg.optim.lr;
  a.weight_decay = cfg.optim.weight_decay;
  a.warmup_steps = cfg.optim.warmup_steps;
  a.total_steps = cfg.optim.steps;
  a.min_lr_ratio = cfg.optim.min_lr_ratio;
  a.grad_clip = cfg.optim.grad_clip;
  return a;
}

void append_log(const fs::path& path, const StepLosses& s) {
  std::ofstream f(path, std::ios::app);
  nlohmann::ordered_json j{{"step", s.step},   {"L_cls", s.cls},   {"L_reg", s.reg},
                           {"L_hgt", s.hgt},   {"total", s.total}, {"grad_norm", s.grad_norm}};
  f << j.dump() << "\n";
}

}  // namespace

std::vector<StepLosses> train(TrainState& state, const RunConfig& cfg, const Dataset& data, const TrainOptions& opts) {
  cfg.validate();
  check_dataset_layout(data, cfg);
  const Split split = split_sequences(static_cast<int>(data.sequences.size()), cfg.eval_fraction);
  const AdamWConfig adam = adam_config(cfg);
  const bool write = !opts.out_dir.empty();
  if (write) fs::create_directories(opts.out_dir);
  const fs::path log_path = opts.out_dir / "loss_log.jsonl";
  if (write && state.step == 0) std::ofstream(log_path, std::ios::trunc);

  std::vector<StepLosses> log;
  int end = cfg.optim.steps;
  if (opts.stop_after >= 0) end = std::min(end, opts.stop_after);
  while (state.step < end) {
    const auto [seq, frame] = training_sample(cfg, data, split, state.step);
    StepLosses s = compute_gradients(state.params, cfg, data, seq, frame);
    s.step = state.step;
    if (!std::isfinite(s.total)) {
      if (write) append_log(log_path, s);
      throw NonFiniteLoss(state.step, "non-finite loss at step " + std::to_string(state.step));
    }
    s.grad_norm = adamw_step(state.params, adam, state.step);
    ++state.step;
    log.push_back(s);
    if (write) {
      append_log(log_path, s);
      if (cfg.optim.checkpoint_every > 0 && state.step % cfg.optim.checkpoint_every == 0)
        save_checkpoint(opts.out_dir / ("ckpt_step" + std::to_string(state.step) + ".bin"), state, cfg);
    }
    if (!opts.quiet && (state.step % 25 == 0 || state.step == end))
      std::cerr << "step " << state.step << " total " << s.total << " cls " << s.cls << " reg " << s.reg
                << " hgt " << s.hgt << "\n";
  }
  if (write && state.step == cfg.optim.steps) save_checkpoint(opts.out_dir / "ckpt_final.bin", state, cfg);
  return log;
}

}  // namespace hgbev
