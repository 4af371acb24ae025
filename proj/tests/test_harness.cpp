#include "test_util.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

using namespace hgbev;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

const Dataset& small_dataset() {
  static const Dataset d = generate_dataset(small_run().data);
  return d;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(f, line);) out.push_back(line);
  return out;
}

bool same_losses(const StepLosses& a, const StepLosses& b) {
  return a.step == b.step && a.cls == b.cls && a.reg == b.reg && a.hgt == b.hgt && a.total == b.total;
}

}  // namespace

TEST_CASE("config json round trip and validation") {
  const RunConfig c = small_run();
  const auto j = config_to_json(c);
  CHECK(config_to_json(config_from_json(j)) == j);

  auto bad = j;
  bad["encoder"]["n_reff"] = 3;
  try {
    config_from_json(bad);
    FAIL("unknown key accepted");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("encoder.n_reff") != std::string::npos);
  }
  bad = j;
  bad["ablation"]["uniform_nref"] = 16;  // VHA still on
  CHECK_THROWS_AS(config_from_json(bad), std::invalid_argument);
  bad = j;
  bad["optim"]["lr"] = -1;
  CHECK_THROWS_AS(config_from_json(bad), std::invalid_argument);
  bad = j;
  bad["loss"]["cls"] = -1;
  CHECK_THROWS_AS(config_from_json(bad), std::invalid_argument);
}

TEST_CASE("config files resolve the dataset next to the file and report parse offsets") {
  TempDir dir("hgbev_cfg");
  auto j = config_to_json(small_run());
  j["dataset"] = "data/set";
  std::ofstream(dir.path / "run.json") << j.dump(2);
  CHECK(fs::path(load_config(dir.path / "run.json").dataset) == (dir.path / "data/set").lexically_normal());
  std::ofstream(dir.path / "broken.json") << "{\"seed\": 1,,}";
  try {
    load_config(dir.path / "broken.json");
    FAIL("broken config accepted");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("byte") != std::string::npos);
  }
  CHECK_THROWS_AS(load_config(dir.path / "nope.json"), std::invalid_argument);
}

TEST_CASE("output root environment variable") {
  ::setenv("HGBEV_OUTPUT_ROOT", "/tmp/hgbev_root", 1);
  CHECK(resolve_output("runs/a") == fs::path("/tmp/hgbev_root/runs/a"));
  CHECK(resolve_output("/abs/b") == fs::path("/abs/b"));
  ::unsetenv("HGBEV_OUTPUT_ROOT");
  CHECK(resolve_output("runs/a") == fs::path("runs/a"));
}

TEST_CASE("sequence split is 80/20 by index") {
  const Split s = split_sequences(64, 0.2);
  CHECK(s.train.size() == 51);
  CHECK(s.eval.size() == 13);
  CHECK(s.eval.front() == 51);
  CHECK(s.eval.back() == 63);
  const Split five = split_sequences(5, 0.2);
  CHECK(five.train == std::vector<int>{0, 1, 2, 3});
  CHECK(five.eval == std::vector<int>{4});
  const Split one = split_sequences(1, 0.2);
  CHECK(one.train == std::vector<int>{0});
  CHECK(one.eval == std::vector<int>{0});
}

TEST_CASE("dataset layout check compares the planar grid only") {
  RunConfig c = small_run();
  CHECK_NOTHROW(check_dataset_layout(small_dataset(), c));
  c.encoder.grid.d_bins = 4;
  c.encoder.n_ref = 2;
  CHECK_NOTHROW(check_dataset_layout(small_dataset(), c));
  c.encoder.grid.h_cells = 7;
  CHECK_THROWS_AS(check_dataset_layout(small_dataset(), c), std::invalid_argument);
}

TEST_CASE("training is deterministic and writes one log record per step") {
  const RunConfig cfg = small_run();
  TempDir dir("hgbev_train");
  TrainState a{init_model(cfg), 0}, b{init_model(cfg), 0};
  TrainOptions opts;
  opts.out_dir = dir.path;
  const auto la = train(a, cfg, small_dataset(), opts);
  const auto lb = train(b, cfg, small_dataset());
  REQUIRE(la.size() == 6);
  for (size_t k = 0; k < la.size(); ++k) CHECK(same_losses(la[k], lb[k]));
  for (const auto& [name, p] : a.params.all()) CHECK(p.value.data == b.params.at(name).value.data);

  const auto lines = read_lines(dir.path / "loss_log.jsonl");
  REQUIRE(lines.size() == 6);
  for (size_t k = 0; k < lines.size(); ++k) {
    const auto j = nlohmann::json::parse(lines[k]);
    CHECK(j.at("step") == static_cast<int>(k));
    for (const char* key : {"L_cls", "L_reg", "L_hgt", "total"}) CHECK(j.contains(key));
    CHECK(j.at("total").get<double>() == la[k].total);
  }
  CHECK(fs::exists(dir.path / "ckpt_step3.bin"));
  CHECK(fs::exists(dir.path / "ckpt_step6.bin"));
  CHECK(fs::exists(dir.path / "ckpt_final.bin"));
  for (int s = 0; s < 6; ++s) CHECK(training_sample(cfg, small_dataset(), split_sequences(5, 0.2), s).first < 4);
}

TEST_CASE("resuming from an f64 checkpoint reproduces the uninterrupted run bit-exactly") {
  RunConfig cfg = small_run();
  cfg.checkpoint_dtype = "f64";
  TempDir dir("hgbev_resume");
  TrainState full{init_model(cfg), 0};
  TrainOptions opts;
  opts.out_dir = dir.path;
  const auto whole = train(full, cfg, small_dataset(), opts);

  TrainState resumed = load_checkpoint(dir.path / "ckpt_step3.bin", cfg);
  CHECK(resumed.step == 3);
  const auto tail = train(resumed, cfg, small_dataset());
  REQUIRE(tail.size() == 3);
  for (size_t k = 0; k < 3; ++k) CHECK(same_losses(tail[k], whole[k + 3]));
  for (const auto& [name, p] : full.params.all()) {
    CHECK(p.value.data == resumed.params.at(name).value.data);
    CHECK(p.adam_m.data == resumed.params.at(name).adam_m.data);
  }
}

TEST_CASE("f32 checkpoints round values to single precision") {
  const RunConfig cfg = small_run();
  TempDir dir("hgbev_f32");
  TrainState s{init_model(cfg), 4};
  save_checkpoint(dir.path / "c.bin", s, cfg);
  const TrainState r = load_checkpoint(dir.path / "c.bin", cfg);
  CHECK(r.step == 4);
  for (const auto& [name, p] : s.params.all()) {
    const Tensor& v = r.params.at(name).value;
    REQUIRE(v.shape == p.value.shape);
    for (long i = 0; i < v.numel(); ++i) CHECK(v[i] == static_cast<double>(static_cast<float>(p.value[i])));
  }
  const auto head = read_lines(dir.path / "c.bin");
  CHECK(head.at(0) == "HGBEV-CHECKPOINT 1");
}

TEST_CASE("checkpoint mismatch lists the differing fields") {
  const RunConfig cfg = small_run();
  TempDir dir("hgbev_mismatch");
  save_checkpoint(dir.path / "c.bin", TrainState{init_model(cfg), 0}, cfg);
  RunConfig other = cfg;
  other.encoder.n_ref = 2;
  other.head.hidden = 4;
  try {
    load_checkpoint(dir.path / "c.bin", other);
    FAIL("mismatch accepted");
  } catch (const CheckpointMismatch& e) {
    REQUIRE(e.fields().size() == 2);
    CHECK(e.fields()[0].rfind("encoder.n_ref", 0) == 0);
    CHECK(e.fields()[1].rfind("head.hidden", 0) == 0);
    CHECK(std::string(e.what()).find("incompatible") != std::string::npos);
  }
  // optimizer settings do not affect shapes
  RunConfig lr = cfg;
  lr.optim.lr = 0.5;
  CHECK_NOTHROW(load_checkpoint(dir.path / "c.bin", lr));
  std::ofstream(dir.path / "junk.bin") << "not a checkpoint";
  CHECK_THROWS(load_checkpoint(dir.path / "junk.bin", cfg));
}

TEST_CASE("non-finite loss aborts naming the step") {
  const RunConfig cfg = small_run();
  TrainState s{init_model(cfg), 0};
  s.params.value("bev.queries")[0] = NAN;
  try {
    train(s, cfg, small_dataset());
    FAIL("divergence not reported");
  } catch (const NonFiniteLoss& e) {
    CHECK(e.step() == 0);
  }
}

TEST_CASE("lambda3 = 0 still logs the height loss but leaves it out of the total") {
  RunConfig cfg = small_run();
  cfg.loss.hgt = 0;
  cfg.optim.steps = 2;
  TrainState s{init_model(cfg), 0};
  for (const StepLosses& l : train(s, cfg, small_dataset())) {
    CHECK(l.hgt > 0);
    CHECK(l.total == doctest::Approx(cfg.loss.cls * l.cls + cfg.loss.reg * l.reg).epsilon(1e-12));
  }
}

TEST_CASE("evaluation is deterministic and reports the full schema") {
  const RunConfig cfg = small_run();
  ParamStore store = init_model(cfg);
  std::vector<FrameDetections> frames;
  const EvalReport a = evaluate(store, cfg, small_dataset(), &frames);
  const EvalReport b = evaluate(store, cfg, small_dataset());
  CHECK(a.to_json().dump() == b.to_json().dump());
  const auto j = a.to_json();
  for (const char* k : {"map", "map_per_class", "mean_center_error", "mean_height_error", "height_accuracy",
                        "height_accuracy_per_class", "n_frames", "n_gt", "eval_sequences"})
    CHECK(j.contains(k));
  CHECK(a.eval_sequences == std::vector<int>{4});
  CHECK(a.n_frames == 3);
  CHECK(frames.size() == 3);
  CHECK(a.height_accuracy_per_class.size() == 2);
  for (const FrameDetections& f : frames) {
    REQUIRE(f.fused.size() == 1);
    CHECK(f.fused[0].normalization_error() <= 1e-6);
  }
}

TEST_CASE("detection records round trip") {
  const RunConfig cfg = small_run();
  ParamStore store = init_model(cfg);
  std::vector<FrameDetections> frames;
  evaluate(store, cfg, small_dataset(), &frames);
  TempDir dir("hgbev_det");
  write_detections(dir.path / "d.jsonl", cfg.encoder.grid, frames);
  const DetectionRecords r = read_detections(dir.path / "d.jsonl");
  CHECK(r.grid == cfg.encoder.grid);
  REQUIRE(r.frames.size() == frames.size());
  for (size_t k = 0; k < frames.size(); ++k) {
    CHECK(r.frames[k].sequence == frames[k].sequence);
    CHECK(r.frames[k].gts == frames[k].gts);
    CHECK(r.frames[k].dets.boxes == frames[k].dets.boxes);
    CHECK(r.frames[k].dets.scores == frames[k].dets.scores);
    REQUIRE(r.frames[k].fused.size() == 1);
    CHECK(r.frames[k].fused[0].values.data == frames[k].fused[0].values.data);
  }
  std::ofstream(dir.path / "bad.jsonl") << "{\"kind\":\"grid\"}\n{oops\n";
  try {
    read_detections(dir.path / "bad.jsonl");
    FAIL("bad records accepted");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("line") != std::string::npos);
  }
}

TEST_CASE("plots are deterministic and an empty frame is the blank grid") {
  const GridSpec spec = small_grid(6, 6, 8, 4);
  const Image empty = plot_bev_boxes(spec, {}, {}, 8);
  CHECK(empty.width == 48);
  CHECK(empty.height == 48);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x) {
      const std::uint8_t want = (x % 8 == 0 || y % 8 == 0) ? 220 : 255;
      const size_t p = static_cast<size_t>(y * 48 + x) * 3;
      CHECK(empty.rgb[p] == want);
      CHECK(empty.rgb[p + 1] == want);
      CHECK(empty.rgb[p + 2] == want);
    }
  Box3D b;
  b.center = {1, 2, -3};
  b.size = {3, 2, 2};
  b.yaw = 0.4;
  Box3D p = b;
  p.center[0] += 0.5;
  const Image one = plot_bev_boxes(spec, {b}, {p});
  CHECK(one == plot_bev_boxes(spec, {b}, {p}));
  CHECK_FALSE(one == empty);

  // height map: masked cells only, grey level by argmax bin
  Tensor rows({36, 8}, 0.01);
  rows[0 * 8 + 7] = 1;  // cell (0, 0) -> bin 7
  rows[35 * 8 + 0] = 1;  // cell (5, 5) -> bin 0
  const HeightField f = HeightField::from_rows(rows, 6, 6, HeightKind::fused);
  std::vector<char> mask(36, 0);
  mask[0] = mask[35] = 1;
  const Image h = plot_height_argmax(f, mask, 2);
  CHECK(h == plot_height_argmax(f, mask, 2));
  // cell (0, 0) is drawn at the bottom-left, cell (5, 5) at the top-right
  CHECK(h.rgb[static_cast<size_t>((11 * 12 + 0) * 3)] == 255);
  CHECK(h.rgb[static_cast<size_t>((0 * 12 + 11) * 3)] == 40);
  CHECK(h.rgb[static_cast<size_t>((5 * 12 + 5) * 3)] == 0);
  CHECK_THROWS_AS(plot_height_argmax(f, std::vector<char>(5, 1)), std::invalid_argument);
}

TEST_CASE("gradcheck passes on fresh parameters and a corrupted row fails alone") {
  const auto ops = gradcheck_ops();
  const auto rows = run_gradcheck({});
  REQUIRE(rows.size() == ops.size());
  std::set<std::string> seen;
  for (size_t k = 0; k < rows.size(); ++k) {
    CHECK(rows[k].op == ops[k]);
    CHECK(rows[k].pass);
    CHECK(rows[k].max_rel_error <= 1e-4);
    CHECK(rows[k].n_checked > 0);
    seen.insert(rows[k].op);
  }
  CHECK(seen.size() == ops.size());
  for (const char* must : {"predict_height_field", "dca_fuse", "neighbor_offsets", "edge_weights", "deformable_attention",
                           "temporal_self_attention", "encoder_layer", "toy_backbone", "head_forward", "focal_loss",
                           "l1_reg_loss", "height_loss"})
    CHECK(seen.count(must) == 1);

  GradcheckOptions bad;
  bad.corrupt_op = "edge_weights";
  for (const GradcheckRow& r : run_gradcheck(bad)) CHECK(r.pass == (r.op != "edge_weights"));
}

TEST_CASE("ablation arms and table") {
  const auto arms = main_arms();
  REQUIRE(arms.size() == 4);
  CHECK((!arms[0].vha && !arms[0].dhca));
  CHECK((arms[3].vha && arms[3].dhca));
  const RunConfig base = small_run();
  const RunConfig b = apply_arm(base, arms[0], 17);
  CHECK(b.seed == 17);
  CHECK_FALSE(b.encoder.vha);
  CHECK(b.encoder.neighbors() == 0);
  const auto controls = sweep_arms("controls");
  REQUIRE(controls.size() == 2);
  CHECK(apply_arm(base, controls[0], 0).encoder.refs_per_cell() == 16);
  CHECK(apply_arm(base, controls[1], 0).loss.hgt == 0.0);
  CHECK(sweep_arms("bins").size() == 4);
  CHECK(sweep_arms("neighbors").size() == 3);
  CHECK(sweep_arms("nref").size() == 3);
  CHECK_THROWS_AS(sweep_arms("nope"), std::invalid_argument);

  RunConfig tiny = small_run();
  tiny.optim.steps = 2;
  const auto results = run_ablation(tiny, small_dataset(), {arms[0], arms[3]}, 2);
  REQUIRE(results.size() == 2);
  CHECK(results[0].seeds == std::vector<std::uint64_t>{3, 4});
  CHECK(results[0].map.size() == 2);
  const std::string table = format_ablation_table(results);
  CHECK(table.find("| Arm") != std::string::npos);
  CHECK(table.find("VHA") != std::string::npos);
  CHECK(table.find("DHCA") != std::string::npos);
  CHECK(table.find("| 3,4 |") != std::string::npos);
}
