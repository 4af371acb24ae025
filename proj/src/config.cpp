#include "hgbev/harness.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>

namespace hgbev {

using ojson = nlohmann::ordered_json;
using nlohmann::json;
namespace fs = std::filesystem;

void RunConfig::validate() const {
  encoder.validate();
  loss.validate();
  if (!(height_target.sigma > 0)) throw std::invalid_argument("config: loss.sigma must be positive");
  if (head.num_classes < 1 || head.hidden < 1) throw std::invalid_argument("config: head sizes must be positive");
  if (!(head.prior > 0 && head.prior < 1)) throw std::invalid_argument("config: head.prior must be in (0, 1)");
  if (optim.steps < 0 || !(optim.lr > 0)) throw std::invalid_argument("config: optim.steps >= 0 and lr > 0 required");
  if (!(eval_fraction > 0 && eval_fraction < 1)) throw std::invalid_argument("config: eval_fraction must be in (0, 1)");
  if (checkpoint_dtype != "f32" && checkpoint_dtype != "f64")
    throw std::invalid_argument("config: checkpoint_dtype must be f32 or f64");
  if (data.n_sequences < 1 || data.scene.n_frames < 1 || data.scene.n_objects < 0)
    throw std::invalid_argument("config: data sizes must be positive");
}

namespace {

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) throw std::invalid_argument("config: unknown key " + where + "." + it.key());
}

template <class T>
void read(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace

ojson config_to_json(const RunConfig& c) {
  const EncoderConfig& e = c.encoder;
  ojson j;
  j["dataset"] = c.dataset;
  j["output_dir"] = c.output_dir;
  j["seed"] = c.seed;
  j["grid"] = grid_to_json(e.grid);
  j["encoder"] = {{"n_layers", e.n_layers},         {"n_ref", e.n_ref},
                  {"m_neighbors", e.m_neighbors},   {"n_heads", e.n_heads},
                  {"n_def_points", e.n_def_points}, {"history_len", e.history_len},
                  {"ffn_hidden", e.ffn_hidden},     {"height_hidden", e.height_hidden},
                  {"backbone_hidden", e.backbone_hidden}, {"neighbor_radius", e.neighbor_radius},
                  {"image_stride", e.image_stride}};
  j["ablation"] = {{"vha", e.vha}, {"dhca", e.dhca}, {"uniform_nref", e.uniform_nref}};
  j["head"] = {{"num_classes", c.head.num_classes}, {"hidden", c.head.hidden}, {"prior", c.head.prior}};
  j["loss"] = {{"cls", c.loss.cls}, {"reg", c.loss.reg}, {"hgt", c.loss.hgt}, {"sigma", c.height_target.sigma}};
  j["optim"] = {{"lr", c.optim.lr},
                {"weight_decay", c.optim.weight_decay},
                {"steps", c.optim.steps},
                {"warmup_steps", c.optim.warmup_steps},
                {"min_lr_ratio", c.optim.min_lr_ratio},
                {"grad_clip", c.optim.grad_clip},
                {"checkpoint_every", c.optim.checkpoint_every}};
  j["eval"] = {{"score_threshold", c.score_threshold}, {"eval_fraction", c.eval_fraction}};
  j["checkpoint_dtype"] = c.checkpoint_dtype;
  const SceneConfig& s = c.data.scene;
  j["data"] = {{"n_sequences", c.data.n_sequences},
               {"seed", c.data.seed},
               {"mid_class", c.data.mid_class},
               {"n_frames", s.n_frames},
               {"n_objects", s.n_objects},
               {"dt", s.dt},
               {"ground_z", s.ground_z},
               {"max_ego_speed", s.max_ego_speed},
               {"max_yaw_rate", s.max_yaw_rate},
               {"min_range", s.min_range},
               {"margin", s.margin},
               {"rig",
                {{"n_cameras", c.data.rig.n_cameras},
                 {"focal", c.data.rig.focal},
                 {"cx", c.data.rig.cx},
                 {"cy", c.data.rig.cy},
                 {"image_w", c.data.rig.image_w},
                 {"image_h", c.data.rig.image_h},
                 {"mount_z", c.data.rig.mount_z},
                 {"mount_forward", c.data.rig.mount_forward}}}};
  return j;
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  check_keys(j, "config",
             {"dataset", "output_dir", "seed", "grid", "encoder", "ablation", "head", "loss", "optim", "eval",
              "checkpoint_dtype", "data"});
  try {
    read(j, "dataset", c.dataset);
    read(j, "output_dir", c.output_dir);
    read(j, "seed", c.seed);
    read(j, "checkpoint_dtype", c.checkpoint_dtype);
    if (j.contains("grid")) {
      const json& g = j.at("grid");
      check_keys(g, "grid", {"h_cells", "w_cells", "x_range", "y_range", "z_range", "d_bins", "c_channels"});
      json full = grid_to_json(c.encoder.grid);
      full.update(g);
      c.encoder.grid = grid_from_json(full);
    }
    if (j.contains("encoder")) {
      const json& e = j.at("encoder");
      check_keys(e, "encoder",
                 {"n_layers", "n_ref", "m_neighbors", "n_heads", "n_def_points", "history_len", "ffn_hidden",
                  "height_hidden", "backbone_hidden", "neighbor_radius", "image_stride"});
      EncoderConfig& x = c.encoder;
      read(e, "n_layers", x.n_layers);
      read(e, "n_ref", x.n_ref);
      read(e, "m_neighbors", x.m_neighbors);
      read(e, "n_heads", x.n_heads);
      read(e, "n_def_points", x.n_def_points);
      read(e, "history_len", x.history_len);
      read(e, "ffn_hidden", x.ffn_hidden);
      read(e, "height_hidden", x.height_hidden);
      read(e, "backbone_hidden", x.backbone_hidden);
      read(e, "neighbor_radius", x.neighbor_radius);
      read(e, "image_stride", x.image_stride);
    }
    if (j.contains("ablation")) {
      const json& a = j.at("ablation");
      check_keys(a, "ablation", {"vha", "dhca", "uniform_nref"});
      read(a, "vha", c.encoder.vha);
      read(a, "dhca", c.encoder.dhca);
      read(a, "uniform_nref", c.encoder.uniform_nref);
    }
    if (j.contains("head")) {
      const json& h = j.at("head");
      check_keys(h, "head", {"num_classes", "hidden", "prior"});
      read(h, "num_classes", c.head.num_classes);
      read(h, "hidden", c.head.hidden);
      read(h, "prior", c.head.prior);
    }
    if (j.contains("loss")) {
      const json& l = j.at("loss");
      check_keys(l, "loss", {"cls", "reg", "hgt", "sigma"});
      read(l, "cls", c.loss.cls);
      read(l, "reg", c.loss.reg);
      read(l, "hgt", c.loss.hgt);
      read(l, "sigma", c.height_target.sigma);
    }
    if (j.contains("optim")) {
      const json& o = j.at("optim");
      check_keys(o, "optim",
                 {"lr", "weight_decay", "steps", "warmup_steps", "min_lr_ratio", "grad_clip", "checkpoint_every"});
      read(o, "lr", c.optim.lr);
      read(o, "weight_decay", c.optim.weight_decay);
      read(o, "steps", c.optim.steps);
      read(o, "warmup_steps", c.optim.warmup_steps);
      read(o, "min_lr_ratio", c.optim.min_lr_ratio);
      read(o, "grad_clip", c.optim.grad_clip);
      read(o, "checkpoint_every", c.optim.checkpoint_every);
    }
    if (j.contains("eval")) {
      const json& v = j.at("eval");
      check_keys(v, "eval", {"score_threshold", "eval_fraction"});
      read(v, "score_threshold", c.score_threshold);
      read(v, "eval_fraction", c.eval_fraction);
    }
    if (j.contains("data")) {
      const json& d = j.at("data");
      check_keys(d, "data",
                 {"n_sequences", "seed", "mid_class", "n_frames", "n_objects", "dt", "ground_z", "max_ego_speed",
                  "max_yaw_rate", "min_range", "margin", "rig"});
      read(d, "n_sequences", c.data.n_sequences);
      read(d, "seed", c.data.seed);
      read(d, "mid_class", c.data.mid_class);
      SceneConfig& s = c.data.scene;
      read(d, "n_frames", s.n_frames);
      read(d, "n_objects", s.n_objects);
      read(d, "dt", s.dt);
      read(d, "ground_z", s.ground_z);
      read(d, "max_ego_speed", s.max_ego_speed);
      read(d, "max_yaw_rate", s.max_yaw_rate);
      read(d, "min_range", s.min_range);
      read(d, "margin", s.margin);
      if (d.contains("rig")) {
        const json& r = d.at("rig");
        check_keys(r, "data.rig", {"n_cameras", "focal", "cx", "cy", "image_w", "image_h", "mount_z", "mount_forward"});
        RigConfig& rc = c.data.rig;
        read(r, "n_cameras", rc.n_cameras);
        read(r, "focal", rc.focal);
        read(r, "cx", rc.cx);
        read(r, "cy", rc.cy);
        read(r, "image_w", rc.image_w);
        read(r, "image_h", rc.image_h);
        read(r, "mount_z", rc.mount_z);
        read(r, "mount_forward", rc.mount_forward);
      }
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  c.data.scene.grid = c.encoder.grid;
  c.validate();
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": byte " + std::to_string(e.byte) + ": " + e.what());
  }
  RunConfig c = config_from_json(j);
  // Dataset paths in a config file are relative to the file.
  if (!c.dataset.empty() && fs::path(c.dataset).is_relative())
    c.dataset = (path.parent_path() / c.dataset).lexically_normal().string();
  return c;
}

fs::path resolve_output(const std::string& path) {
  fs::path p(path);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("HGBEV_OUTPUT_ROOT"); root && *root) return fs::path(root) / p;
  return p;
}

Split split_sequences(int n, double fraction) {
  Split s;
  int n_eval = static_cast<int>(std::ceil(fraction * n - 1e-9));
  if (n > 1) n_eval = std::clamp(n_eval, 1, n - 1);
  else n_eval = 0;
  for (int k = 0; k < n - n_eval; ++k) s.train.push_back(k);
  for (int k = n - n_eval; k < n; ++k) s.eval.push_back(k);
  if (s.eval.empty()) s.eval = s.train;
  return s;
}

bool same_planar_layout(const GridSpec& a, const GridSpec& b) {
  return a.h_cells == b.h_cells && a.w_cells == b.w_cells && a.x_range == b.x_range && a.y_range == b.y_range;
}

void check_dataset_layout(const Dataset& data, const RunConfig& cfg) {
  if (!same_planar_layout(data.grid, cfg.encoder.grid))
    throw std::invalid_argument("dataset grid layout differs from the configured grid");
  if (data.sequences.empty()) throw std::invalid_argument("dataset has no sequences");
}

ParamStore init_model(const RunConfig& cfg) {
  cfg.validate();
  ParamStore store;
  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 17);
  init_encoder(store, cfg.encoder, rng);
  init_head(store, cfg.encoder.grid.c_channels, cfg.head, rng);
  return store;
}

}  // namespace hgbev
