#include "hgbev/scenes.hpp"

#include "hgbev/serialize.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace hgbev {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

std::vector<ClassProfile> default_profiles(bool with_mid) {
  std::vector<ClassProfile> p;
  p.push_back({0, "cone", {-4.7, -4.3}, {0.8, 1.2}, {0.8, 1.2}, {235, 120, 35}, 0.0});
  p.push_back({1, "truck", {-3.5, -2.0}, {4.0, 6.5}, {2.0, 2.8}, {70, 110, 200}, 2.0});
  if (with_mid) p.push_back({2, "car", {-4.2, -3.6}, {3.5, 4.8}, {1.7, 2.1}, {200, 60, 70}, 3.0});
  return p;
}

std::vector<CameraModel> make_rig(const RigConfig& cfg) {
  std::vector<CameraModel> rig;
  for (int k = 0; k < cfg.n_cameras; ++k) {
    const double yaw = 2 * std::numbers::pi * k / cfg.n_cameras;
    const std::array<double, 3> pos{cfg.mount_forward * std::cos(yaw), cfg.mount_forward * std::sin(yaw),
                                    cfg.mount_z};
    rig.push_back(make_pinhole_camera(k, yaw, pos, cfg.focal, cfg.cx, cfg.cy, cfg.image_w, cfg.image_h));
  }
  return rig;
}

// ---------------------------------------------------------------- rendering

namespace {

struct Ray {
  std::array<double, 3> origin;
  std::array<double, 3> dir;
};

/// Inverse of the left 3x3 block of a projection, and the camera center.
struct Unprojector {
  double inv[3][3];
  std::array<double, 3> center;

  explicit Unprojector(const CameraModel& cam) {
    const auto& P = cam.projection;
    const double a = P[0], b = P[1], c = P[2], d = P[4], e = P[5], f = P[6], g = P[8], h = P[9], i = P[10];
    const double det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
    inv[0][0] = (e * i - f * h) / det;
    inv[0][1] = (c * h - b * i) / det;
    inv[0][2] = (b * f - c * e) / det;
    inv[1][0] = (f * g - d * i) / det;
    inv[1][1] = (a * i - c * g) / det;
    inv[1][2] = (c * d - a * f) / det;
    inv[2][0] = (d * h - e * g) / det;
    inv[2][1] = (b * g - a * h) / det;
    inv[2][2] = (a * e - b * d) / det;
    for (int r = 0; r < 3; ++r)
      center[static_cast<size_t>(r)] = -(inv[r][0] * P[3] + inv[r][1] * P[7] + inv[r][2] * P[11]);
  }

  Ray ray(double u, double v) const {
    Ray out{center, {}};
    for (int r = 0; r < 3; ++r) out.dir[static_cast<size_t>(r)] = inv[r][0] * u + inv[r][1] * v + inv[r][2];
    return out;
  }
};

/// Nearest positive hit of a ray with an oriented box; returns the distance
/// parameter and the world-frame face normal.
bool intersect_box(const Ray& ray, const Box3D& b, double& t_hit, std::array<double, 3>& normal) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double ox = ray.origin[0] - b.center[0], oy = ray.origin[1] - b.center[1], oz = ray.origin[2] - b.center[2];
  const double o[3] = {c * ox + s * oy, -s * ox + c * oy, oz};
  const double d[3] = {c * ray.dir[0] + s * ray.dir[1], -s * ray.dir[0] + c * ray.dir[1], ray.dir[2]};
  const double half[3] = {0.5 * b.size[0], 0.5 * b.size[1], 0.5 * b.size[2]};
  double t0 = -INFINITY, t1 = INFINITY;
  int axis = -1;
  double sign = 0;
  for (int k = 0; k < 3; ++k) {
    if (std::abs(d[k]) < 1e-12) {
      if (std::abs(o[k]) > half[k]) return false;
      continue;
    }
    const double ta = std::min((-half[k] - o[k]) / d[k], (half[k] - o[k]) / d[k]);
    const double tb = std::max((-half[k] - o[k]) / d[k], (half[k] - o[k]) / d[k]);
    if (ta > t0) {
      t0 = ta;
      axis = k;
      sign = d[k] > 0 ? -1.0 : 1.0;
    }
    t1 = std::min(t1, tb);
  }
  if (t0 > t1 || t1 <= 0 || t0 <= 0 || axis < 0) return false;
  double n_local[3] = {0, 0, 0};
  n_local[axis] = sign;
  normal = {c * n_local[0] - s * n_local[1], s * n_local[0] + c * n_local[1], n_local[2]};
  t_hit = t0;
  return true;
}

std::array<std::uint8_t, 3> background(const Ray& ray, double ground_z) {
  const double len = std::sqrt(ray.dir[0] * ray.dir[0] + ray.dir[1] * ray.dir[1] + ray.dir[2] * ray.dir[2]);
  const double dz = ray.dir[2] / len;
  if (ray.dir[2] < 0) {
    const double t = (ground_z - ray.origin[2]) / ray.dir[2];
    const double dist = t * std::hypot(ray.dir[0], ray.dir[1]);
    const double f = std::exp(-dist / 30.0);
    return {static_cast<std::uint8_t>(std::lround(70 + 70 * f)), static_cast<std::uint8_t>(std::lround(70 + 60 * f)),
            static_cast<std::uint8_t>(std::lround(65 + 40 * f))};
  }
  return {static_cast<std::uint8_t>(std::lround(175 - 60 * dz)), static_cast<std::uint8_t>(std::lround(195 - 40 * dz)),
          235};
}

}  // namespace

std::vector<Image> render_views(const std::vector<Box3D>& boxes, const std::vector<CameraModel>& rig,
                                const std::vector<ClassProfile>& profiles, double ground_z) {
  if (rig.empty()) throw std::invalid_argument("render_views: empty rig");
  const double light[3] = {0.3 / 1.0677, 0.2 / 1.0677, 1.0 / 1.0677};
  std::vector<Image> out;
  for (const CameraModel& cam : rig) {
    const Unprojector un(cam);
    Image img{cam.image_w, cam.image_h, std::vector<std::uint8_t>(static_cast<size_t>(cam.image_w * cam.image_h * 3))};
    for (int v = 0; v < cam.image_h; ++v)
      for (int u = 0; u < cam.image_w; ++u) {
        const Ray ray = un.ray(u, v);
        double best = INFINITY;
        std::array<double, 3> n{};
        int owner = -1;
        for (size_t b = 0; b < boxes.size(); ++b) {
          double t;
          std::array<double, 3> nb;
          if (intersect_box(ray, boxes[b], t, nb) && t < best) {
            best = t;
            n = nb;
            owner = static_cast<int>(b);
          }
        }
        std::array<std::uint8_t, 3> px;
        if (owner < 0) {
          px = background(ray, ground_z);
        } else {
          const int cls = boxes[static_cast<size_t>(owner)].class_id;
          std::array<std::uint8_t, 3> albedo{200, 200, 200};
          for (const ClassProfile& p : profiles)
            if (p.class_id == cls) albedo = p.albedo;
          const double shade = 0.35 + 0.65 * std::max(0.0, n[0] * light[0] + n[1] * light[1] + n[2] * light[2]);
          for (int k = 0; k < 3; ++k)
            px[static_cast<size_t>(k)] = static_cast<std::uint8_t>(std::clamp(std::lround(albedo[static_cast<size_t>(k)] * shade), 0L, 255L));
        }
        std::copy(px.begin(), px.end(), img.rgb.begin() + (static_cast<long>(v) * cam.image_w + u) * 3);
      }
    out.push_back(std::move(img));
  }
  return out;
}

Tensor images_to_tensor(const std::vector<Image>& images) {
  if (images.empty()) throw std::invalid_argument("images_to_tensor: no images");
  const int w = images[0].width, h = images[0].height;
  Tensor t({static_cast<int>(images.size()), h, w, 3});
  for (size_t i = 0; i < images.size(); ++i) {
    if (images[i].width != w || images[i].height != h)
      throw std::invalid_argument("images_to_tensor: images differ in size");
    for (size_t k = 0; k < images[i].rgb.size(); ++k)
      t[static_cast<long>(i * images[i].rgb.size() + k)] = images[i].rgb[k] / 255.0;
  }
  return t;
}

// ---------------------------------------------------------------- generation

namespace {

Pose2D ego_pose_at(double speed, double yaw_rate, double time) {
  if (std::abs(yaw_rate) < 1e-12) return {speed * time, 0.0, 0.0};
  const double h = yaw_rate * time;
  return {speed / yaw_rate * std::sin(h), speed / yaw_rate * (1 - std::cos(h)), h};
}

struct Placed {
  Box3D world;  // frame-0 pose
  double radius;
};

Box3D to_ego(const Placed& p, const Pose2D& ego, double time) {
  Box3D b = p.world;
  const double wx = p.world.center[0] + p.world.velocity[0] * time;
  const double wy = p.world.center[1] + p.world.velocity[1] * time;
  const double c = std::cos(-ego.heading), s = std::sin(-ego.heading);
  const double dx = wx - ego.x, dy = wy - ego.y;
  b.center[0] = c * dx - s * dy;
  b.center[1] = s * dx + c * dy;
  b.yaw = wrap_angle(p.world.yaw - ego.heading);
  b.velocity = {c * p.world.velocity[0] - s * p.world.velocity[1], s * p.world.velocity[0] + c * p.world.velocity[1]};
  return b;
}

}  // namespace

std::vector<SceneFrame> generate_sequence(std::uint64_t seed, const SceneConfig& cfg,
                                          const std::vector<ClassProfile>& profiles,
                                          const std::vector<CameraModel>& rig) {
  if (cfg.n_frames < 1) throw std::invalid_argument("generate_sequence: n_frames must be >= 1");
  if (cfg.n_objects > 0 && profiles.empty()) throw std::invalid_argument("generate_sequence: no class profiles");
  cfg.grid.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&](const Range& r) { return r.min + (r.max - r.min) * unit(rng); };

  const double speed = cfg.max_ego_speed * unit(rng);
  const double yaw_rate = cfg.max_yaw_rate * (2 * unit(rng) - 1);
  std::vector<Pose2D> poses;
  for (int t = 0; t < cfg.n_frames; ++t) poses.push_back(ego_pose_at(speed, yaw_rate, t * cfg.dt));

  const Range xr{cfg.grid.x_range.min + cfg.margin, cfg.grid.x_range.max - cfg.margin};
  const Range yr{cfg.grid.y_range.min + cfg.margin, cfg.grid.y_range.max - cfg.margin};
  std::vector<Placed> placed;
  for (int o = 0; o < cfg.n_objects; ++o) {
    bool ok = false;
    for (int attempt = 0; attempt < 500 && !ok; ++attempt) {
      const ClassProfile& prof = profiles[static_cast<size_t>(rng() % profiles.size())];
      Placed p;
      Box3D& b = p.world;
      b.class_id = prof.class_id;
      b.center = {draw(xr), draw(yr), draw(prof.height_band)};
      b.size = {draw(prof.length), draw(prof.width), 2 * (b.center[2] - cfg.ground_z)};
      b.yaw = wrap_angle(std::numbers::pi * (2 * unit(rng) - 1));
      const double v = prof.max_speed * unit(rng);
      b.velocity = {v * std::cos(b.yaw), v * std::sin(b.yaw)};
      p.radius = 0.5 * std::hypot(b.size[0], b.size[1]);
      ok = true;
      for (int t = 0; t < cfg.n_frames && ok; ++t) {
        const double time = t * cfg.dt;
        const Box3D e = to_ego(p, poses[static_cast<size_t>(t)], time);
        if (e.center[0] < xr.min || e.center[0] > xr.max || e.center[1] < yr.min || e.center[1] > yr.max) ok = false;
        if (std::hypot(e.center[0], e.center[1]) < cfg.min_range + p.radius) ok = false;
        bool seen = false;
        for (const CameraModel& cam : rig)
          seen = seen || project_point({e.center[0], e.center[1], e.center[2]}, cam).valid;
        if (!seen) ok = false;
        for (const Placed& q : placed) {
          if (!ok) break;
          const double dx = (b.center[0] + b.velocity[0] * time) - (q.world.center[0] + q.world.velocity[0] * time);
          const double dy = (b.center[1] + b.velocity[1] * time) - (q.world.center[1] + q.world.velocity[1] * time);
          if (std::hypot(dx, dy) < p.radius + q.radius + 0.25) ok = false;
        }
      }
      if (ok) placed.push_back(p);
    }
    if (!ok)
      throw GenerationError("scene generation with seed " + std::to_string(seed) + " could not place object " +
                            std::to_string(o) + " after 500 attempts");
  }

  std::vector<SceneFrame> frames;
  for (int t = 0; t < cfg.n_frames; ++t) {
    SceneFrame f;
    f.timestamp = t;
    f.ego_pose = poses[static_cast<size_t>(t)];
    for (const Placed& p : placed) f.boxes.push_back(to_ego(p, f.ego_pose, t * cfg.dt));
    f.images = render_views(f.boxes, rig, profiles, cfg.ground_z);
    frames.push_back(std::move(f));
  }
  return frames;
}

Dataset generate_dataset(const DatasetConfig& cfg) {
  Dataset d;
  d.grid = cfg.scene.grid;
  d.ground_z = cfg.scene.ground_z;
  d.rig = make_rig(cfg.rig);
  d.profiles = default_profiles(cfg.mid_class);
  for (int k = 0; k < cfg.n_sequences; ++k) {
    const std::uint64_t seed = cfg.seed * 1000003ULL + static_cast<std::uint64_t>(k);
    d.sequences.push_back({seed, generate_sequence(seed, cfg.scene, d.profiles, d.rig)});
  }
  return d;
}

// ---------------------------------------------------------------- files

namespace {

std::string error_text(const fs::path& path, long offset, const std::string& what) {
  std::string s = path.string();
  if (offset >= 0) s += ": byte " + std::to_string(offset);
  return s + ": " + what;
}

}  // namespace

DatasetError::DatasetError(const fs::path& path, long offset, const std::string& what)
    : std::runtime_error(error_text(path, offset, what)), path_(path), offset_(offset) {}

void write_ppm(const fs::path& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DatasetError(path, -1, "cannot open for writing");
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!f) throw DatasetError(path, -1, "write failed");
}

Image read_ppm(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DatasetError(path, -1, "cannot open");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) {
    skip_space();
    const size_t start = pos;
    long v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos])) && pos - start < 9)
      v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) throw DatasetError(path, static_cast<long>(start), std::string("expected ") + what);
    return static_cast<int>(v);
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw DatasetError(path, 0, "not a binary PPM (P6)");
  pos = 2;
  Image img;
  img.width = read_int("width");
  img.height = read_int("height");
  const int maxval = read_int("maxval");
  if (img.width <= 0 || img.height <= 0) throw DatasetError(path, static_cast<long>(pos), "empty image");
  if (maxval != 255) throw DatasetError(path, static_cast<long>(pos), "maxval must be 255");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw DatasetError(path, static_cast<long>(pos), "missing separator before pixel data");
  ++pos;
  const size_t need = static_cast<size_t>(img.width) * static_cast<size_t>(img.height) * 3;
  if (bytes.size() - pos < need)
    throw DatasetError(path, static_cast<long>(bytes.size()),
                       "truncated pixel data: expected " + std::to_string(need) + " bytes, found " +
                           std::to_string(bytes.size() - pos));
  img.rgb.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + need));
  return img;
}

namespace {

json range_json(const Range& r) { return json::array({r.min, r.max}); }

Range range_of(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

nlohmann::json load_json(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DatasetError(path, -1, "cannot open");
  const std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return nlohmann::json::parse(text);
  } catch (const json::parse_error& e) {
    throw DatasetError(path, static_cast<long>(e.byte), e.what());
  }
}

std::string frame_stem(size_t s, size_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%03zu_f%03zu", s, t);
  return buf;
}

}  // namespace

json grid_to_json(const GridSpec& g) {
  return {{"h_cells", g.h_cells}, {"w_cells", g.w_cells}, {"x_range", range_json(g.x_range)},
          {"y_range", range_json(g.y_range)}, {"z_range", range_json(g.z_range)},
          {"d_bins", g.d_bins}, {"c_channels", g.c_channels}};
}

json box_to_json(const Box3D& b) {
  return {{"center", b.center}, {"size", b.size}, {"yaw", b.yaw}, {"velocity", b.velocity}, {"class_id", b.class_id}};
}

Box3D box_from_json(const nlohmann::json& jb) {
  Box3D b;
  b.center = jb.at("center").get<std::array<double, 3>>();
  b.size = jb.at("size").get<std::array<double, 3>>();
  b.yaw = jb.at("yaw").get<double>();
  b.velocity = jb.at("velocity").get<std::array<double, 2>>();
  b.class_id = jb.at("class_id").get<int>();
  return b;
}

GridSpec grid_from_json(const nlohmann::json& g) {
  GridSpec s;
  s.h_cells = g.at("h_cells").get<int>();
  s.w_cells = g.at("w_cells").get<int>();
  s.x_range = range_of(g.at("x_range"));
  s.y_range = range_of(g.at("y_range"));
  s.z_range = range_of(g.at("z_range"));
  s.d_bins = g.at("d_bins").get<int>();
  s.c_channels = g.at("c_channels").get<int>();
  return s;
}

void write_dataset(const Dataset& data, const fs::path& dir) {
  fs::create_directories(dir / "boxes");
  fs::create_directories(dir / "images");
  json meta;
  meta["format"] = "hgbev-dataset";
  meta["version"] = 1;
  meta["grid"] = grid_to_json(data.grid);
  meta["ground_z"] = data.ground_z;
  meta["rig"] = json::array();
  for (const CameraModel& c : data.rig)
    meta["rig"].push_back({{"camera_id", c.camera_id}, {"projection", c.projection}, {"image_w", c.image_w},
                           {"image_h", c.image_h}});
  meta["classes"] = json::array();
  for (const ClassProfile& p : data.profiles)
    meta["classes"].push_back({{"class_id", p.class_id}, {"name", p.name}, {"height_band", range_json(p.height_band)},
                               {"length", range_json(p.length)}, {"width", range_json(p.width)},
                               {"albedo", p.albedo}, {"max_speed", p.max_speed}});
  meta["sequences"] = json::array();
  for (size_t s = 0; s < data.sequences.size(); ++s) {
    json seq{{"seed", data.sequences[s].seed}, {"frames", json::array()}};
    for (size_t t = 0; t < data.sequences[s].frames.size(); ++t) {
      const SceneFrame& f = data.sequences[s].frames[t];
      const std::string stem = frame_stem(s, t);
      json boxes = json::array();
      for (const Box3D& b : f.boxes) boxes.push_back(box_to_json(b));
      const fs::path box_rel = fs::path("boxes") / (stem + ".json");
      std::ofstream(dir / box_rel) << json{{"boxes", boxes}}.dump(1) << "\n";
      json images = json::array();
      for (size_t c = 0; c < f.images.size(); ++c) {
        const fs::path rel = fs::path("images") / (stem + "_c" + std::to_string(c) + ".ppm");
        write_ppm(dir / rel, f.images[c]);
        images.push_back(rel.generic_string());
      }
      seq["frames"].push_back({{"timestamp", f.timestamp},
                               {"ego_pose", {f.ego_pose.x, f.ego_pose.y, f.ego_pose.heading}},
                               {"boxes", box_rel.generic_string()},
                               {"images", images}});
    }
    meta["sequences"].push_back(seq);
  }
  std::ofstream(dir / "meta.json") << meta.dump(1) << "\n";
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  const nlohmann::json meta = load_json(meta_path);
  Dataset d;
  try {
    if (meta.at("format").get<std::string>() != "hgbev-dataset")
      throw DatasetError(meta_path, -1, "unknown format tag");
    d.grid = grid_from_json(meta.at("grid"));
    d.ground_z = meta.at("ground_z").get<double>();
    for (const auto& c : meta.at("rig")) {
      CameraModel cam;
      cam.camera_id = c.at("camera_id").get<int>();
      cam.projection = c.at("projection").get<std::array<double, 12>>();
      cam.image_w = c.at("image_w").get<int>();
      cam.image_h = c.at("image_h").get<int>();
      d.rig.push_back(cam);
    }
    for (const auto& c : meta.at("classes")) {
      ClassProfile p;
      p.class_id = c.at("class_id").get<int>();
      p.name = c.at("name").get<std::string>();
      p.height_band = range_of(c.at("height_band"));
      p.length = range_of(c.at("length"));
      p.width = range_of(c.at("width"));
      p.albedo = c.at("albedo").get<std::array<std::uint8_t, 3>>();
      p.max_speed = c.at("max_speed").get<double>();
      d.profiles.push_back(p);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(meta_path, -1, e.what());
  }
  for (const auto& js : meta.at("sequences")) {
    Sequence seq;
    seq.seed = js.at("seed").get<std::uint64_t>();
    for (const auto& jf : js.at("frames")) {
      SceneFrame f;
      const fs::path box_path = dir / jf.at("boxes").get<std::string>();
      try {
        f.timestamp = jf.at("timestamp").get<int>();
        const auto pose = jf.at("ego_pose").get<std::array<double, 3>>();
        f.ego_pose = {pose[0], pose[1], pose[2]};
      } catch (const nlohmann::json::exception& e) {
        throw DatasetError(meta_path, -1, e.what());
      }
      const nlohmann::json boxes = load_json(box_path);
      try {
        for (const auto& jb : boxes.at("boxes")) f.boxes.push_back(box_from_json(jb));
      } catch (const nlohmann::json::exception& e) {
        throw DatasetError(box_path, -1, e.what());
      }
      for (const auto& ji : jf.at("images")) f.images.push_back(read_ppm(dir / ji.get<std::string>()));
      seq.frames.push_back(std::move(f));
    }
    d.sequences.push_back(std::move(seq));
  }
  return d;
}

}  // namespace hgbev
