#pragma once

// Synthetic cuboid world: height-banded object classes, a six-camera surround
// rig, short ego-motion sequences, a ray-cast renderer and the on-disk
// dataset format (meta.json + per-frame box JSON + binary PPM images).

#include "hgbev/box.hpp"
#include "hgbev/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace hgbev {

struct Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  bool operator==(const Image&) const = default;
};

struct ClassProfile {
  int class_id = 0;
  std::string name;
  Range height_band;  // box center height
  Range length, width;
  std::array<std::uint8_t, 3> albedo{128, 128, 128};
  double max_speed = 0;  // m/s along the box heading

  bool operator==(const ClassProfile&) const = default;
};

/// Cone-like (center in (-4.7, -4.3)) and truck-like (center in (-3.5, -2.0))
/// classes standing on the ground at z = -5; `with_mid` adds a car-like band.
std::vector<ClassProfile> default_profiles(bool with_mid = false);

struct RigConfig {
  int n_cameras = 6;
  double focal = 100;
  double cx = 80, cy = 45;
  int image_w = 160, image_h = 90;
  double mount_z = -3.5;
  double mount_forward = 0.5;  // camera offset from the ego origin along its yaw
};

/// Cameras at yaw 0, 60, ..., 300 degrees.
std::vector<CameraModel> make_rig(const RigConfig& cfg = {});

struct SceneFrame {
  int timestamp = 0;
  Pose2D ego_pose;
  std::vector<Image> images;
  std::vector<Box3D> boxes;  // ego frame
};

struct SceneConfig {
  GridSpec grid;
  int n_frames = 3;
  int n_objects = 6;
  double dt = 0.5;
  double ground_z = -5.0;
  double max_ego_speed = 3.0;
  double max_yaw_rate = 0.1;
  double min_range = 3.0;  // clearance around the ego origin
  double margin = 1.0;     // box centers stay this far inside the BEV range
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Deterministic in `seed`; frames carry rendered images.
std::vector<SceneFrame> generate_sequence(std::uint64_t seed, const SceneConfig& cfg,
                                          const std::vector<ClassProfile>& profiles,
                                          const std::vector<CameraModel>& rig);

/// Ray-cast render of the frame's boxes into every camera.
std::vector<Image> render_views(const std::vector<Box3D>& boxes, const std::vector<CameraModel>& rig,
                                const std::vector<ClassProfile>& profiles, double ground_z = -5.0);

/// (n_view, rows, cols, 3) tensor with values in [0, 1].
Tensor images_to_tensor(const std::vector<Image>& images);

// ---------------------------------------------------------------- files

class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::filesystem::path& path, long offset, const std::string& what);
  const std::filesystem::path& path() const { return path_; }
  long offset() const { return offset_; }

 private:
  std::filesystem::path path_;
  long offset_;
};

void write_ppm(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path);

struct Sequence {
  std::uint64_t seed = 0;
  std::vector<SceneFrame> frames;
};

struct Dataset {
  GridSpec grid;
  double ground_z = -5.0;
  std::vector<CameraModel> rig;
  std::vector<ClassProfile> profiles;
  std::vector<Sequence> sequences;
};

void write_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

struct DatasetConfig {
  SceneConfig scene;
  RigConfig rig;
  int n_sequences = 8;
  std::uint64_t seed = 0;
  bool mid_class = false;
};

/// Sequence k uses seed `cfg.seed * 1000003 + k`.
Dataset generate_dataset(const DatasetConfig& cfg);

}  // namespace hgbev
