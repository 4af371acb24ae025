#include "test_util.hpp"

#include <fstream>

using namespace hgbev;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

SceneConfig scene_config(int objects = 6, int frames = 3) {
  SceneConfig s;
  s.grid = small_grid(20, 20, 8, 8);
  s.n_objects = objects;
  s.n_frames = frames;
  return s;
}

long painted_pixels(const Image& img, const Image& background) {
  long n = 0;
  for (size_t p = 0; p < img.rgb.size(); p += 3)
    n += img.rgb[p] != background.rgb[p] || img.rgb[p + 1] != background.rgb[p + 1] || img.rgb[p + 2] != background.rgb[p + 2];
  return n;
}

Box3D truck_at(double x, double y) {
  Box3D b;
  b.center = {x, y, -3.0};
  b.size = {3.0, 2.0, 4.0};
  b.class_id = 1;
  return b;
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_CASE("empty scenes render the background only") {
  const auto rig = make_rig();
  const auto profiles = default_profiles();
  const auto frames = generate_sequence(11, scene_config(0, 2), profiles, rig);
  REQUIRE(frames.size() == 2);
  const auto background = render_views({}, rig, profiles);
  for (const SceneFrame& f : frames) {
    CHECK(f.boxes.empty());
    REQUIRE(f.images.size() == 6);
    for (size_t c = 0; c < 6; ++c) CHECK(f.images[c] == background[c]);
  }
  CHECK(render_views({}, rig, profiles) == background);
  CHECK_THROWS_AS(render_views({}, {}, profiles), std::invalid_argument);
}

TEST_CASE("generation is deterministic in the seed") {
  const auto rig = make_rig();
  const auto profiles = default_profiles(true);
  const auto a = generate_sequence(5, scene_config(), profiles, rig);
  const auto b = generate_sequence(5, scene_config(), profiles, rig);
  const auto c = generate_sequence(6, scene_config(), profiles, rig);
  REQUIRE(a.size() == b.size());
  for (size_t t = 0; t < a.size(); ++t) {
    CHECK(a[t].boxes == b[t].boxes);
    CHECK(a[t].images == b[t].images);
    CHECK(a[t].ego_pose.x == b[t].ego_pose.x);
  }
  CHECK_FALSE(a[0].boxes == c[0].boxes);
}

TEST_CASE("generated boxes respect class bands, ranges and rig coverage") {
  const auto rig = make_rig();
  const auto profiles = default_profiles();
  REQUIRE(profiles.size() == 2);
  CHECK(profiles[0].height_band == Range{-4.7, -4.3});
  CHECK(profiles[1].height_band == Range{-3.5, -2.0});
  int counted[2] = {0, 0};
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    const SceneConfig cfg = scene_config(6, 3);
    for (const SceneFrame& f : generate_sequence(seed, cfg, profiles, rig))
      for (const Box3D& b : f.boxes) {
        const Range band = profiles[static_cast<size_t>(b.class_id)].height_band;
        CHECK(b.center[2] > band.min);
        CHECK(b.center[2] < band.max);
        ++counted[b.class_id];
        CHECK(b.center[0] > cfg.grid.x_range.min);
        CHECK(b.center[0] < cfg.grid.x_range.max);
        CHECK(b.center[1] > cfg.grid.y_range.min);
        CHECK(b.center[1] < cfg.grid.y_range.max);
        bool seen = false;
        for (const CameraModel& cam : rig) seen = seen || project_point({b.center[0], b.center[1], b.center[2]}, cam).valid;
        CHECK(seen);
      }
  }
  CHECK(counted[0] > 0);
  CHECK(counted[1] > 0);
}

TEST_CASE("objects in one frame do not overlap") {
  const auto rig = make_rig();
  for (std::uint64_t seed = 0; seed < 10; ++seed)
    for (const SceneFrame& f : generate_sequence(seed, scene_config(8, 3), default_profiles(), rig))
      for (size_t a = 0; a < f.boxes.size(); ++a)
        for (size_t b = a + 1; b < f.boxes.size(); ++b) {
          // center of one footprint never lies in the other
          CHECK_FALSE(footprint_contains(f.boxes[a], f.boxes[b].center[0], f.boxes[b].center[1]));
          CHECK_FALSE(footprint_contains(f.boxes[b], f.boxes[a].center[0], f.boxes[a].center[1]));
        }
}

TEST_CASE("ego motion composes along a sequence") {
  const auto rig = make_rig();
  SceneConfig cfg = scene_config(2, 6);
  const auto frames = generate_sequence(3, cfg, default_profiles(), rig);
  EgoMotion2D chain = EgoMotion2D::identity();
  for (size_t t = frames.size() - 1; t > 0; --t)
    chain = chain.then(EgoMotion2D::between(frames[t - 1].ego_pose, frames[t].ego_pose));
  const EgoMotion2D net = EgoMotion2D::between(frames.front().ego_pose, frames.back().ego_pose);
  for (const Point2 p : {Point2{0, 0}, Point2{3, -4}, Point2{-10, 7.5}}) {
    const Point2 a = warp_point(p, chain), b = warp_point(p, net);
    CHECK(std::abs(a.x - b.x) <= 1e-9);
    CHECK(std::abs(a.y - b.y) <= 1e-9);
  }
}

TEST_CASE("render: behind-camera objects are absent, straddling objects appear in both views") {
  const auto rig = make_rig();
  const auto profiles = default_profiles();
  const auto background = render_views({}, rig, profiles);
  const auto ahead = render_views({truck_at(8, 0)}, rig, profiles);
  CHECK(painted_pixels(ahead[0], background[0]) > 0);
  CHECK(painted_pixels(ahead[3], background[3]) == 0);
  // yaw 30 degrees sits on the seam between cameras 0 and 1
  const auto seam = render_views({truck_at(8 * std::cos(M_PI / 6), 8 * std::sin(M_PI / 6))}, rig, profiles);
  CHECK(painted_pixels(seam[0], background[0]) > 0);
  CHECK(painted_pixels(seam[1], background[1]) > 0);
}

TEST_CASE("images convert to a unit-range tensor") {
  const auto rig = make_rig();
  const auto imgs = render_views({truck_at(6, 1)}, rig, default_profiles());
  const Tensor t = images_to_tensor(imgs);
  CHECK(t.shape == Shape{6, 90, 160, 3});
  for (double v : t.data) {
    CHECK(v >= 0);
    CHECK(v <= 1);
  }
  CHECK(t[0] == imgs[0].rgb[0] / 255.0);
}

TEST_CASE("dataset round trip is exact") {
  TempDir dir("hgbev_ds");
  DatasetConfig cfg;
  cfg.scene = scene_config(4, 2);
  cfg.n_sequences = 2;
  cfg.seed = 9;
  cfg.rig = small_rig_config();
  const Dataset d = generate_dataset(cfg);
  CHECK(d.sequences[1].seed == 9 * 1000003ULL + 1);
  write_dataset(d, dir.path);
  const Dataset r = read_dataset(dir.path);
  CHECK(r.grid == d.grid);
  CHECK(r.ground_z == d.ground_z);
  CHECK(r.profiles == d.profiles);
  REQUIRE(r.rig.size() == d.rig.size());
  for (size_t c = 0; c < r.rig.size(); ++c) {
    CHECK(r.rig[c].projection == d.rig[c].projection);
    CHECK(r.rig[c].image_w == d.rig[c].image_w);
  }
  REQUIRE(r.sequences.size() == 2);
  for (size_t s = 0; s < 2; ++s) {
    CHECK(r.sequences[s].seed == d.sequences[s].seed);
    REQUIRE(r.sequences[s].frames.size() == d.sequences[s].frames.size());
    for (size_t t = 0; t < d.sequences[s].frames.size(); ++t) {
      const SceneFrame &a = d.sequences[s].frames[t], &b = r.sequences[s].frames[t];
      CHECK(a.boxes == b.boxes);
      CHECK(a.images == b.images);
      CHECK(a.timestamp == b.timestamp);
      CHECK(a.ego_pose.x == b.ego_pose.x);
      CHECK(a.ego_pose.y == b.ego_pose.y);
      CHECK(a.ego_pose.heading == b.ego_pose.heading);
    }
  }
}

TEST_CASE("ppm round trip and errors name the file and byte offset") {
  TempDir dir("hgbev_ppm");
  Image img;
  img.width = 3;
  img.height = 2;
  img.rgb = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 250, 251, 252, 253, 254, 255};
  const fs::path p = dir.path / "a.ppm";
  write_ppm(p, img);
  CHECK(read_ppm(p) == img);
  const auto bytes = read_bytes(p);
  CHECK(std::string(bytes.begin(), bytes.begin() + 2) == "P6");

  const fs::path cut = dir.path / "cut.ppm";
  std::ofstream(cut, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 4));
  try {
    read_ppm(cut);
    FAIL("truncated image accepted");
  } catch (const DatasetError& e) {
    CHECK(e.path() == cut);
    CHECK(e.offset() == static_cast<long>(bytes.size() - 4));
    CHECK(std::string(e.what()).find("cut.ppm") != std::string::npos);
  }
  const fs::path bad = dir.path / "bad.ppm";
  std::ofstream(bad, std::ios::binary) << "P3\n1 1\n255\n";
  CHECK_THROWS_AS(read_ppm(bad), DatasetError);
  CHECK_THROWS_AS(read_ppm(dir.path / "missing.ppm"), DatasetError);
}

TEST_CASE("dataset reader reports truncated images and malformed metadata") {
  TempDir dir("hgbev_ds_bad");
  DatasetConfig cfg;
  cfg.scene = scene_config(2, 1);
  cfg.n_sequences = 1;
  cfg.rig = small_rig_config();
  write_dataset(generate_dataset(cfg), dir.path);
  const fs::path img = dir.path / "images";
  const fs::path first = *fs::directory_iterator(img);
  fs::resize_file(first, fs::file_size(first) / 2);
  try {
    read_dataset(dir.path);
    FAIL("truncated dataset accepted");
  } catch (const DatasetError& e) {
    CHECK(e.path() == first);
  }
  std::ofstream(dir.path / "meta.json") << "{\"format\": \"hgbev-dataset\", \"grid\": [1, 2,";
  try {
    read_dataset(dir.path);
    FAIL("malformed metadata accepted");
  } catch (const DatasetError& e) {
    CHECK(e.path().filename() == "meta.json");
    CHECK(e.offset() > 0);
  }
}

TEST_CASE("infeasible placement raises a generation error naming the seed") {
  SceneConfig cfg = scene_config(300, 1);
  try {
    generate_sequence(4242, cfg, default_profiles(), make_rig());
    FAIL("placement succeeded");
  } catch (const GenerationError& e) {
    CHECK(std::string(e.what()).find("4242") != std::string::npos);
  }
  CHECK_THROWS_AS(generate_sequence(1, scene_config(1, 0), default_profiles(), make_rig()), std::invalid_argument);
}
