#include "test_util.hpp"

#include <chrono>

using namespace hgbev;
using namespace testutil;

namespace {

void fill(ParamStore& store, const std::string& name, double v) { store.value(name).fill(v); }

void set_identity(ParamStore& store, const std::string& name) {
  Tensor& w = store.value(name);
  w.fill(0);
  for (int i = 0; i < w.dim(0); ++i) w[i * w.dim(1) + i] = 1;
}

void collapse_attention(ParamStore& store, const std::string& prefix) {
  for (const char* n : {".offset_w", ".offset_b", ".attn_w", ".attn_b", ".value.b", ".out.b"}) fill(store, prefix + n, 0);
  set_identity(store, prefix + ".value.w");
  set_identity(store, prefix + ".out.w");
}

void jitter(ParamStore& store, std::mt19937_64& rng, double amount = 0.1) {
  std::uniform_real_distribution<double> u(-amount, amount);
  for (auto& [name, p] : store.all())
    for (double& v : p.value.data) v += u(rng);
}

std::vector<CameraModel> ring_cams(const RigConfig& r) {
  std::vector<CameraModel> cams;
  for (int k = 0; k < 6; ++k) {
    const double yaw = k * M_PI / 3;
    cams.push_back(make_pinhole_camera(k, yaw, {0.4 * std::cos(yaw), 0.4 * std::sin(yaw), -3.5}, r.focal, r.cx, r.cy,
                                       r.image_w, r.image_h));
  }
  return cams;
}

Tensor random_images(int views, int rows, int cols, std::mt19937_64& rng) {
  return random_tensor({views, rows, cols, 3}, rng, 0, 1);
}

// Layer norm over channels with unit gamma and zero beta.
Tensor layer_norm_rows(const Tensor& x, double eps = 1e-5) {
  Tensor out = x;
  const int c = x.dim(1);
  for (int r = 0; r < x.dim(0); ++r) {
    double mu = 0, var = 0;
    for (int k = 0; k < c; ++k) mu += x[r * c + k];
    mu /= c;
    for (int k = 0; k < c; ++k) var += (x[r * c + k] - mu) * (x[r * c + k] - mu);
    var /= c;
    for (int k = 0; k < c; ++k) out[r * c + k] = (x[r * c + k] - mu) / std::sqrt(var + eps);
  }
  return out;
}

}  // namespace

TEST_CASE("deformable attention collapses to a bilinear sample") {
  DeformAttnShape s;
  s.query_dim = s.value_dim = s.channels = 3;
  s.heads = 1;
  s.points = 2;
  ParamStore store;
  std::mt19937_64 rng(1);
  init_deform_attention(store, "a", s, rng);
  collapse_attention(store, "a");
  const Tensor map = random_tensor({1, 5, 6, 3}, rng);
  auto entries = std::make_shared<std::vector<kernels::SampleEntry>>();
  const std::vector<std::pair<double, double>> refs{{1.25, 2.5}, {0, 0}, {4.9, 3.1}};
  for (int q = 0; q < 3; ++q) entries->push_back({q, q, 0, refs[q].first, refs[q].second, 1.0});
  Graph g(false);
  const Tensor& out = g.value(deformable_attention(g, store, "a", s, g.constant(random_tensor({3, 3}, rng)),
                                                   g.constant(map), entries, 3));
  const Tensor one = map.reshaped({5, 6, 3});
  for (int q = 0; q < 3; ++q) {
    const auto want = bilinear_sample(one, refs[q].first, refs[q].second);
    for (int c = 0; c < 3; ++c) CHECK(std::abs(out[q * 3 + c] - want[static_cast<size_t>(c)]) <= 1e-12);
  }
}

TEST_CASE("deformable attention over a constant map returns the projected constant") {
  DeformAttnShape s;
  s.query_dim = 4;
  s.value_dim = s.channels = 4;
  s.heads = 2;
  s.points = 3;
  ParamStore store;
  std::mt19937_64 rng(2);
  init_deform_attention(store, "a", s, rng);
  jitter(store, rng, 0.5);
  const std::vector<double> c{0.3, -1.2, 0.8, 2.0};
  Tensor map({1, 4, 4, 4});
  for (long i = 0; i < map.numel(); ++i) map[i] = c[static_cast<size_t>(i % 4)];
  auto entries = std::make_shared<std::vector<kernels::SampleEntry>>();
  std::uniform_real_distribution<double> u(-2, 6);
  for (int q = 0; q < 5; ++q) entries->push_back({q, q, 0, u(rng), u(rng), 1.0});
  Graph g(false);
  const Tensor& out = g.value(deformable_attention(g, store, "a", s, g.constant(random_tensor({5, 4}, rng)),
                                                   g.constant(map), entries, 5));
  // out = (c Wv + bv) Wo + bo
  const Tensor &Wv = store.value("a.value.w"), &bv = store.value("a.value.b"), &Wo = store.value("a.out.w"),
               &bo = store.value("a.out.b");
  std::vector<double> v(4), want(4);
  for (int j = 0; j < 4; ++j) {
    v[static_cast<size_t>(j)] = bv[j];
    for (int i = 0; i < 4; ++i) v[static_cast<size_t>(j)] += c[static_cast<size_t>(i)] * Wv[i * 4 + j];
  }
  for (int j = 0; j < 4; ++j) {
    want[static_cast<size_t>(j)] = bo[j];
    for (int i = 0; i < 4; ++i) want[static_cast<size_t>(j)] += v[static_cast<size_t>(i)] * Wo[i * 4 + j];
  }
  for (int q = 0; q < 5; ++q)
    for (int j = 0; j < 4; ++j) CHECK(std::abs(out[q * 4 + j] - want[static_cast<size_t>(j)]) <= 1e-12);

  const Tensor queries = random_tensor({5, 4}, rng);
  const Tensor values = random_tensor({1, 4, 4, 4}, rng);
  CHECK(fd_relative_error([&](Graph& gr, Var x) { return deformable_attention(gr, store, "a", s, x, gr.constant(values), entries, 5); },
                          queries) <= 1e-4);
  CHECK(fd_relative_error([&](Graph& gr, Var x) { return deformable_attention(gr, store, "a", s, gr.constant(queries), x, entries, 5); },
                          values) <= 1e-4);
}

TEST_CASE("toy backbone: stride arithmetic, linearity and gradient") {
  EncoderConfig cfg = small_encoder();
  ParamStore store;
  std::mt19937_64 rng(3);
  init_encoder(store, cfg, rng);
  for (auto [r, c] : {std::pair{36, 64}, {17, 9}, {8, 8}, {90, 160}}) {
    Graph g(false);
    const MultiViewFeatures f = toy_backbone(g, store, cfg, g.constant(random_images(2, r, c, rng)));
    CHECK(g.shape(f.maps) == Shape{2, (r + 7) / 8, (c + 7) / 8, cfg.grid.c_channels});
    CHECK(f.n_view == 2);
    CHECK(f.stride == 8.0);
  }
  {
    Graph g(false);
    const MultiViewFeatures f = toy_backbone(g, store, cfg, g.constant(Tensor({3, 16, 24, 3})));
    for (double v : g.value(f.maps).data) CHECK(v == 0.0);
  }
  Graph g(false);
  CHECK_THROWS_AS(toy_backbone(g, store, cfg, g.constant(Tensor({1, 8, 8, 4}))), std::invalid_argument);

  jitter(store, rng, 0.05);
  CHECK(fd_relative_error([&](Graph& gr, Var x) { return toy_backbone(gr, store, cfg, x).maps; },
                          random_images(1, 10, 12, rng)) <= 1e-4);
}

TEST_CASE("history alignment: identity copies, one-cell shift moves, outside is zero") {
  const GridSpec spec = small_grid(5, 5, 8, 3);
  std::mt19937_64 rng(4);
  const Tensor hist = random_tensor({25, 3}, rng);
  Graph g(false);
  CHECK(tensor_gap(g.value(align_history(g, g.constant(hist), spec, EgoMotion2D::identity())), hist) <= 1e-12);
  const double cell = 2.0;
  const Tensor& out = g.value(align_history(g, g.constant(hist), spec, EgoMotion2D::from_rotation(0, cell, 0)));
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      for (int c = 0; c < 3; ++c) {
        const Point2 p = cell_center(spec, i, j);
        const auto src = nearest_cell(spec, p.x + cell, p.y);
        const double want = src ? hist[(src->first * 5 + src->second) * 3 + c] : 0.0;
        CHECK(std::abs(out[(i * 5 + j) * 3 + c] - want) <= 1e-12);
      }
  const EgoMotion2D m = EgoMotion2D::from_rotation(0.3, 0.7, -0.4);
  CHECK(fd_relative_error([&](Graph& gr, Var x) { return align_history(gr, x, spec, m); }, hist) <= 1e-4);
}

TEST_CASE("temporal self-attention without history doubles the single-branch sample") {
  EncoderConfig cfg = small_encoder(4, 4);
  cfg.n_heads = 1;
  ParamStore store;
  std::mt19937_64 rng(5);
  init_encoder(store, cfg, rng);
  collapse_attention(store, "layer0.tsa");
  const int n = 16, c = 8;
  const Tensor q = random_tensor({n, c}, rng);
  Graph g(false);
  const Tensor& self = g.value(temporal_self_attention(g, store, cfg, 0, g.constant(q), nullptr));
  CHECK(self.shape == Shape{n, c});
  // every cell samples itself in both maps, and the two branches are summed
  for (long i = 0; i < self.numel(); ++i) CHECK(std::abs(self[i] - 2 * q[i]) <= 1e-12);
  const History h{q, EgoMotion2D::identity()};
  CHECK(tensor_gap(g.value(temporal_self_attention(g, store, cfg, 0, g.constant(q), &h)), self) <= 1e-12);

  const History zero{Tensor({n, c}), EgoMotion2D::identity()};
  CHECK(tensor_gap(g.value(temporal_self_attention(g, store, cfg, 0, g.constant(q), &zero)), q) <= 1e-12);
}

TEST_CASE("temporal self-attention gradient matches finite differences") {
  EncoderConfig cfg = small_encoder(3, 3);
  ParamStore store;
  std::mt19937_64 rng(6);
  init_encoder(store, cfg, rng);
  jitter(store, rng);
  const History h{random_tensor({9, 8}, rng), EgoMotion2D::from_rotation(0.2, 0.5, -0.3)};
  CHECK(fd_relative_error([&](Graph& g, Var x) { return temporal_self_attention(g, store, cfg, 0, x, &h); },
                          random_tensor({9, 8}, rng)) <= 1e-4);
  Graph g(false);
  CHECK_THROWS_AS(temporal_self_attention(g, store, cfg, 0, g.constant(Tensor({8, 8})), nullptr), std::invalid_argument);
}

TEST_CASE("encoder layer is shape preserving and reduces to normalization with silent branches") {
  EncoderConfig cfg = small_encoder(4, 4);
  cfg.n_layers = 1;
  ParamStore store;
  std::mt19937_64 rng(7);
  init_encoder(store, cfg, rng);
  const RigConfig rig = small_rig_config();
  const auto cams = ring_cams(rig);
  const Tensor images = random_images(6, rig.image_h, rig.image_w, rng);
  const Tensor q = random_tensor({16, 8}, rng);
  {
    Graph g(false);
    const MultiViewFeatures views = toy_backbone(g, store, cfg, g.constant(images));
    const LayerOutput out = encoder_layer(g, store, cfg, 0, g.constant(q), nullptr, views, cams);
    CHECK(g.shape(out.bev) == Shape{16, 8});
    CHECK(g.shape(out.fused) == Shape{16, 8});
  }
  for (const char* n : {"layer0.tsa.out.w", "layer0.tsa.out.b", "layer0.ffn2.w", "layer0.ffn2.b", "backbone.conv3.w",
                        "backbone.conv3.b", "layer0.dhca.sca.out.b"})
    fill(store, n, 0);
  Graph g(false);
  const MultiViewFeatures views = toy_backbone(g, store, cfg, g.constant(images));
  const LayerOutput out = encoder_layer(g, store, cfg, 0, g.constant(q), nullptr, views, cams);
  CHECK(tensor_gap(g.value(out.bev), layer_norm_rows(layer_norm_rows(layer_norm_rows(q)))) <= 1e-9);
}

TEST_CASE("encoder layer gradient on a 4x4x8 grid matches finite differences") {
  EncoderConfig cfg = small_encoder(4, 4);
  cfg.n_layers = 1;
  cfg.n_ref = 2;
  cfg.m_neighbors = 2;
  ParamStore store;
  std::mt19937_64 rng(8);
  init_encoder(store, cfg, rng);
  jitter(store, rng);
  RigConfig rig = small_rig_config();
  rig.image_w = 24;
  rig.image_h = 16;
  rig.cx = 12;
  rig.cy = 8;
  rig.focal = 12;
  const auto cams = ring_cams(rig);
  const Tensor maps = random_tensor({6, 2, 3, 8}, rng);
  const History h{random_tensor({16, 8}, rng), EgoMotion2D::from_rotation(0.1, 0.4, 0.2)};
  CHECK(fd_relative_error(
            [&](Graph& g, Var x) {
              const MultiViewFeatures views{g.constant(maps), 6, 8.0};
              return encoder_layer(g, store, cfg, 0, x, &h, views, cams).bev;
            },
            random_tensor({16, 8}, rng)) <= 1e-4);
}

TEST_CASE("one-layer frame equals a single layer call and encoding is deterministic") {
  EncoderConfig cfg = small_encoder(4, 4);
  cfg.n_layers = 1;
  ParamStore store;
  std::mt19937_64 rng(9);
  init_encoder(store, cfg, rng);
  const RigConfig rig = small_rig_config();
  const auto cams = ring_cams(rig);
  const Tensor images = random_images(6, rig.image_h, rig.image_w, rng);
  Graph g(false);
  const FrameOutput f = encode_frame(g, store, cfg, g.constant(images), nullptr, cams);
  const MultiViewFeatures views = toy_backbone(g, store, cfg, g.constant(images));
  const LayerOutput l = encoder_layer(g, store, cfg, 0, g.param(store, "bev.queries"), nullptr, views, cams);
  CHECK(g.value(f.bev).data == g.value(l.bev).data);
  REQUIRE(f.fused.size() == 1);
  CHECK(g.value(f.fused[0]).data == g.value(l.fused).data);

  EncoderConfig two = small_encoder(4, 4);
  ParamStore s1, s2;
  std::mt19937_64 r1(11), r2(11);
  init_encoder(s1, two, r1);
  init_encoder(s2, two, r2);
  Graph g1(false), g2(false);
  const FrameOutput a = encode_frame(g1, s1, two, g1.constant(images), nullptr, cams);
  const FrameOutput b = encode_frame(g2, s2, two, g2.constant(images), nullptr, cams);
  CHECK(g1.value(a.bev).data == g2.value(b.bev).data);
  CHECK(a.fused.size() == 2);
}

TEST_CASE("encode_frame is invariant to camera ordering") {
  EncoderConfig cfg = small_encoder(4, 4);
  ParamStore store;
  std::mt19937_64 rng(10);
  init_encoder(store, cfg, rng);
  jitter(store, rng);
  const RigConfig rig = small_rig_config();
  const auto cams = ring_cams(rig);
  const Tensor images = random_images(6, rig.image_h, rig.image_w, rng);
  const std::vector<int> perm{5, 3, 1, 0, 2, 4};
  std::vector<CameraModel> pc;
  Tensor pi(images.shape);
  const long per = static_cast<long>(rig.image_h) * rig.image_w * 3;
  for (size_t v = 0; v < 6; ++v) {
    pc.push_back(cams[static_cast<size_t>(perm[v])]);
    std::copy_n(images.ptr() + perm[v] * per, per, pi.ptr() + static_cast<long>(v) * per);
  }
  Graph g(false);
  const FrameOutput a = encode_frame(g, store, cfg, g.constant(images), nullptr, cams);
  const FrameOutput b = encode_frame(g, store, cfg, g.constant(pi), nullptr, pc);
  CHECK(tensor_gap(g.value(a.bev), g.value(b.bev)) <= 1e-9);
  CHECK_THROWS_AS(encode_frame(g, store, cfg, g.constant(images), nullptr, {cams[0]}), std::invalid_argument);
}

TEST_CASE("with VHA and DHCA off the sample locations are the uniform set") {
  EncoderConfig cfg = small_encoder(5, 5);
  cfg.vha = false;
  cfg.dhca = false;
  ParamStore store;
  std::mt19937_64 rng(12);
  init_encoder(store, cfg, rng);
  const RigConfig rig = small_rig_config();
  const auto cams = ring_cams(rig);
  Graph g(false);
  std::vector<LayerTrace> trace;
  const FrameOutput f = encode_frame(g, store, cfg, g.constant(random_images(6, rig.image_h, rig.image_w, rng)), nullptr,
                                     cams, &trace);
  CHECK(f.fused.empty());
  REQUIRE(trace.size() == 2);
  const double span = cfg.grid.z_range.max - cfg.grid.z_range.min;
  for (const LayerTrace& t : trace) {
    CHECK(t.neighbor_points.empty());
    CHECK(t.fields.empty());
    REQUIRE(t.reference_points.size() == 25u * 4u);
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j)
        for (int k = 0; k < 4; ++k) {
          const ReferencePoint3D& p = t.reference_points[static_cast<size_t>((i * 5 + j) * 4 + k)];
          const Point2 c = cell_center(cfg.grid, i, j);
          CHECK(p.x == c.x);
          CHECK(p.y == c.y);
          CHECK(p.z == doctest::Approx(cfg.grid.z_range.min + (k + 0.5) * span / 4).epsilon(1e-15));
        }
  }
}

TEST_CASE("run_sequence on one frame equals encode_frame without history") {
  EncoderConfig cfg = small_encoder(4, 4);
  ParamStore store;
  std::mt19937_64 rng(13);
  init_encoder(store, cfg, rng);
  const RigConfig rig = small_rig_config();
  const auto cams = ring_cams(rig);
  const Tensor a = random_images(6, rig.image_h, rig.image_w, rng), b = random_images(6, rig.image_h, rig.image_w, rng);
  const auto seq = run_sequence(store, cfg, {{&a, Pose2D{}}}, cams);
  Graph g(false);
  const FrameOutput f = encode_frame(g, store, cfg, g.constant(a), nullptr, cams);
  REQUIRE(seq.size() == 1);
  CHECK(seq[0].bev.data == g.value(f.bev).data);
  REQUIRE(seq[0].fused.size() == 2);
  for (const HeightField& h : seq[0].fused) CHECK(h.normalization_error() <= 1e-6);

  // the second frame sees the first as history
  const Pose2D p0{0, 0, 0}, p1{1.0, 0.2, 0.05};
  const auto two = run_sequence(store, cfg, {{&a, p0}, {&b, p1}}, cams);
  const History h{two[0].bev, EgoMotion2D::between(p0, p1)};
  Graph g2(false);
  const FrameOutput f2 = encode_frame(g2, store, cfg, g2.constant(b), &h, cams);
  CHECK(two[1].bev.data == g2.value(f2.bev).data);
  CHECK_THROWS_AS(run_sequence(store, cfg, {{nullptr, p0}}, cams), std::invalid_argument);
}

TEST_CASE("a 50x50 frame with six 160x90 views encodes in under 10 s") {
  EncoderConfig cfg;
  cfg.grid.h_cells = cfg.grid.w_cells = 50;
  cfg.grid.x_range = cfg.grid.y_range = {-25, 25};
  cfg.grid.c_channels = 16;
  cfg.n_layers = 3;
  ParamStore store;
  std::mt19937_64 rng(14);
  init_encoder(store, cfg, rng);
  RigConfig rig;
  const auto cams = ring_cams(rig);
  const Tensor images = random_images(6, rig.image_h, rig.image_w, rng);
  const auto t0 = std::chrono::steady_clock::now();
  Graph g(false);
  const FrameOutput f = encode_frame(g, store, cfg, g.constant(images), nullptr, cams);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(g.shape(f.bev) == Shape{2500, 16});
  MESSAGE("50x50 encode: " << seconds << " s");
  CHECK(seconds < 10.0);
}
