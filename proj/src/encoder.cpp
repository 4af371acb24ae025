#include "hgbev/encoder.hpp"

#include <stdexcept>

namespace hgbev {

void EncoderConfig::validate() const {
  grid.validate();
  if (n_layers < 1 || n_ref < 1 || m_neighbors < 1 || n_heads < 1 || n_def_points < 1 || history_len < 1 ||
      ffn_hidden < 1 || height_hidden < 1 || backbone_hidden < 1)
    throw std::invalid_argument("EncoderConfig: all counts must be positive");
  if (n_ref > grid.d_bins) throw std::invalid_argument("EncoderConfig: n_ref exceeds d_bins");
  if (grid.c_channels % n_heads != 0)
    throw std::invalid_argument("EncoderConfig: c_channels must be divisible by n_heads");
  if (uniform_nref < 0) throw std::invalid_argument("EncoderConfig: uniform_nref must be >= 0");
  if (uniform_nref > 0 && vha) throw std::invalid_argument("EncoderConfig: uniform_nref requires vha off");
  if (!(image_stride > 0)) throw std::invalid_argument("EncoderConfig: image_stride must be positive");
}

DhcaShape EncoderConfig::dhca_shape() const {
  DhcaShape s;
  s.channels = grid.c_channels;
  s.n_ref = refs_per_cell();
  s.neighbors = neighbors();
  s.heads = n_heads;
  s.points = n_def_points;
  s.neighbor_radius = neighbor_radius;
  return s;
}

DcaShape EncoderConfig::dca_shape() const {
  return {grid.d_bins, n_def_points, height_hidden};
}

namespace {

std::string layer_prefix(int l) { return "layer" + std::to_string(l); }

DeformAttnShape tsa_shape(const EncoderConfig& cfg) {
  DeformAttnShape a;
  a.query_dim = cfg.grid.c_channels;
  a.value_dim = cfg.grid.c_channels;
  a.channels = cfg.grid.c_channels;
  a.heads = cfg.n_heads;
  a.points = cfg.n_def_points;
  a.groups = 2;
  return a;
}

void init_norm(ParamStore& store, const std::string& prefix, int c) {
  store.add(prefix + ".gamma", init::constant({c}, 1.0));
  store.add(prefix + ".beta", init::zeros({c}));
}

Var norm(Graph& g, ParamStore& store, const std::string& prefix, Var x) {
  return ops::layer_norm(g, x, g.param(store, prefix + ".gamma"), g.param(store, prefix + ".beta"));
}

HeightField field_of(Graph& g, Var rows, const GridSpec& spec, HeightKind kind) {
  return HeightField::from_rows(g.value(rows), spec.h_cells, spec.w_cells, kind);
}

}  // namespace

void init_encoder(ParamStore& store, const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const int c = cfg.grid.c_channels;
  const int hid = cfg.backbone_hidden;
  store.add("backbone.conv1.w", init::xavier({3, 3, 3, hid}, rng));
  store.add("backbone.conv1.b", init::zeros({hid}));
  store.add("backbone.conv2.w", init::xavier({3, 3, hid, 2 * hid}, rng));
  store.add("backbone.conv2.b", init::zeros({2 * hid}));
  store.add("backbone.conv3.w", init::xavier({3, 3, 2 * hid, c}, rng));
  store.add("backbone.conv3.b", init::zeros({c}));
  store.add("bev.queries", init::uniform({cfg.grid.n_cells(), c}, 1.0, rng));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    init_deform_attention(store, p + ".tsa", tsa_shape(cfg), rng);
    init_norm(store, p + ".norm1", c);
    if (cfg.vha) {
      init_height_head(store, p + ".height", c, cfg.height_hidden, cfg.grid.d_bins, rng);
      init_dca(store, p + ".dca", cfg.dca_shape(), rng);
    }
    init_dhca(store, p + ".dhca", cfg.dhca_shape(), rng);
    init_norm(store, p + ".norm2", c);
    init_linear(store, p + ".ffn1", c, cfg.ffn_hidden, rng);
    init_linear(store, p + ".ffn2", cfg.ffn_hidden, c, rng);
    init_norm(store, p + ".norm3", c);
  }
}

MultiViewFeatures toy_backbone(Graph& g, ParamStore& store, const EncoderConfig& cfg, Var images) {
  const Shape& s = g.shape(images);
  if (s.size() != 4 || s[3] != 3)
    throw std::invalid_argument("toy_backbone: images must be (n_view, rows, cols, 3), got " + shape_str(s));
  auto conv = [&](Var x, const std::string& name) {
    return ops::conv2d(g, x, g.param(store, name + ".w"), g.param(store, name + ".b"), 2, 1);
  };
  Var x = ops::relu(g, conv(images, "backbone.conv1"));
  x = ops::relu(g, conv(x, "backbone.conv2"));
  x = conv(x, "backbone.conv3");
  if (g.shape(x)[3] != cfg.grid.c_channels)
    throw std::invalid_argument("toy_backbone: output channels do not match c_channels");
  return {x, s[0], cfg.image_stride};
}

Var align_history(Graph& g, Var history, const GridSpec& spec, const EgoMotion2D& motion) {
  const Shape& s = g.shape(history);
  if (s.size() != 2 || s[0] != spec.n_cells())
    throw std::invalid_argument("align_history: history " + shape_str(s) + " does not match the grid");
  WarpPlan plan = make_warp_plan(spec, motion);
  Var map = ops::reshape(g, history, {spec.h_cells, spec.w_cells, s[1]});
  return ops::grid_sample(g, map, std::move(plan.uv), std::move(plan.valid), 0.0);
}

Var temporal_self_attention(Graph& g, ParamStore& store, const EncoderConfig& cfg, int layer, Var queries,
                            const History* history) {
  const GridSpec& spec = cfg.grid;
  const int n = spec.n_cells(), c = spec.c_channels;
  if (g.shape(queries) != Shape{n, c})
    throw std::invalid_argument("temporal_self_attention: queries must be (" + std::to_string(n) + ", " +
                                std::to_string(c) + ")");
  Var aligned = queries;
  if (history) {
    if (history->bev.shape != Shape{n, c})
      throw std::invalid_argument("temporal_self_attention: history shape mismatch");
    aligned = align_history(g, g.constant(history->bev), spec, history->motion);
  }
  const Shape map{1, spec.h_cells, spec.w_cells, c};
  Var values = ops::concat_rows(g, {ops::reshape(g, queries, map), ops::reshape(g, aligned, map)});
  auto entries = std::make_shared<std::vector<kernels::SampleEntry>>();
  entries->reserve(static_cast<size_t>(2 * n));
  for (int i = 0; i < spec.h_cells; ++i)
    for (int j = 0; j < spec.w_cells; ++j) {
      const int r = i * spec.w_cells + j;
      for (int m = 0; m < 2; ++m)
        entries->push_back({r, 2 * r + m, m, static_cast<double>(j), static_cast<double>(i), 1.0});
    }
  return deformable_attention(g, store, layer_prefix(layer) + ".tsa", tsa_shape(cfg), queries, values,
                              entries, n);
}

std::vector<ReferencePoint3D> reference_points(const GridSpec& spec, const std::vector<double>& heights,
                                               int refs) {
  if (static_cast<int>(heights.size()) != spec.n_cells() * refs)
    throw std::invalid_argument("reference_points: height count mismatch");
  std::vector<ReferencePoint3D> out;
  out.reserve(heights.size());
  for (int i = 0; i < spec.h_cells; ++i)
    for (int j = 0; j < spec.w_cells; ++j) {
      const Point2 p = cell_center(spec, i, j);
      const size_t base = static_cast<size_t>(i * spec.w_cells + j) * static_cast<size_t>(refs);
      for (int r = 0; r < refs; ++r) out.push_back({p.x, p.y, heights[base + static_cast<size_t>(r)]});
    }
  return out;
}

LayerOutput encoder_layer(Graph& g, ParamStore& store, const EncoderConfig& cfg, int layer, Var queries,
                          const History* history, const MultiViewFeatures& views,
                          const std::vector<CameraModel>& cams, LayerTrace* trace) {
  const GridSpec& spec = cfg.grid;
  const std::string p = layer_prefix(layer);
  const int n = spec.n_cells();
  const int refs = cfg.refs_per_cell();

  Var tsa = temporal_self_attention(g, store, cfg, layer, queries, history);
  Var q1 = norm(g, store, p + ".norm1", ops::add(g, queries, tsa));

  LayerOutput out;
  std::vector<double> heights(static_cast<size_t>(n) * static_cast<size_t>(refs));
  if (cfg.vha) {
    Var cur = predict_height(g, store, p + ".height", q1);
    Var hist_raw = cur;
    Var warped = cur;
    if (history) {
      hist_raw = predict_height(g, store, p + ".height", g.constant(history->bev));
      warped = warp_height(g, hist_raw, spec, history->motion);
    }
    out.fused = dca_fuse(g, store, p + ".dca", cfg.dca_shape(), spec, cur, warped);
    const Tensor& f = g.value(out.fused);
    for (int r = 0; r < n; ++r) {
      const std::vector<int> bins = topk_bins(f.ptr() + static_cast<long>(r) * spec.d_bins, spec.d_bins, refs);
      for (int k = 0; k < refs; ++k)
        heights[static_cast<size_t>(r * refs + k)] = bin_center(spec, bins[static_cast<size_t>(k)] + 1);
    }
    if (trace) {
      trace->fields.push_back(field_of(g, cur, spec, HeightKind::current));
      trace->fields.push_back(field_of(g, hist_raw, spec, HeightKind::historical));
      trace->fields.push_back(field_of(g, warped, spec, HeightKind::warped_historical));
      trace->fields.push_back(field_of(g, out.fused, spec, HeightKind::fused));
    }
  } else {
    const std::vector<double> z = uniform_heights(spec, refs);
    for (int r = 0; r < n; ++r)
      for (int k = 0; k < refs; ++k) heights[static_cast<size_t>(r * refs + k)] = z[static_cast<size_t>(k)];
  }

  const std::vector<ReferencePoint3D> points = reference_points(spec, heights, refs);
  DhcaTrace dtrace;
  Var cross = dhca_query(g, store, p + ".dhca", cfg.dhca_shape(), q1, views, cams, points,
                         trace ? &dtrace : nullptr);
  if (trace) {
    trace->reference_points = points;
    trace->neighbor_points = std::move(dtrace.neighbor_points);
  }
  Var q2 = norm(g, store, p + ".norm2", ops::add(g, q1, cross));
  Var ffn = apply_linear(g, store, p + ".ffn2", ops::relu(g, apply_linear(g, store, p + ".ffn1", q2)));
  out.bev = norm(g, store, p + ".norm3", ops::add(g, q2, ffn));
  return out;
}

FrameOutput encode_frame(Graph& g, ParamStore& store, const EncoderConfig& cfg, Var images,
                         const History* history, const std::vector<CameraModel>& cams,
                         std::vector<LayerTrace>* trace) {
  if (static_cast<int>(cams.size()) != g.shape(images)[0])
    throw std::invalid_argument("encode_frame: image count does not match the camera rig");
  MultiViewFeatures views = toy_backbone(g, store, cfg, images);
  FrameOutput out;
  Var q = g.param(store, "bev.queries");
  if (trace) trace->assign(static_cast<size_t>(cfg.n_layers), {});
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerOutput lo = encoder_layer(g, store, cfg, l, q, history, views, cams,
                                   trace ? &(*trace)[static_cast<size_t>(l)] : nullptr);
    q = lo.bev;
    if (lo.fused.valid()) out.fused.push_back(lo.fused);
  }
  out.bev = q;
  return out;
}

std::vector<EncodedFrame> run_sequence(ParamStore& store, const EncoderConfig& cfg,
                                       const std::vector<SequenceFrame>& frames,
                                       const std::vector<CameraModel>& cams) {
  std::vector<EncodedFrame> out;
  std::optional<History> history;
  for (size_t t = 0; t < frames.size(); ++t) {
    if (!frames[t].images) throw std::invalid_argument("run_sequence: frame without images");
    Graph g(false);
    FrameOutput fo = encode_frame(g, store, cfg, g.constant(*frames[t].images), history ? &*history : nullptr, cams);
    EncodedFrame ef;
    ef.bev = g.value(fo.bev);
    for (Var f : fo.fused) ef.fused.push_back(field_of(g, f, cfg.grid, HeightKind::fused));
    if (t + 1 < frames.size())
      history = History{ef.bev, EgoMotion2D::between(frames[t].ego_pose, frames[t + 1].ego_pose)};
    out.push_back(std::move(ef));
  }
  return out;
}

}  // namespace hgbev
