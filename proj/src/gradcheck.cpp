#include "hgbev/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hgbev {

namespace {

constexpr double kEps = 1e-6;
constexpr int kMaxPerTensor = 16;

using Build = std::function<Var(Graph&, ParamStore&, const std::vector<Var>&)>;

struct Instance {
  ParamStore store;
  std::vector<Tensor> leaves;
  Build build;
};

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data) v = u(rng);
  return t;
}

// Rows of positive entries summing to one.
Tensor random_distribution(int rows, int d, std::mt19937_64& rng) {
  Tensor t = random_tensor({rows, d}, rng, 0.2, 1.0);
  for (int r = 0; r < rows; ++r) {
    double s = 0;
    for (int m = 0; m < d; ++m) s += t[r * d + m];
    for (int m = 0; m < d; ++m) t[r * d + m] /= s;
  }
  return t;
}

// Scalar probe sum(out * projection); the projection is drawn on first use.
struct Probe {
  Tensor projection;
};

Var scalar_loss(Instance& inst, Probe& probe, Graph& g, std::vector<Var>& leaves, std::mt19937_64& rng) {
  leaves.clear();
  for (const Tensor& t : inst.leaves) leaves.push_back(g.tracking() ? g.leaf(t) : g.constant(t));
  Var out = inst.build(g, inst.store, leaves);
  if (probe.projection.empty())
    probe.projection = g.value(out).numel() > 1 ? random_tensor(g.shape(out), rng) : Tensor(g.shape(out), 1.0);
  return ops::dot(g, out, probe.projection);
}

std::vector<std::int64_t> pick(std::int64_t n, std::mt19937_64& rng) {
  std::vector<std::int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  if (n > kMaxPerTensor) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(kMaxPerTensor);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

struct Accum {
  double max_abs_diff = 0;
  double max_mag = 0;
  int n = 0;
};

void compare(Accum& acc, double analytic, double numeric) {
  acc.max_abs_diff = std::max(acc.max_abs_diff, std::abs(analytic - numeric));
  acc.max_mag = std::max({acc.max_mag, std::abs(analytic), std::abs(numeric)});
  ++acc.n;
}

double relative(const Accum& a) { return a.max_mag > 0 ? a.max_abs_diff / a.max_mag : a.max_abs_diff; }

GradcheckRow check(const std::string& name, Instance inst, std::mt19937_64& rng, const GradcheckOptions& opts) {
  Probe probe;
  inst.store.zero_grad();
  std::vector<Tensor> leaf_grads;
  {
    Graph g;
    std::vector<Var> lv;
    g.backward(scalar_loss(inst, probe, g, lv, rng));
    g.accumulate_param_grads(inst.store);
    for (Var v : lv) leaf_grads.push_back(g.has_grad(v) ? g.grad(v) : Tensor(g.shape(v)));
  }
  const double corrupt = name == opts.corrupt_op ? 1.01 : 1.0;

  auto numeric = [&](double* slot) {
    const double keep = *slot;
    std::vector<Var> tmp;
    *slot = keep + kEps;
    Graph gp(false);
    const double lp = gp.value(scalar_loss(inst, probe, gp, tmp, rng))[0];
    *slot = keep - kEps;
    Graph gm(false);
    const double lm = gm.value(scalar_loss(inst, probe, gm, tmp, rng))[0];
    *slot = keep;
    return (lp - lm) / (2 * kEps);
  };

  // Norm-wise over every checked entry of the op.
  Accum acc;
  for (size_t li = 0; li < inst.leaves.size(); ++li)
    for (std::int64_t i : pick(inst.leaves[li].numel(), rng))
      compare(acc, corrupt * leaf_grads[li][i], numeric(&inst.leaves[li][i]));
  for (auto& [pname, p] : inst.store.all()) {
    const Tensor grad = p.grad.empty() ? Tensor(p.value.shape) : p.grad;
    for (std::int64_t i : pick(p.value.numel(), rng)) compare(acc, corrupt * grad[i], numeric(&p.value[i]));
  }
  GradcheckRow row;
  row.op = name;
  row.max_rel_error = relative(acc);
  row.n_checked = acc.n;
  row.pass = std::isfinite(row.max_rel_error) && row.max_rel_error <= opts.tolerance;
  return row;
}

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.grid.h_cells = 4;
  c.grid.w_cells = 4;
  c.grid.x_range = {-4, 4};
  c.grid.y_range = {-4, 4};
  c.grid.z_range = {-5, 3};
  c.grid.d_bins = 4;
  c.grid.c_channels = 8;
  c.n_layers = 1;
  c.n_ref = 2;
  c.m_neighbors = 2;
  c.n_heads = 2;
  c.n_def_points = 2;
  c.history_len = 2;
  c.ffn_hidden = 8;
  c.height_hidden = 6;
  c.backbone_hidden = 4;
  return c;
}

std::vector<CameraModel> small_rig() {
  RigConfig r;
  r.n_cameras = 6;
  r.focal = 20;
  r.cx = 24;
  r.cy = 12;
  r.image_w = 48;
  r.image_h = 24;
  return make_rig(r);
}

// Feature maps matching small_rig() at stride 8.
Tensor random_views(int channels, std::mt19937_64& rng) { return random_tensor({6, 3, 6, channels}, rng); }

EgoMotion2D small_motion() { return EgoMotion2D::from_rotation(0.07, 0.4, -0.3); }

// Perturbs parameters away from their structured initial values so that
// zero-initialized layers still exercise every gradient path.
void jitter(ParamStore& store, std::mt19937_64& rng, double amount = 0.1) {
  std::uniform_real_distribution<double> u(-amount, amount);
  for (auto& [name, p] : store.all())
    for (double& v : p.value.data) v += u(rng);
}

using Maker = std::function<Instance(std::mt19937_64&)>;

std::vector<std::pair<std::string, Maker>> makers() {
  std::vector<std::pair<std::string, Maker>> m;
  m.emplace_back("predict_height_field", [](std::mt19937_64& rng) {
    Instance in;
    init_height_head(in.store, "h", 8, 6, 4, rng);
    jitter(in.store, rng);
    in.leaves = {random_tensor({16, 8}, rng)};
    in.build = [](Graph& g, ParamStore& s, const std::vector<Var>& x) { return predict_height(g, s, "h", x[0]); };
    return in;
  });
  m.emplace_back("warp_height_field", [](std::mt19937_64& rng) {
    Instance in;
    const GridSpec spec = small_encoder().grid;
    in.leaves = {random_distribution(16, 4, rng)};
    in.build = [spec](Graph& g, ParamStore&, const std::vector<Var>& x) {
      return warp_height(g, x[0], spec, small_motion());
    };
    return in;
  });
  m.emplace_back("dca_fuse", [](std::mt19937_64& rng) {
    Instance in;
    const EncoderConfig cfg = small_encoder();
    const DcaShape shape = cfg.dca_shape();
    init_dca(in.store, "dca", shape, rng);
    jitter(in.store, rng);
    in.leaves = {random_distribution(16, 4, rng), random_distribution(16, 4, rng)};
    in.build = [cfg, shape](Graph& g, ParamStore& s, const std::vector<Var>& x) {
      return dca_fuse(g, s, "dca", shape, cfg.grid, x[0], x[1]);
    };
    return in;
  });
  m.emplace_back("neighbor_offsets", [](std::mt19937_64& rng) {
    Instance in;
    const DhcaShape shape = small_encoder().dhca_shape();
    init_dhca(in.store, "x", shape, rng);
    jitter(in.store, rng);
    in.leaves = {random_tensor({5, 8}, rng)};
    in.build = [shape](Graph& g, ParamStore& s, const std::vector<Var>& x) {
      return neighbor_offsets(g, s, "x", shape, x[0]);
    };
    return in;
  });
  m.emplace_back("edge_weights", [](std::mt19937_64& rng) {
    Instance in;
    const DhcaShape shape = small_encoder().dhca_shape();
    init_dhca(in.store, "x", shape, rng);
    jitter(in.store, rng);
    in.leaves = {random_tensor({5, 8}, rng)};
    in.build = [shape](Graph& g, ParamStore& s, const std::vector<Var>& x) {
      return edge_weights(g, s, "x", shape, x[0]);
    };
    return in;
  });
  m.emplace_back("deformable_attention", [](std::mt19937_64& rng) {
    Instance in;
    DeformAttnShape shape;
    shape.query_dim = 6;
    shape.value_dim = 5;
    shape.channels = 4;
    shape.heads = 2;
    shape.points = 2;
    shape.groups = 2;
    init_deform_attention(in.store, "da", shape, rng);
    jitter(in.store, rng);
    in.leaves = {random_tensor({3, 6}, rng), random_tensor({2, 4, 5, 5}, rng)};
    auto entries = std::make_shared<std::vector<kernels::SampleEntry>>();
    std::uniform_real_distribution<double> uu(0.3, 3.6), vv(0.3, 2.6);
    for (int q = 0; q < 3; ++q)
      for (int gi = 0; gi < 2; ++gi) entries->push_back({q, q * 2 + gi, gi, uu(rng), vv(rng), 0.5 + 0.25 * gi});
    in.build = [shape, entries](Graph& g, ParamStore& s, const std::vector<Var>& x) {
      return deformable_attention(g, s, "da", shape, x[0], x[1], entries, 3);
    };
    return in;
  });
  m.emplace_back("temporal_self_attention", [](std::mt19937_64& rng) {
    Instance in;
    const EncoderConfig cfg = small_encoder();
    init_encoder(in.store, cfg, rng);
    jitter(in.store, rng);
    in.leaves = {random_tensor({16, 8}, rng)};
    auto history = std::make_shared<History>(History{random_tensor({16, 8}, rng), small_motion()});
    in.build = [cfg, history](Graph& g, ParamStore& s, const std::vector<Var>& x) {
      return temporal_self_attention(g, s, cfg, 0, x[0], history.get());
    };
    return in;
  });
  m.emplace_back("aggregate_reference", [](std::mt19937_64& rng) {
    Instance in;
    in.leaves = {random_tensor({3, 4}, rng), random_tensor({9, 4}, rng), random_tensor({9, 4}, rng)};
    in.build = [](Graph& g, ParamStore&, const std::vector<Var>& x) {
      return aggregate_reference(g, x[0], x[1], x[2], 3);
    };
    return in;
  });
  m.emplace_back("dhca_query", [](std::mt19937_64& rng) {
    Instance in;
    const EncoderConfig cfg = small_encoder();
    const DhcaShape shape = cfg.dhca_shape();
    init_dhca(in.store, "x", shape, rng);
    jitter(in.store, rng);
    in.leaves = {random_tensor({16, 8}, rng), random_views(8, rng)};
    std::vector<double> heights;
    for (int n = 0; n < 16; ++n) {
      heights.push_back(-4.2 + 0.1 * n);
      heights.push_back(-2.5 + 0.05 * n);
    }
    const auto varied = reference_points(cfg.grid, heights, 2);
    in.build = [shape, varied](Graph& g, ParamStore& s, const std::vector<Var>& x) {
      MultiViewFeatures views{x[1], 6, 8.0};
      return dhca_query(g, s, "x", shape, x[0], views, small_rig(), varied);
    };
    return in;
  });
  m.emplace_back("encoder_layer", [](std::mt19937_64& rng) {
    Instance in;
    const EncoderConfig cfg = small_encoder();
    init_encoder(in.store, cfg, rng);
    jitter(in.store, rng);
    in.leaves = {random_tensor({16, 8}, rng), random_views(8, rng)};
    auto history = std::make_shared<History>(History{random_tensor({16, 8}, rng), small_motion()});
    in.build = [cfg, history](Graph& g, ParamStore& s, const std::vector<Var>& x) {
      MultiViewFeatures views{x[1], 6, 8.0};
      LayerOutput out = encoder_layer(g, s, cfg, 0, x[0], history.get(), views, small_rig());
      return ops::concat_rows(g, {out.bev, ops::reshape(g, out.fused, {8, 8})});
    };
    return in;
  });
  m.emplace_back("toy_backbone", [](std::mt19937_64& rng) {
    Instance in;
    const EncoderConfig cfg = small_encoder();
    init_encoder(in.store, cfg, rng);
    ParamStore only;
    for (auto& [name, p] : in.store.all())
      if (name.rfind("backbone.", 0) == 0) only.add(name, p.value);
    in.store = std::move(only);
    jitter(in.store, rng, 0.05);
    in.leaves = {random_tensor({2, 11, 13, 3}, rng, 0, 1)};
    in.build = [cfg](Graph& g, ParamStore& s, const std::vector<Var>& x) { return toy_backbone(g, s, cfg, x[0]).maps; };
    return in;
  });
  m.emplace_back("head_forward", [](std::mt19937_64& rng) {
    Instance in;
    const GridSpec spec = small_encoder().grid;
    HeadConfig hc;
    hc.hidden = 6;
    init_head(in.store, 8, hc, rng);
    jitter(in.store, rng);
    in.leaves = {random_tensor({16, 8}, rng)};
    in.build = [spec](Graph& g, ParamStore& s, const std::vector<Var>& x) {
      HeadOutput h = head_forward(g, s, spec, x[0]);
      return ops::concat_rows(g, {h.cls, ops::reshape(g, h.reg, {80, 2})});
    };
    return in;
  });
  m.emplace_back("focal_loss", [](std::mt19937_64& rng) {
    Instance in;
    in.leaves = {random_tensor({12, 3}, rng, -3, 3)};
    Tensor targets({12, 3});
    for (int r = 0; r < 12; r += 3) targets[r * 3 + (r / 3) % 3] = 1;
    in.build = [targets](Graph& g, ParamStore&, const std::vector<Var>& x) { return focal_loss(g, x[0], targets); };
    return in;
  });
  m.emplace_back("l1_reg_loss", [](std::mt19937_64& rng) {
    Instance in;
    in.leaves = {random_tensor({8, kRegChannels}, rng)};
    const Tensor targets = random_tensor({8, kRegChannels}, rng);
    const std::vector<char> positive{1, 0, 1, 1, 0, 0, 1, 0};
    in.build = [targets, positive](Graph& g, ParamStore&, const std::vector<Var>& x) {
      return l1_reg_loss(g, x[0], targets, positive);
    };
    return in;
  });
  m.emplace_back("height_loss", [](std::mt19937_64& rng) {
    Instance in;
    in.leaves = {random_distribution(10, 4, rng)};
    const Tensor gt = random_distribution(10, 4, rng);
    in.build = [gt](Graph& g, ParamStore&, const std::vector<Var>& x) { return height_loss(g, x[0], gt); };
    return in;
  });
  m.emplace_back("total_loss", [](std::mt19937_64& rng) {
    Instance in;
    in.leaves = {random_tensor({1}, rng, 0, 2), random_tensor({1}, rng, 0, 2), random_tensor({1}, rng, 0, 2)};
    in.build = [](Graph& g, ParamStore&, const std::vector<Var>& x) {
      return total_loss(g, x[0], x[1], x[2], LossWeights{});
    };
    return in;
  });
  return m;
}

}  // namespace

std::vector<std::string> gradcheck_ops() {
  std::vector<std::string> names;
  for (const auto& [name, make] : makers()) names.push_back(name);
  return names;
}

std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& opts) {
  std::vector<GradcheckRow> rows;
  std::uint64_t k = 0;
  for (const auto& [name, make] : makers()) {
    std::mt19937_64 rng(opts.seed * 0x9E3779B97F4A7C15ULL + (++k) * 7919);
    rows.push_back(check(name, make(rng), rng, opts));
  }
  return rows;
}

}  // namespace hgbev
