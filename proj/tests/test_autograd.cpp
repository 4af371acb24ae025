#include "test_util.hpp"

using namespace hgbev;
using namespace testutil;

namespace {

using Fn = std::function<Var(Graph&, const std::vector<Var>&)>;

// Central differences of sum(out * w) against the tape gradient of every input.
double fd_error(const std::vector<Tensor>& inputs, const Fn& f, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  Tensor w;
  auto eval = [&](const std::vector<Tensor>& xs, bool track, std::vector<Tensor>* grads) {
    Graph g(track);
    std::vector<Var> vs;
    for (const Tensor& x : xs) vs.push_back(track ? g.leaf(x) : g.constant(x));
    Var out = f(g, vs);
    if (w.empty()) w = random_tensor(g.shape(out), rng);
    Var l = ops::dot(g, out, w);
    if (grads) {
      g.backward(l);
      for (Var v : vs) grads->push_back(g.has_grad(v) ? g.grad(v) : Tensor(g.shape(v)));
    }
    return g.value(l)[0];
  };
  std::vector<Tensor> grads;
  eval(inputs, true, &grads);
  double diff = 0, mag = 0;
  std::vector<Tensor> xs = inputs;
  const double eps = 1e-6;
  for (size_t k = 0; k < xs.size(); ++k)
    for (std::int64_t i = 0; i < xs[k].numel(); ++i) {
      const double keep = xs[k][i];
      xs[k][i] = keep + eps;
      const double lp = eval(xs, false, nullptr);
      xs[k][i] = keep - eps;
      const double lm = eval(xs, false, nullptr);
      xs[k][i] = keep;
      const double num = (lp - lm) / (2 * eps);
      diff = std::max(diff, std::abs(num - grads[k][i]));
      mag = std::max({mag, std::abs(num), std::abs(grads[k][i])});
    }
  return mag > 0 ? diff / mag : diff;
}

std::mt19937_64 rng_for(int s) { return std::mt19937_64(static_cast<std::uint64_t>(s)); }

}  // namespace

TEST_CASE("elementwise ops: values and gradients") {
  auto rng = rng_for(1);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), row = random_tensor({4}, rng);
  Graph g;
  Var va = g.leaf(a), vb = g.leaf(b);
  CHECK(g.value(ops::add(g, va, vb))[5] == a[5] + b[5]);
  CHECK(g.value(ops::sub(g, va, vb))[5] == a[5] - b[5]);
  CHECK(g.value(ops::mul(g, va, vb))[5] == a[5] * b[5]);
  CHECK(g.value(ops::scale(g, va, -2.5))[7] == -2.5 * a[7]);
  CHECK(g.value(ops::relu(g, va))[2] == std::max(0.0, a[2]));
  CHECK_THROWS(ops::add(g, va, g.leaf(row)));

  CHECK(fd_error({a, b}, [](Graph& g, const std::vector<Var>& x) { return ops::add(g, x[0], x[1]); }) < 1e-8);
  CHECK(fd_error({a, b}, [](Graph& g, const std::vector<Var>& x) { return ops::sub(g, x[0], x[1]); }) < 1e-8);
  CHECK(fd_error({a, b}, [](Graph& g, const std::vector<Var>& x) { return ops::mul(g, x[0], x[1]); }) < 1e-8);
  CHECK(fd_error({a}, [](Graph& g, const std::vector<Var>& x) { return ops::scale(g, x[0], 3.0); }) < 1e-8);
  CHECK(fd_error({a, row}, [](Graph& g, const std::vector<Var>& x) { return ops::add_row(g, x[0], x[1]); }) < 1e-8);
  CHECK(fd_error({a}, [](Graph& g, const std::vector<Var>& x) { return ops::relu(g, x[0]); }) < 1e-8);
}

TEST_CASE("structural ops: values and gradients") {
  auto rng = rng_for(2);
  const Tensor a = random_tensor({6, 3}, rng), b = random_tensor({2, 3}, rng);
  {
    Graph g;
    Var v = ops::concat_rows(g, {g.leaf(a), g.leaf(b)});
    CHECK(g.shape(v) == Shape{8, 3});
    CHECK(g.value(v)[6 * 3 + 1] == b[1]);
    Var s = ops::slice_rows(g, g.leaf(a), 2, 4);
    CHECK(g.shape(s) == Shape{2, 3});
    CHECK(g.value(s)[0] == a[6]);
    Var grp = ops::sum_row_groups(g, g.leaf(a), 3);
    CHECK(g.shape(grp) == Shape{2, 3});
    CHECK(g.value(grp)[4] == doctest::Approx(a[10] + a[13] + a[16]));
    Var rep = ops::repeat_rows(g, g.leaf(b), 2);
    CHECK(g.shape(rep) == Shape{4, 3});
    CHECK(g.value(rep)[3 * 3 + 2] == b[5]);
    CHECK(g.value(ops::sum(g, g.leaf(b)))[0] == doctest::Approx(b[0] + b[1] + b[2] + b[3] + b[4] + b[5]));
  }
  CHECK(fd_error({a, b}, [](Graph& g, const std::vector<Var>& x) { return ops::concat_rows(g, {x[0], x[1], x[0]}); }) < 1e-8);
  CHECK(fd_error({a}, [](Graph& g, const std::vector<Var>& x) { return ops::slice_rows(g, x[0], 1, 5); }) < 1e-8);
  CHECK(fd_error({a}, [](Graph& g, const std::vector<Var>& x) { return ops::reshape(g, x[0], {3, 6}); }) < 1e-8);
  CHECK(fd_error({a}, [](Graph& g, const std::vector<Var>& x) { return ops::sum_row_groups(g, x[0], 2); }) < 1e-8);
  CHECK(fd_error({b}, [](Graph& g, const std::vector<Var>& x) { return ops::repeat_rows(g, x[0], 3); }) < 1e-8);
  CHECK(fd_error({a}, [](Graph& g, const std::vector<Var>& x) { return ops::sum(g, x[0]); }) < 1e-8);
  CHECK(fd_error({a}, [](Graph& g, const std::vector<Var>& x) { return ops::mean(g, x[0]); }) < 1e-8);
  const Tensor w = random_tensor({6, 3}, rng);
  CHECK(fd_error({a}, [w](Graph& g, const std::vector<Var>& x) { return ops::dot(g, x[0], w); }) < 1e-8);
}

TEST_CASE("linear and tagged linear") {
  auto rng = rng_for(3);
  const Tensor x = random_tensor({5, 4}, rng), w = random_tensor({4, 3}, rng), b = random_tensor({3}, rng);
  const Tensor tags = random_tensor({2, 3}, rng);
  {
    Graph g;
    Var y = ops::linear(g, g.leaf(x), g.leaf(w), g.leaf(b));
    double expect = b[1];
    for (int i = 0; i < 4; ++i) expect += x[2 * 4 + i] * w[i * 3 + 1];
    CHECK(g.value(y)[2 * 3 + 1] == doctest::Approx(expect));
    Var t = ops::linear_tagged(g, g.leaf(x), g.leaf(w), g.leaf(tags));
    CHECK(g.shape(t) == Shape{10, 3});
    double e2 = tags[1 * 3 + 2];
    for (int i = 0; i < 4; ++i) e2 += x[3 * 4 + i] * w[i * 3 + 2];
    CHECK(g.value(t)[(3 * 2 + 1) * 3 + 2] == doctest::Approx(e2));
  }
  CHECK(fd_error({x, w, b}, [](Graph& g, const std::vector<Var>& v) { return ops::linear(g, v[0], v[1], v[2]); }) < 1e-8);
  CHECK(fd_error({x, w}, [](Graph& g, const std::vector<Var>& v) { return ops::linear(g, v[0], v[1], Var{}); }) < 1e-8);
  CHECK(fd_error({x, w, tags}, [](Graph& g, const std::vector<Var>& v) { return ops::linear_tagged(g, v[0], v[1], v[2]); }) < 1e-8);
}

TEST_CASE("softmax, normalize_rows and layer_norm") {
  auto rng = rng_for(4);
  const Tensor a = random_tensor({2, 3, 4}, rng, -2, 2);
  {
    Graph g;
    Var s = ops::softmax(g, g.leaf(a), 3, 4);
    const Tensor& y = g.value(s);
    for (int o = 0; o < 2; ++o)
      for (int in = 0; in < 4; ++in) {
        double sum = 0;
        for (int k = 0; k < 3; ++k) sum += y[(o * 3 + k) * 4 + in];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
      }
    // shift invariance along the softmax axis
    Tensor shifted = a;
    for (int k = 0; k < 3; ++k) shifted[(1 * 3 + k) * 4 + 2] += 7.0;
    Var s2 = ops::softmax(g, g.leaf(shifted), 3, 4);
    CHECK(tensor_gap(g.value(s), g.value(s2)) < 1e-14);
  }
  CHECK(fd_error({a}, [](Graph& g, const std::vector<Var>& x) { return ops::softmax(g, x[0], 3, 4); }) < 1e-7);
  CHECK(fd_error({a.reshaped({6, 4})}, [](Graph& g, const std::vector<Var>& x) { return ops::softmax(g, x[0], 4); }) < 1e-7);

  const Tensor pos = random_tensor({5, 3}, rng, 0.1, 1);
  {
    Graph g;
    const Tensor& y = g.value(ops::normalize_rows(g, g.leaf(pos)));
    for (int r = 0; r < 5; ++r) CHECK(y[r * 3] + y[r * 3 + 1] + y[r * 3 + 2] == doctest::Approx(1.0));
  }
  CHECK(fd_error({pos}, [](Graph& g, const std::vector<Var>& x) { return ops::normalize_rows(g, x[0]); }) < 1e-7);

  const Tensor x = random_tensor({4, 6}, rng), gamma = random_tensor({6}, rng, 0.5, 1.5), beta = random_tensor({6}, rng);
  {
    Graph g;
    const Tensor& y = g.value(ops::layer_norm(g, g.leaf(x), g.constant(Tensor({6}, 1.0)), g.constant(Tensor({6}))));
    for (int r = 0; r < 4; ++r) {
      double m = 0, v = 0;
      for (int c = 0; c < 6; ++c) m += y[r * 6 + c] / 6;
      for (int c = 0; c < 6; ++c) v += (y[r * 6 + c] - m) * (y[r * 6 + c] - m) / 6;
      CHECK(std::abs(m) < 1e-12);
      CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
    }
  }
  CHECK(fd_error({x, gamma, beta}, [](Graph& g, const std::vector<Var>& v) { return ops::layer_norm(g, v[0], v[1], v[2]); }) < 1e-6);
}

TEST_CASE("conv2d op gradients") {
  auto rng = rng_for(5);
  const Tensor x = random_tensor({2, 5, 6, 3}, rng), w = random_tensor({3, 3, 3, 2}, rng), b = random_tensor({2}, rng);
  {
    Graph g;
    Var y = ops::conv2d(g, g.leaf(x), g.leaf(w), g.leaf(b), 2, 1);
    CHECK(g.shape(y) == Shape{2, 3, 3, 2});
  }
  CHECK(fd_error({x, w, b}, [](Graph& g, const std::vector<Var>& v) { return ops::conv2d(g, v[0], v[1], v[2], 2, 1); }) < 1e-7);
  CHECK(fd_error({x, w, b}, [](Graph& g, const std::vector<Var>& v) { return ops::conv2d(g, v[0], v[1], v[2], 1, 1); }) < 1e-7);
}

TEST_CASE("grid_sample values and gradients") {
  auto rng = rng_for(6);
  const Tensor map = random_tensor({3, 4, 2}, rng);
  const std::vector<double> uv{0.3, 1.7, 2.5, 0.2, 3.0, 2.0, -0.5, 0.4};
  const std::vector<char> valid{1, 1, 1, 0};
  Graph g;
  const Tensor& y = g.value(ops::grid_sample(g, g.leaf(map), uv, valid, 0.25));
  for (int q = 0; q < 3; ++q) {
    const auto expect = bilinear_sample(map, uv[static_cast<size_t>(2 * q)], uv[static_cast<size_t>(2 * q + 1)]);
    CHECK(y[q * 2] == doctest::Approx(expect[0]).epsilon(1e-14));
    CHECK(y[q * 2 + 1] == doctest::Approx(expect[1]).epsilon(1e-14));
  }
  CHECK(y[6] == 0.25);
  CHECK(y[7] == 0.25);
  CHECK(fd_error({map}, [uv, valid](Graph& g, const std::vector<Var>& x) { return ops::grid_sample(g, x[0], uv, valid, 0.25); }) < 1e-8);
}

TEST_CASE("deform_sample op gradients") {
  auto rng = rng_for(7);
  const int heads = 2, points = 2;
  const Tensor values = random_tensor({2, 4, 5, 4}, rng);
  auto entries = std::make_shared<std::vector<kernels::SampleEntry>>(std::vector<kernels::SampleEntry>{
      {0, 0, 0, 1.3, 1.6, 1.0}, {0, 1, 1, 2.2, 0.7, 0.5}, {1, 2, 0, 3.1, 2.4, 1.0}});
  const Tensor offsets = random_tensor({3, heads * points * 2}, rng, -0.4, 0.4);
  const Tensor attn = random_tensor({3, heads * points}, rng);
  CHECK(fd_error({values, offsets, attn}, [entries](Graph& g, const std::vector<Var>& x) {
          return ops::deform_sample(g, x[0], x[1], x[2], entries, 2, 2, 2);
        }) < 1e-7);
}

TEST_CASE("neighbor_sample op gradients") {
  auto rng = rng_for(8);
  auto views = std::make_shared<std::vector<kernels::ViewGeometry>>();
  for (int c = 0; c < 6; ++c) {
    const double yaw = c * M_PI / 3;
    const CameraModel cam = make_pinhole_camera(c, yaw, {0, 0, -3.5}, 40, 32, 18, 64, 36);
    views->push_back({cam.projection, 64, 36, 8.0});
  }
  auto base = std::make_shared<std::vector<double>>(std::vector<double>{4.2, 1.1, -4.0, -3.3, 5.2, -2.5});
  const Tensor feats = random_tensor({6, 5, 8, 3}, rng);
  const Tensor offsets = random_tensor({2 * 3, 2}, rng, -0.7, 0.7);
  CHECK(fd_error({feats, offsets}, [views, base](Graph& g, const std::vector<Var>& x) {
          return ops::neighbor_sample(g, x[0], x[1], views, base, 3);
        }) < 1e-7);
}

TEST_CASE("weighted_neighbor_sum values and gradients") {
  auto rng = rng_for(9);
  const Tensor c = random_tensor({2, 3}, rng), n = random_tensor({4, 3}, rng), w = random_tensor({4, 3}, rng);
  Graph g;
  const Tensor& y = g.value(ops::weighted_neighbor_sum(g, g.leaf(c), g.leaf(n), g.leaf(w), 2));
  CHECK(y[1 * 3 + 2] == doctest::Approx(c[5] + w[2 * 3 + 2] * n[2 * 3 + 2] + w[3 * 3 + 2] * n[3 * 3 + 2]));
  CHECK(fd_error({c, n, w}, [](Graph& g, const std::vector<Var>& x) {
          return ops::weighted_neighbor_sum(g, x[0], x[1], x[2], 2);
        }) < 1e-8);
}

TEST_CASE("loss ops: values and gradients") {
  auto rng = rng_for(10);
  const Tensor p = random_tensor({4, 3}, rng, 0.1, 1), t = random_tensor({4, 3}, rng, 0, 1);
  {
    Graph g;
    double expect = 0;
    for (int r = 0; r < 4; ++r)
      for (int k = 0; k < 3; ++k) expect -= t[r * 3 + k] * std::log(p[r * 3 + k]) / 4;
    CHECK(g.value(ops::cross_entropy_probs(g, g.leaf(p), t))[0] == doctest::Approx(expect).epsilon(1e-14));
    Tensor zero = p;
    zero[0] = 0;
    CHECK(std::isfinite(g.value(ops::cross_entropy_probs(g, g.leaf(zero), t))[0]));
  }
  CHECK(fd_error({p}, [t](Graph& g, const std::vector<Var>& x) { return ops::cross_entropy_probs(g, x[0], t); }) < 1e-7);

  const Tensor logits = random_tensor({5, 2}, rng, -3, 3);
  Tensor targets({5, 2});
  targets[1] = 1;
  targets[6] = 1;
  {
    Graph g;
    double expect = 0;
    for (int i = 0; i < 10; ++i) {
      const double s = 1 / (1 + std::exp(-logits[i]));
      const double pt = targets[i] > 0 ? s : 1 - s;
      const double at = targets[i] > 0 ? 0.25 : 0.75;
      expect += -at * std::pow(1 - pt, 2) * std::log(pt);
    }
    CHECK(g.value(ops::focal_loss(g, g.leaf(logits), targets, 0.25, 2.0, 2.0))[0] == doctest::Approx(expect / 2).epsilon(1e-12));
  }
  CHECK(fd_error({logits}, [targets](Graph& g, const std::vector<Var>& x) { return ops::focal_loss(g, x[0], targets, 0.25, 2.0, 2.0); }) < 1e-7);

  const Tensor pred = random_tensor({4, 3}, rng), tgt = random_tensor({4, 3}, rng);
  const std::vector<char> mask{1, 0, 0, 1};
  {
    Graph g;
    double expect = 0;
    for (int r : {0, 3})
      for (int k = 0; k < 3; ++k) expect += std::abs(pred[r * 3 + k] - tgt[r * 3 + k]);
    CHECK(g.value(ops::masked_l1(g, g.leaf(pred), tgt, mask))[0] == doctest::Approx(expect / 6));
    CHECK(g.value(ops::masked_l1(g, g.leaf(pred), tgt, std::vector<char>(4, 0)))[0] == 0.0);
  }
  CHECK(fd_error({pred}, [tgt, mask](Graph& g, const std::vector<Var>& x) { return ops::masked_l1(g, x[0], tgt, mask); }) < 1e-7);
}

TEST_CASE("non-tracking graphs compute the same values and allocate no gradients") {
  auto rng = rng_for(11);
  const Tensor x = random_tensor({3, 4}, rng), w = random_tensor({4, 2}, rng);
  Graph a(true), b(false);
  Var ya = ops::relu(a, ops::linear(a, a.leaf(x), a.leaf(w), Var{}));
  Var yb = ops::relu(b, ops::linear(b, b.constant(x), b.constant(w), Var{}));
  CHECK(tensor_gap(a.value(ya), b.value(yb)) == 0.0);
  CHECK_FALSE(b.needs_grad(yb));
}

TEST_CASE("parameters are memoized per graph and gradients accumulate into the store") {
  ParamStore store;
  store.add("w", Tensor({2}, std::vector<double>{1.0, 2.0}));
  Graph g;
  Var p1 = g.param(store, "w"), p2 = g.param(store, "w");
  CHECK(p1.id == p2.id);
  Var l = ops::sum(g, ops::mul(g, p1, p2));
  g.backward(l);
  store.zero_grad();
  g.accumulate_param_grads(store);
  CHECK(store.at("w").grad[0] == doctest::Approx(2.0));
  CHECK(store.at("w").grad[1] == doctest::Approx(4.0));
}

TEST_CASE("AdamW with cosine schedule") {
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.total_steps = 100;
  cfg.min_lr_ratio = 0.01;
  CHECK(cosine_lr(cfg, 0) == doctest::Approx(0.1));
  CHECK(cosine_lr(cfg, 50) == doctest::Approx(0.1 * (0.01 + 0.99 * 0.5)));
  CHECK(cosine_lr(cfg, 100) == doctest::Approx(0.001));
  cfg.warmup_steps = 10;
  CHECK(cosine_lr(cfg, 0) < cosine_lr(cfg, 5));

  // a quadratic bowl converges
  ParamStore store;
  store.add("x", Tensor({3}, std::vector<double>{3.0, -2.0, 1.0}));
  AdamWConfig a;
  a.lr = 0.05;
  a.total_steps = 400;
  a.weight_decay = 0;
  for (int s = 0; s < 400; ++s) {
    Graph g;
    Var x = g.param(store, "x");
    g.backward(ops::sum(g, ops::mul(g, x, x)));
    store.zero_grad();
    g.accumulate_param_grads(store);
    adamw_step(store, a, s);
  }
  for (int i = 0; i < 3; ++i) CHECK(std::abs(store.value("x")[i]) < 0.05);
}
