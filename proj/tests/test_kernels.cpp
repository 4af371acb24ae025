#include "test_util.hpp"

#include <omp.h>

using namespace hgbev;
using namespace testutil;
namespace K = hgbev::kernels;

namespace {

std::vector<double> rand_vec(size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct Threads {
  Threads() { omp_set_num_threads(4); }
};
const Threads force_threads;

std::vector<K::ViewGeometry> ring_views() {
  std::vector<K::ViewGeometry> views;
  for (int c = 0; c < 6; ++c) {
    const double yaw = c * M_PI / 3;
    const CameraModel cam = make_pinhole_camera(c, yaw, {0.5 * std::cos(yaw), 0.5 * std::sin(yaw), -3.5}, 40, 32, 18, 64, 36);
    views.push_back({cam.projection, 64, 36, 8.0});
  }
  return views;
}

}  // namespace

TEST_CASE("matmul kernels agree with the reference") {
  std::mt19937_64 rng(1);
  for (auto [n, in, out] : {std::tuple{1, 1, 1}, {7, 5, 3}, {130, 17, 33}}) {
    const auto X = rand_vec(static_cast<size_t>(n * in), rng), W = rand_vec(static_cast<size_t>(in * out), rng);
    const auto dY = rand_vec(static_cast<size_t>(n * out), rng);
    std::vector<double> y1(static_cast<size_t>(n * out), 0.5), y2 = y1;
    K::matmul(X.data(), W.data(), y1.data(), n, in, out);
    K::reference::matmul(X.data(), W.data(), y2.data(), n, in, out);
    CHECK(max_diff(y1, y2) <= 1e-12);
    std::vector<double> dx1(static_cast<size_t>(n * in), 0.1), dx2 = dx1;
    K::matmul_grad_input(dY.data(), W.data(), dx1.data(), n, in, out);
    K::reference::matmul_grad_input(dY.data(), W.data(), dx2.data(), n, in, out);
    CHECK(max_diff(dx1, dx2) <= 1e-12);
    std::vector<double> dw1(static_cast<size_t>(in * out), -0.2), dw2 = dw1;
    K::matmul_grad_weight(X.data(), dY.data(), dw1.data(), n, in, out);
    K::reference::matmul_grad_weight(X.data(), dY.data(), dw2.data(), n, in, out);
    CHECK(max_diff(dw1, dw2) <= 1e-12);
  }
}

TEST_CASE("matmul reference matches a hand computation") {
  const std::vector<double> X{1, 2, 3, 4}, W{1, 0, -1, 2};  // (2,2) x (2,2)
  std::vector<double> Y(4, 0.0);
  K::reference::matmul(X.data(), W.data(), Y.data(), 2, 2, 2);
  CHECK(Y == std::vector<double>{1 - 2, 4, 3 - 4, 8});
}

TEST_CASE("conv2d kernels agree with the reference") {
  std::mt19937_64 rng(2);
  for (K::ConvDims d : {K::ConvDims{2, 9, 11, 3, 3, 2, 1, 4}, K::ConvDims{1, 5, 5, 2, 1, 1, 0, 3},
                        K::ConvDims{3, 6, 4, 4, 3, 1, 1, 2}}) {
    const size_t n_in = static_cast<size_t>(d.batch * d.in_h * d.in_w * d.in_c);
    const size_t n_out = static_cast<size_t>(d.batch * d.out_h() * d.out_w() * d.out_c);
    const auto in = rand_vec(n_in, rng), w = rand_vec(static_cast<size_t>(d.kernel * d.kernel * d.in_c * d.out_c), rng);
    const auto dout = rand_vec(n_out, rng);
    std::vector<double> o1(n_out), o2(n_out);
    K::conv2d(d, in.data(), w.data(), o1.data());
    K::reference::conv2d(d, in.data(), w.data(), o2.data());
    CHECK(max_diff(o1, o2) <= 1e-12);
    std::vector<double> di1(n_in), di2(n_in);
    K::conv2d_grad_input(d, dout.data(), w.data(), di1.data());
    K::reference::conv2d_grad_input(d, dout.data(), w.data(), di2.data());
    CHECK(max_diff(di1, di2) <= 1e-12);
    std::vector<double> dw1(w.size()), dw2(w.size());
    K::conv2d_grad_weight(d, in.data(), dout.data(), dw1.data());
    K::reference::conv2d_grad_weight(d, in.data(), dout.data(), dw2.data());
    CHECK(max_diff(dw1, dw2) <= 1e-12);
  }
}

TEST_CASE("conv2d with a centered delta kernel copies the input") {
  K::ConvDims d{1, 4, 5, 2, 3, 1, 1, 2};
  std::mt19937_64 rng(3);
  const auto in = rand_vec(40, rng);
  std::vector<double> w(3 * 3 * 2 * 2, 0.0);
  // tap (1, 1), identity over channels
  w[((1 * 3 + 1) * 2 + 0) * 2 + 0] = 1;
  w[((1 * 3 + 1) * 2 + 1) * 2 + 1] = 1;
  std::vector<double> out(40);
  K::conv2d(d, in.data(), w.data(), out.data());
  CHECK(max_diff(in, out) == 0.0);
}

TEST_CASE("deform_sample kernels agree with the reference") {
  std::mt19937_64 rng(4);
  K::DeformDims d{3, 5, 7, 6, 2, 3};
  const auto values = rand_vec(static_cast<size_t>(d.n_maps * d.rows * d.cols * d.channels), rng);
  std::uniform_real_distribution<double> uu(-1, 8), vv(-1, 6), sc(0.2, 1.0);
  std::uniform_int_distribution<int> map(0, d.n_maps - 1), row(0, 9);
  std::vector<K::SampleEntry> entries;
  for (int e = 0; e < 40; ++e) entries.push_back({row(rng), e, map(rng), uu(rng), vv(rng), sc(rng)});
  auto offsets = rand_vec(static_cast<size_t>(40 * d.offset_stride()), rng);
  for (double& o : offsets) o *= 2;
  const auto attn = rand_vec(static_cast<size_t>(40 * d.weight_stride()), rng);
  std::vector<double> o1(static_cast<size_t>(10 * d.channels)), o2 = o1;
  K::deform_sample(d, values.data(), entries, offsets.data(), attn.data(), o1.data());
  K::reference::deform_sample(d, values.data(), entries, offsets.data(), attn.data(), o2.data());
  CHECK(max_diff(o1, o2) <= 1e-12);

  const auto dout = rand_vec(o1.size(), rng);
  std::vector<double> dv1(values.size()), dv2(values.size()), dof1(offsets.size()), dof2(offsets.size()),
      da1(attn.size()), da2(attn.size());
  K::deform_sample_backward(d, values.data(), entries, offsets.data(), attn.data(), dout.data(), dv1.data(),
                            dof1.data(), da1.data());
  K::reference::deform_sample_backward(d, values.data(), entries, offsets.data(), attn.data(), dout.data(),
                                       dv2.data(), dof2.data(), da2.data());
  CHECK(max_diff(dv1, dv2) <= 1e-12);
  CHECK(max_diff(dof1, dof2) <= 1e-12);
  CHECK(max_diff(da1, da2) <= 1e-12);
}

TEST_CASE("deform_sample with zero offsets is attention-weighted bilinear lookup") {
  K::DeformDims d{1, 3, 3, 2, 1, 2};
  std::vector<double> values(18);
  for (size_t i = 0; i < values.size(); ++i) values[i] = static_cast<double>(i);
  const std::vector<K::SampleEntry> entries{{0, 0, 0, 1.0, 1.0, 1.0}};
  const std::vector<double> offsets(4, 0.0), attn{0.25, 0.75};
  std::vector<double> out(2);
  K::reference::deform_sample(d, values.data(), entries, offsets.data(), attn.data(), out.data());
  // cell (1, 1) holds channels {8, 9}
  CHECK(out[0] == doctest::Approx(8));
  CHECK(out[1] == doctest::Approx(9));
}

TEST_CASE("neighbor_sample kernels agree with the reference") {
  std::mt19937_64 rng(5);
  const auto views = ring_views();
  K::NeighborDims d{6, 5, 8, 4, 3};
  const auto feats = rand_vec(static_cast<size_t>(d.n_view * d.rows * d.cols * d.channels), rng);
  std::uniform_real_distribution<double> xy(-8, 8), z(-4.8, 0);
  const int n_points = 25;
  std::vector<double> base;
  for (int q = 0; q < n_points; ++q) {
    base.push_back(xy(rng));
    base.push_back(xy(rng));
    base.push_back(z(rng));
  }
  const auto offsets = rand_vec(static_cast<size_t>(n_points * d.neighbors * 2), rng);
  std::vector<double> o1(static_cast<size_t>(n_points * d.neighbors * d.channels)), o2 = o1;
  K::neighbor_sample(d, feats.data(), views, base.data(), offsets.data(), n_points, o1.data());
  K::reference::neighbor_sample(d, feats.data(), views, base.data(), offsets.data(), n_points, o2.data());
  CHECK(max_diff(o1, o2) <= 1e-12);
  double energy = 0;
  for (double v : o1) energy += std::abs(v);
  CHECK(energy > 0);

  const auto dout = rand_vec(o1.size(), rng);
  std::vector<double> df1(feats.size()), df2(feats.size()), dof1(offsets.size()), dof2(offsets.size());
  K::neighbor_sample_backward(d, feats.data(), views, base.data(), offsets.data(), n_points, dout.data(), df1.data(),
                              dof1.data());
  K::reference::neighbor_sample_backward(d, feats.data(), views, base.data(), offsets.data(), n_points, dout.data(),
                                         df2.data(), dof2.data());
  CHECK(max_diff(df1, df2) <= 1e-12);
  CHECK(max_diff(dof1, dof2) <= 1e-12);
}
