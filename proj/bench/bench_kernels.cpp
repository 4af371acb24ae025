#include "hgbev/geometry.hpp"
#include "hgbev/kernels.hpp"

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

using namespace hgbev;
namespace K = hgbev::kernels;

namespace {

std::vector<double> random_values(size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

template <bool Reference>
void BM_Matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0)), in = 64, out = 64;
  const auto X = random_values(static_cast<size_t>(n) * in, 1);
  const auto W = random_values(static_cast<size_t>(in) * out, 2);
  std::vector<double> Y(static_cast<size_t>(n) * out);
  for (auto _ : state) {
    std::fill(Y.begin(), Y.end(), 0.0);
    if constexpr (Reference) K::reference::matmul(X.data(), W.data(), Y.data(), n, in, out);
    else K::matmul(X.data(), W.data(), Y.data(), n, in, out);
    benchmark::DoNotOptimize(Y.data());
  }
}

template <bool Reference>
void BM_Conv2d(benchmark::State& state) {
  K::ConvDims d{6, 90, 160, 3, 3, 2, 1, 8};
  const auto in = random_values(static_cast<size_t>(d.batch) * d.in_h * d.in_w * d.in_c, 3);
  const auto w = random_values(static_cast<size_t>(9) * d.in_c * d.out_c, 4);
  std::vector<double> out(static_cast<size_t>(d.batch) * d.out_h() * d.out_w() * d.out_c);
  for (auto _ : state) {
    std::fill(out.begin(), out.end(), 0.0);
    if constexpr (Reference) K::reference::conv2d(d, in.data(), w.data(), out.data());
    else K::conv2d(d, in.data(), w.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Reference>
void BM_DeformSample(benchmark::State& state) {
  K::DeformDims d{6, 12, 20, 16, 4, 2};
  const int n_entries = static_cast<int>(state.range(0));
  const auto values = random_values(static_cast<size_t>(d.n_maps) * d.rows * d.cols * d.channels, 5);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> uu(0, d.cols - 1), vv(0, d.rows - 1);
  std::uniform_int_distribution<int> map(0, d.n_maps - 1);
  std::vector<K::SampleEntry> entries;
  for (int e = 0; e < n_entries; ++e) entries.push_back({e, e, map(rng), uu(rng), vv(rng), 1.0});
  const auto offsets = random_values(static_cast<size_t>(n_entries) * d.offset_stride(), 7);
  const auto attn = random_values(static_cast<size_t>(n_entries) * d.weight_stride(), 8);
  std::vector<double> out(static_cast<size_t>(n_entries) * d.channels);
  for (auto _ : state) {
    std::fill(out.begin(), out.end(), 0.0);
    if constexpr (Reference) K::reference::deform_sample(d, values.data(), entries, offsets.data(), attn.data(), out.data());
    else K::deform_sample(d, values.data(), entries, offsets.data(), attn.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Reference>
void BM_NeighborSample(benchmark::State& state) {
  const int n_points = static_cast<int>(state.range(0));
  K::NeighborDims d{6, 12, 20, 16, 4};
  const auto features = random_values(static_cast<size_t>(d.n_view) * d.rows * d.cols * d.channels, 9);
  std::vector<K::ViewGeometry> views;
  for (int c = 0; c < 6; ++c) {
    const CameraModel cam = make_pinhole_camera(c, c * M_PI / 3, {0.5 * std::cos(c * M_PI / 3), 0.5 * std::sin(c * M_PI / 3), -3.5},
                                                100, 80, 45, 160, 90);
    K::ViewGeometry v;
    std::copy(std::begin(cam.projection), std::end(cam.projection), v.projection.begin());
    v.image_w = 160;
    v.image_h = 90;
    v.stride = 8;
    views.push_back(v);
  }
  auto base = random_values(static_cast<size_t>(n_points) * 3, 10);
  for (size_t i = 0; i < base.size(); i += 3) {
    base[i] *= 20;
    base[i + 1] *= 20;
    base[i + 2] = -4 + base[i + 2];
  }
  const auto offsets = random_values(static_cast<size_t>(n_points) * d.neighbors * 2, 11);
  std::vector<double> out(static_cast<size_t>(n_points) * d.neighbors * d.channels);
  for (auto _ : state) {
    std::fill(out.begin(), out.end(), 0.0);
    if constexpr (Reference)
      K::reference::neighbor_sample(d, features.data(), views, base.data(), offsets.data(), n_points, out.data());
    else K::neighbor_sample(d, features.data(), views, base.data(), offsets.data(), n_points, out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_Matmul<false>)->Name("matmul/parallel")->Arg(2500)->Arg(10000);
BENCHMARK(BM_Matmul<true>)->Name("matmul/reference")->Arg(2500)->Arg(10000);
BENCHMARK(BM_Conv2d<false>)->Name("conv2d/parallel");
BENCHMARK(BM_Conv2d<true>)->Name("conv2d/reference");
BENCHMARK(BM_DeformSample<false>)->Name("deform_sample/parallel")->Arg(10000);
BENCHMARK(BM_DeformSample<true>)->Name("deform_sample/reference")->Arg(10000);
BENCHMARK(BM_NeighborSample<false>)->Name("neighbor_sample/parallel")->Arg(10000);
BENCHMARK(BM_NeighborSample<true>)->Name("neighbor_sample/reference")->Arg(10000);

BENCHMARK_MAIN();
