#include "hgbev/kernels.hpp"
#include "hgbev/sampling.hpp"
#include "neighbor_hits.hpp"

#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace hgbev::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void matmul(const double* X, const double* W, double* Y, int n, int in, int out) {
#pragma omp parallel for schedule(static)
  for (int r = 0; r < n; ++r) {
    double* y = Y + static_cast<long>(r) * out;
    const double* x = X + static_cast<long>(r) * in;
    for (int i = 0; i < in; ++i) {
      const double xi = x[i];
      if (xi == 0.0) continue;
      const double* w = W + static_cast<long>(i) * out;
      for (int o = 0; o < out; ++o) y[o] += xi * w[o];
    }
  }
}

void matmul_grad_input(const double* dY, const double* W, double* dX, int n, int in, int out) {
#pragma omp parallel for schedule(static)
  for (int r = 0; r < n; ++r) {
    const double* g = dY + static_cast<long>(r) * out;
    double* dx = dX + static_cast<long>(r) * in;
    for (int i = 0; i < in; ++i) {
      const double* w = W + static_cast<long>(i) * out;
      double s = 0;
      for (int o = 0; o < out; ++o) s += g[o] * w[o];
      dx[i] += s;
    }
  }
}

void matmul_grad_weight(const double* X, const double* dY, double* dW, int n, int in, int out) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < in; ++i) {
    double* dw = dW + static_cast<long>(i) * out;
    for (int r = 0; r < n; ++r) {
      const double xi = X[static_cast<long>(r) * in + i];
      if (xi == 0.0) continue;
      const double* g = dY + static_cast<long>(r) * out;
      for (int o = 0; o < out; ++o) dw[o] += xi * g[o];
    }
  }
}

void conv2d(const ConvDims& d, const double* in, const double* w, double* out) {
  const int oh = d.out_h(), ow = d.out_w();
#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < d.batch; ++b)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double* o = out + ((static_cast<long>(b) * oh + oy) * ow + ox) * d.out_c;
        for (int ky = 0; ky < d.kernel; ++ky) {
          const int iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.in_h) continue;
          for (int kx = 0; kx < d.kernel; ++kx) {
            const int ix = ox * d.stride - d.pad + kx;
            if (ix < 0 || ix >= d.in_w) continue;
            const double* x = in + ((static_cast<long>(b) * d.in_h + iy) * d.in_w + ix) * d.in_c;
            const double* wk = w + static_cast<long>(ky * d.kernel + kx) * d.in_c * d.out_c;
            for (int ci = 0; ci < d.in_c; ++ci) {
              const double xv = x[ci];
              if (xv == 0.0) continue;
              const double* wr = wk + static_cast<long>(ci) * d.out_c;
              for (int co = 0; co < d.out_c; ++co) o[co] += xv * wr[co];
            }
          }
        }
      }
}

void conv2d_grad_input(const ConvDims& d, const double* dout, const double* w, double* din) {
  const int oh = d.out_h(), ow = d.out_w();
  // Gather form: each input pixel collects from the outputs that read it.
#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < d.batch; ++b)
    for (int iy = 0; iy < d.in_h; ++iy)
      for (int ix = 0; ix < d.in_w; ++ix) {
        double* dx = din + ((static_cast<long>(b) * d.in_h + iy) * d.in_w + ix) * d.in_c;
        for (int ky = 0; ky < d.kernel; ++ky) {
          const int ny = iy + d.pad - ky;
          if (ny < 0 || ny % d.stride != 0) continue;
          const int oy = ny / d.stride;
          if (oy >= oh) continue;
          for (int kx = 0; kx < d.kernel; ++kx) {
            const int nx = ix + d.pad - kx;
            if (nx < 0 || nx % d.stride != 0) continue;
            const int ox = nx / d.stride;
            if (ox >= ow) continue;
            const double* g = dout + ((static_cast<long>(b) * oh + oy) * ow + ox) * d.out_c;
            const double* wk = w + static_cast<long>(ky * d.kernel + kx) * d.in_c * d.out_c;
            for (int ci = 0; ci < d.in_c; ++ci) {
              const double* wr = wk + static_cast<long>(ci) * d.out_c;
              double s = 0;
              for (int co = 0; co < d.out_c; ++co) s += g[co] * wr[co];
              dx[ci] += s;
            }
          }
        }
      }
}

void conv2d_grad_weight(const ConvDims& d, const double* in, const double* dout, double* dw) {
  const int oh = d.out_h(), ow = d.out_w();
  const int taps = d.kernel * d.kernel;
#pragma omp parallel for schedule(static)
  for (int tap = 0; tap < taps; ++tap) {
    const int ky = tap / d.kernel, kx = tap % d.kernel;
    double* wk = dw + static_cast<long>(tap) * d.in_c * d.out_c;
    for (int b = 0; b < d.batch; ++b)
      for (int oy = 0; oy < oh; ++oy) {
        const int iy = oy * d.stride - d.pad + ky;
        if (iy < 0 || iy >= d.in_h) continue;
        for (int ox = 0; ox < ow; ++ox) {
          const int ix = ox * d.stride - d.pad + kx;
          if (ix < 0 || ix >= d.in_w) continue;
          const double* x = in + ((static_cast<long>(b) * d.in_h + iy) * d.in_w + ix) * d.in_c;
          const double* g = dout + ((static_cast<long>(b) * oh + oy) * ow + ox) * d.out_c;
          for (int ci = 0; ci < d.in_c; ++ci) {
            const double xv = x[ci];
            if (xv == 0.0) continue;
            double* wr = wk + static_cast<long>(ci) * d.out_c;
            for (int co = 0; co < d.out_c; ++co) wr[co] += xv * g[co];
          }
        }
      }
  }
}

void deform_sample(const DeformDims& d, const double* values, std::span<const SampleEntry> entries,
                   const double* offsets, const double* attn, double* out) {
  const int C = d.channels, dh = C / d.heads;
  const long plane = static_cast<long>(d.rows) * d.cols * C;
  const long n = static_cast<long>(entries.size());
  // Parallel over heads: every output element belongs to exactly one head,
  // and within a head entries are visited in order.
#pragma omp parallel for schedule(static)
  for (int h = 0; h < d.heads; ++h)
    for (long ei = 0; ei < n; ++ei) {
      const SampleEntry& e = entries[static_cast<size_t>(ei)];
      const double* map = values + e.map * plane;
      double* o = out + static_cast<long>(e.out_row) * C;
      for (int s = 0; s < d.points; ++s) {
        const int hs = h * d.points + s;
        const double a = attn[e.param_row * d.weight_stride() + hs];
        const double* off = offsets + e.param_row * d.offset_stride() + hs * 2;
        const BilinearTap t = bilinear_tap(e.u + off[0], e.v + off[1], d.rows, d.cols);
        const double k = e.scale * a;
        const double* m00 = map + (t.v0 * d.cols + t.u0) * C;
        const double* m01 = map + (t.v0 * d.cols + t.u1) * C;
        const double* m10 = map + (t.v1 * d.cols + t.u0) * C;
        const double* m11 = map + (t.v1 * d.cols + t.u1) * C;
        const double w00 = t.w00(), w01 = t.w01(), w10 = t.w10(), w11 = t.w11();
        for (int c = h * dh; c < (h + 1) * dh; ++c)
          o[c] += k * (w00 * m00[c] + w01 * m01[c] + w10 * m10[c] + w11 * m11[c]);
      }
    }
}

void deform_sample_backward(const DeformDims& d, const double* values,
                            std::span<const SampleEntry> entries, const double* offsets,
                            const double* attn, const double* dout, double* dvalues,
                            double* doffsets, double* dattn) {
  const int C = d.channels, dh = C / d.heads;
  const long plane = static_cast<long>(d.rows) * d.cols * C;
  const long n = static_cast<long>(entries.size());
  const int ws = d.weight_stride();

  if (doffsets || dattn) {
    // Per-entry partials in parallel, then an ordered serial reduction so
    // shared parameter rows sum in entry order.
    std::vector<double> part(static_cast<size_t>(n) * ws * 3, 0.0);
#pragma omp parallel for schedule(static)
    for (long ei = 0; ei < n; ++ei) {
      const SampleEntry& e = entries[static_cast<size_t>(ei)];
      const double* map = values + e.map * plane;
      const double* g = dout + static_cast<long>(e.out_row) * C;
      double* pp = part.data() + ei * ws * 3;
      for (int h = 0; h < d.heads; ++h)
        for (int s = 0; s < d.points; ++s) {
          const int hs = h * d.points + s;
          const double a = attn[e.param_row * ws + hs];
          const double* off = offsets + e.param_row * d.offset_stride() + hs * 2;
          const BilinearTap t = bilinear_tap(e.u + off[0], e.v + off[1], d.rows, d.cols);
          const double* m00 = map + (t.v0 * d.cols + t.u0) * C;
          const double* m01 = map + (t.v0 * d.cols + t.u1) * C;
          const double* m10 = map + (t.v1 * d.cols + t.u0) * C;
          const double* m11 = map + (t.v1 * d.cols + t.u1) * C;
          double ga = 0, gu = 0, gv = 0;
          for (int c = h * dh; c < (h + 1) * dh; ++c) {
            ga += g[c] * (t.w00() * m00[c] + t.w01() * m01[c] + t.w10() * m10[c] + t.w11() * m11[c]);
            gu += g[c] * ((1 - t.fv) * (m01[c] - m00[c]) + t.fv * (m11[c] - m10[c]));
            gv += g[c] * ((1 - t.fu) * (m10[c] - m00[c]) + t.fu * (m11[c] - m01[c]));
          }
          pp[hs * 3] = e.scale * ga;
          pp[hs * 3 + 1] = t.u_free ? e.scale * a * gu : 0.0;
          pp[hs * 3 + 2] = t.v_free ? e.scale * a * gv : 0.0;
        }
    }
    for (long ei = 0; ei < n; ++ei) {
      const SampleEntry& e = entries[static_cast<size_t>(ei)];
      const double* pp = part.data() + ei * ws * 3;
      for (int hs = 0; hs < ws; ++hs) {
        if (dattn) dattn[e.param_row * ws + hs] += pp[hs * 3];
        if (doffsets) {
          doffsets[e.param_row * d.offset_stride() + hs * 2] += pp[hs * 3 + 1];
          doffsets[e.param_row * d.offset_stride() + hs * 2 + 1] += pp[hs * 3 + 2];
        }
      }
    }
  }

  if (dvalues) {
#pragma omp parallel for schedule(static)
    for (int h = 0; h < d.heads; ++h)
      for (long ei = 0; ei < n; ++ei) {
        const SampleEntry& e = entries[static_cast<size_t>(ei)];
        const double* g = dout + static_cast<long>(e.out_row) * C;
        double* dm = dvalues + e.map * plane;
        for (int s = 0; s < d.points; ++s) {
          const int hs = h * d.points + s;
          const double a = attn[e.param_row * ws + hs];
          const double* off = offsets + e.param_row * d.offset_stride() + hs * 2;
          const BilinearTap t = bilinear_tap(e.u + off[0], e.v + off[1], d.rows, d.cols);
          const double k = e.scale * a;
          double* d00 = dm + (t.v0 * d.cols + t.u0) * C;
          double* d01 = dm + (t.v0 * d.cols + t.u1) * C;
          double* d10 = dm + (t.v1 * d.cols + t.u0) * C;
          double* d11 = dm + (t.v1 * d.cols + t.u1) * C;
          for (int c = h * dh; c < (h + 1) * dh; ++c) {
            const double kg = k * g[c];
            d00[c] += kg * t.w00();
            d01[c] += kg * t.w01();
            d10[c] += kg * t.w10();
            d11[c] += kg * t.w11();
          }
        }
      }
  }
}

void neighbor_sample(const NeighborDims& d, const double* features,
                     std::span<const ViewGeometry> views, const double* base, const double* offsets,
                     int n_points, double* out) {
  const int C = d.channels, M = d.neighbors;
  const long plane = static_cast<long>(d.rows) * d.cols * C;
#pragma omp parallel for schedule(static)
  for (int q = 0; q < n_points; ++q)
    for (int k = 0; k < M; ++k) {
      const long row = static_cast<long>(q) * M + k;
      const auto hits = neighbor_hits(views, base[q * 3] + offsets[row * 2],
                                      base[q * 3 + 1] + offsets[row * 2 + 1], base[q * 3 + 2]);
      if (hits.empty()) continue;
      const double inv = 1.0 / static_cast<double>(hits.size());
      double* o = out + row * C;
      for (const auto& hit : hits) {
        const double* map = features + hit.view * plane;
        const BilinearTap t = bilinear_tap(hit.fu, hit.fv, d.rows, d.cols);
        const double* m00 = map + (t.v0 * d.cols + t.u0) * C;
        const double* m01 = map + (t.v0 * d.cols + t.u1) * C;
        const double* m10 = map + (t.v1 * d.cols + t.u0) * C;
        const double* m11 = map + (t.v1 * d.cols + t.u1) * C;
        for (int c = 0; c < C; ++c)
          o[c] += inv * (t.w00() * m00[c] + t.w01() * m01[c] + t.w10() * m10[c] + t.w11() * m11[c]);
      }
    }
}

void neighbor_sample_backward(const NeighborDims& d, const double* features,
                              std::span<const ViewGeometry> views, const double* base,
                              const double* offsets, int n_points, const double* dout,
                              double* dfeatures, double* doffsets) {
  const int C = d.channels, M = d.neighbors;
  const long plane = static_cast<long>(d.rows) * d.cols * C;
  const long n_rows = static_cast<long>(n_points) * M;

  if (doffsets) {
#pragma omp parallel for schedule(static)
    for (long row = 0; row < n_rows; ++row) {
      const long q = row / M;
      const auto hits = neighbor_hits(views, base[q * 3] + offsets[row * 2],
                                      base[q * 3 + 1] + offsets[row * 2 + 1], base[q * 3 + 2]);
      if (hits.empty()) continue;
      const double inv = 1.0 / static_cast<double>(hits.size());
      const double* g = dout + row * C;
      for (const auto& hit : hits) {
        const double* map = features + hit.view * plane;
        const BilinearTap t = bilinear_tap(hit.fu, hit.fv, d.rows, d.cols);
        const double* m00 = map + (t.v0 * d.cols + t.u0) * C;
        const double* m01 = map + (t.v0 * d.cols + t.u1) * C;
        const double* m10 = map + (t.v1 * d.cols + t.u0) * C;
        const double* m11 = map + (t.v1 * d.cols + t.u1) * C;
        double gu = 0, gv = 0;
        for (int c = 0; c < C; ++c) {
          const double gc = inv * g[c];
          gu += gc * ((1 - t.fv) * (m01[c] - m00[c]) + t.fv * (m11[c] - m10[c]));
          gv += gc * ((1 - t.fu) * (m10[c] - m00[c]) + t.fu * (m11[c] - m01[c]));
        }
        if (!t.u_free) gu = 0;
        if (!t.v_free) gv = 0;
        const auto& vg = views[static_cast<size_t>(hit.view)];
        const auto J = projection_planar_jacobian(vg.projection, hit.proj);
        doffsets[row * 2] += (gu * J[0] + gv * J[2]) / vg.stride;
        doffsets[row * 2 + 1] += (gu * J[1] + gv * J[3]) / vg.stride;
      }
    }
  }

  if (dfeatures) {
    std::vector<HitList> rows(static_cast<size_t>(n_rows));
#pragma omp parallel for schedule(static)
    for (long row = 0; row < n_rows; ++row) {
      const long q = row / M;
      rows[static_cast<size_t>(row)] =
          neighbor_hits(views, base[q * 3] + offsets[row * 2], base[q * 3 + 1] + offsets[row * 2 + 1],
                        base[q * 3 + 2]);
    }
    const int n_view = static_cast<int>(views.size());
    // Each view's gradient map is owned by one thread; samples visited in order.
#pragma omp parallel for schedule(static)
    for (int view = 0; view < n_view; ++view) {
      double* dm = dfeatures + view * plane;
      for (long row = 0; row < n_rows; ++row) {
        const HitList& hits = rows[static_cast<size_t>(row)];
        if (hits.empty()) continue;
        const double inv = 1.0 / static_cast<double>(hits.size());
        const double* g = dout + row * C;
        for (const auto& hit : hits) {
          if (hit.view != view) continue;
          const BilinearTap t = bilinear_tap(hit.fu, hit.fv, d.rows, d.cols);
          double* d00 = dm + (t.v0 * d.cols + t.u0) * C;
          double* d01 = dm + (t.v0 * d.cols + t.u1) * C;
          double* d10 = dm + (t.v1 * d.cols + t.u0) * C;
          double* d11 = dm + (t.v1 * d.cols + t.u1) * C;
          for (int c = 0; c < C; ++c) {
            const double gc = inv * g[c];
            d00[c] += gc * t.w00();
            d01[c] += gc * t.w01();
            d10[c] += gc * t.w10();
            d11[c] += gc * t.w11();
          }
        }
      }
    }
  }
}

}  // namespace hgbev::kernels
