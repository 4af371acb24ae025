// Serial reference implementations. Straight loops, no blocking; kept as the
// ground truth the OpenMP kernels are tested against.

#include "hgbev/kernels.hpp"
#include "hgbev/sampling.hpp"
#include "neighbor_hits.hpp"

namespace hgbev::kernels::reference {

void matmul(const double* X, const double* W, double* Y, int n, int in, int out) {
  for (int r = 0; r < n; ++r)
    for (int o = 0; o < out; ++o) {
      double s = 0;
      for (int i = 0; i < in; ++i) s += X[r * in + i] * W[i * out + o];
      Y[r * out + o] += s;
    }
}

void matmul_grad_input(const double* dY, const double* W, double* dX, int n, int in, int out) {
  for (int r = 0; r < n; ++r)
    for (int i = 0; i < in; ++i) {
      double s = 0;
      for (int o = 0; o < out; ++o) s += dY[r * out + o] * W[i * out + o];
      dX[r * in + i] += s;
    }
}

void matmul_grad_weight(const double* X, const double* dY, double* dW, int n, int in, int out) {
  for (int i = 0; i < in; ++i)
    for (int o = 0; o < out; ++o) {
      double s = 0;
      for (int r = 0; r < n; ++r) s += X[r * in + i] * dY[r * out + o];
      dW[i * out + o] += s;
    }
}

void conv2d(const ConvDims& d, const double* in, const double* w, double* out) {
  const int oh = d.out_h(), ow = d.out_w();
  for (int b = 0; b < d.batch; ++b)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        for (int co = 0; co < d.out_c; ++co) {
          double s = 0;
          for (int ky = 0; ky < d.kernel; ++ky)
            for (int kx = 0; kx < d.kernel; ++kx) {
              const int iy = oy * d.stride - d.pad + ky, ix = ox * d.stride - d.pad + kx;
              if (iy < 0 || iy >= d.in_h || ix < 0 || ix >= d.in_w) continue;
              for (int ci = 0; ci < d.in_c; ++ci)
                s += in[((b * d.in_h + iy) * d.in_w + ix) * d.in_c + ci] *
                     w[((ky * d.kernel + kx) * d.in_c + ci) * d.out_c + co];
            }
          out[((b * oh + oy) * ow + ox) * d.out_c + co] += s;
        }
}

void conv2d_grad_input(const ConvDims& d, const double* dout, const double* w, double* din) {
  const int oh = d.out_h(), ow = d.out_w();
  for (int b = 0; b < d.batch; ++b)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        for (int ky = 0; ky < d.kernel; ++ky)
          for (int kx = 0; kx < d.kernel; ++kx) {
            const int iy = oy * d.stride - d.pad + ky, ix = ox * d.stride - d.pad + kx;
            if (iy < 0 || iy >= d.in_h || ix < 0 || ix >= d.in_w) continue;
            for (int ci = 0; ci < d.in_c; ++ci)
              for (int co = 0; co < d.out_c; ++co)
                din[((b * d.in_h + iy) * d.in_w + ix) * d.in_c + ci] +=
                    dout[((b * oh + oy) * ow + ox) * d.out_c + co] *
                    w[((ky * d.kernel + kx) * d.in_c + ci) * d.out_c + co];
          }
}

void conv2d_grad_weight(const ConvDims& d, const double* in, const double* dout, double* dw) {
  const int oh = d.out_h(), ow = d.out_w();
  for (int b = 0; b < d.batch; ++b)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        for (int ky = 0; ky < d.kernel; ++ky)
          for (int kx = 0; kx < d.kernel; ++kx) {
            const int iy = oy * d.stride - d.pad + ky, ix = ox * d.stride - d.pad + kx;
            if (iy < 0 || iy >= d.in_h || ix < 0 || ix >= d.in_w) continue;
            for (int ci = 0; ci < d.in_c; ++ci)
              for (int co = 0; co < d.out_c; ++co)
                dw[((ky * d.kernel + kx) * d.in_c + ci) * d.out_c + co] +=
                    in[((b * d.in_h + iy) * d.in_w + ix) * d.in_c + ci] *
                    dout[((b * oh + oy) * ow + ox) * d.out_c + co];
          }
}

void deform_sample(const DeformDims& d, const double* values, std::span<const SampleEntry> entries,
                   const double* offsets, const double* attn, double* out) {
  const int C = d.channels, dh = C / d.heads;
  const long plane = static_cast<long>(d.rows) * d.cols * C;
  for (const auto& e : entries) {
    const double* map = values + e.map * plane;
    for (int h = 0; h < d.heads; ++h)
      for (int s = 0; s < d.points; ++s) {
        const int hs = h * d.points + s;
        const double a = attn[e.param_row * d.weight_stride() + hs];
        const double du = offsets[e.param_row * d.offset_stride() + hs * 2];
        const double dv = offsets[e.param_row * d.offset_stride() + hs * 2 + 1];
        const BilinearTap t = bilinear_tap(e.u + du, e.v + dv, d.rows, d.cols);
        for (int c = h * dh; c < (h + 1) * dh; ++c) {
          const double val = t.w00() * map[(t.v0 * d.cols + t.u0) * C + c] +
                             t.w01() * map[(t.v0 * d.cols + t.u1) * C + c] +
                             t.w10() * map[(t.v1 * d.cols + t.u0) * C + c] +
                             t.w11() * map[(t.v1 * d.cols + t.u1) * C + c];
          out[e.out_row * C + c] += e.scale * a * val;
        }
      }
  }
}

void deform_sample_backward(const DeformDims& d, const double* values,
                            std::span<const SampleEntry> entries, const double* offsets,
                            const double* attn, const double* dout, double* dvalues,
                            double* doffsets, double* dattn) {
  const int C = d.channels, dh = C / d.heads;
  const long plane = static_cast<long>(d.rows) * d.cols * C;
  for (const auto& e : entries) {
    const double* map = values + e.map * plane;
    for (int h = 0; h < d.heads; ++h)
      for (int s = 0; s < d.points; ++s) {
        const int hs = h * d.points + s;
        const double a = attn[e.param_row * d.weight_stride() + hs];
        const double du = offsets[e.param_row * d.offset_stride() + hs * 2];
        const double dv = offsets[e.param_row * d.offset_stride() + hs * 2 + 1];
        const BilinearTap t = bilinear_tap(e.u + du, e.v + dv, d.rows, d.cols);
        double ga = 0, gu = 0, gv = 0;
        for (int c = h * dh; c < (h + 1) * dh; ++c) {
          const double g = dout[e.out_row * C + c];
          const double m00 = map[(t.v0 * d.cols + t.u0) * C + c];
          const double m01 = map[(t.v0 * d.cols + t.u1) * C + c];
          const double m10 = map[(t.v1 * d.cols + t.u0) * C + c];
          const double m11 = map[(t.v1 * d.cols + t.u1) * C + c];
          ga += g * (t.w00() * m00 + t.w01() * m01 + t.w10() * m10 + t.w11() * m11);
          gu += g * ((1 - t.fv) * (m01 - m00) + t.fv * (m11 - m10));
          gv += g * ((1 - t.fu) * (m10 - m00) + t.fu * (m11 - m01));
          if (dvalues) {
            double* dm = dvalues + e.map * plane;
            const double k = e.scale * a * g;
            dm[(t.v0 * d.cols + t.u0) * C + c] += k * t.w00();
            dm[(t.v0 * d.cols + t.u1) * C + c] += k * t.w01();
            dm[(t.v1 * d.cols + t.u0) * C + c] += k * t.w10();
            dm[(t.v1 * d.cols + t.u1) * C + c] += k * t.w11();
          }
        }
        if (dattn) dattn[e.param_row * d.weight_stride() + hs] += e.scale * ga;
        if (doffsets) {
          if (t.u_free) doffsets[e.param_row * d.offset_stride() + hs * 2] += e.scale * a * gu;
          if (t.v_free) doffsets[e.param_row * d.offset_stride() + hs * 2 + 1] += e.scale * a * gv;
        }
      }
  }
}


void neighbor_sample(const NeighborDims& d, const double* features,
                     std::span<const ViewGeometry> views, const double* base, const double* offsets,
                     int n_points, double* out) {
  const int C = d.channels, M = d.neighbors;
  const long plane = static_cast<long>(d.rows) * d.cols * C;
  for (int q = 0; q < n_points; ++q)
    for (int k = 0; k < M; ++k) {
      const double x = base[q * 3] + offsets[(q * M + k) * 2];
      const double y = base[q * 3 + 1] + offsets[(q * M + k) * 2 + 1];
      const auto hits = neighbor_hits(views, x, y, base[q * 3 + 2]);
      if (hits.empty()) continue;
      const double inv = 1.0 / static_cast<double>(hits.size());
      for (const auto& hit : hits) {
        const double* map = features + hit.view * plane;
        const BilinearTap t = bilinear_tap(hit.fu, hit.fv, d.rows, d.cols);
        for (int c = 0; c < C; ++c)
          out[(q * M + k) * C + c] += inv * (t.w00() * map[(t.v0 * d.cols + t.u0) * C + c] +
                                             t.w01() * map[(t.v0 * d.cols + t.u1) * C + c] +
                                             t.w10() * map[(t.v1 * d.cols + t.u0) * C + c] +
                                             t.w11() * map[(t.v1 * d.cols + t.u1) * C + c]);
      }
    }
}

void neighbor_sample_backward(const NeighborDims& d, const double* features,
                              std::span<const ViewGeometry> views, const double* base,
                              const double* offsets, int n_points, const double* dout,
                              double* dfeatures, double* doffsets) {
  const int C = d.channels, M = d.neighbors;
  const long plane = static_cast<long>(d.rows) * d.cols * C;
  for (int q = 0; q < n_points; ++q)
    for (int k = 0; k < M; ++k) {
      const double x = base[q * 3] + offsets[(q * M + k) * 2];
      const double y = base[q * 3 + 1] + offsets[(q * M + k) * 2 + 1];
      const auto hits = neighbor_hits(views, x, y, base[q * 3 + 2]);
      if (hits.empty()) continue;
      const double inv = 1.0 / static_cast<double>(hits.size());
      for (const auto& hit : hits) {
        const double* map = features + hit.view * plane;
        const BilinearTap t = bilinear_tap(hit.fu, hit.fv, d.rows, d.cols);
        double gu = 0, gv = 0;
        for (int c = 0; c < C; ++c) {
          const double g = inv * dout[(q * M + k) * C + c];
          const double m00 = map[(t.v0 * d.cols + t.u0) * C + c];
          const double m01 = map[(t.v0 * d.cols + t.u1) * C + c];
          const double m10 = map[(t.v1 * d.cols + t.u0) * C + c];
          const double m11 = map[(t.v1 * d.cols + t.u1) * C + c];
          gu += g * ((1 - t.fv) * (m01 - m00) + t.fv * (m11 - m10));
          gv += g * ((1 - t.fu) * (m10 - m00) + t.fu * (m11 - m01));
          if (dfeatures) {
            double* dm = dfeatures + hit.view * plane;
            dm[(t.v0 * d.cols + t.u0) * C + c] += g * t.w00();
            dm[(t.v0 * d.cols + t.u1) * C + c] += g * t.w01();
            dm[(t.v1 * d.cols + t.u0) * C + c] += g * t.w10();
            dm[(t.v1 * d.cols + t.u1) * C + c] += g * t.w11();
          }
        }
        if (!doffsets) continue;
        if (!t.u_free) gu = 0;
        if (!t.v_free) gv = 0;
        const auto J = projection_planar_jacobian(views[static_cast<size_t>(hit.view)].projection,
                                                  hit.proj);
        const double s = views[static_cast<size_t>(hit.view)].stride;
        doffsets[(q * M + k) * 2] += (gu * J[0] + gv * J[2]) / s;
        doffsets[(q * M + k) * 2 + 1] += (gu * J[1] + gv * J[3]) / s;
      }
    }
}

}  // namespace hgbev::kernels::reference
