#pragma once

// Hot loops of the encoder. Every kernel has an OpenMP implementation in
// `hgbev::kernels` and a plain serial implementation in
// `hgbev::kernels::reference`; the two are compared by the kernel tests and
// by the benchmark target.
//
// Output buffers are accumulated into (+=), never overwritten, so callers
// zero them first. Each parallel kernel partitions its output so that no two
// threads write the same element; results are independent of thread count.

#include <array>
#include <span>

namespace hgbev::kernels {

/// One bilinear lookup request of the deformable sampler.
struct SampleEntry {
  int out_row;    // row of the output that receives the sample
  int param_row;  // row of the offset / attention-weight tensors
  int map;        // which value map
  double u, v;    // reference location in map coordinates (column, row)
  double scale;   // multiplier on the contribution (e.g. 1/|hit views|)
};

struct DeformDims {
  int n_maps, rows, cols, channels;
  int heads, points;  // channels % heads == 0
  int offset_stride() const { return heads * points * 2; }
  int weight_stride() const { return heads * points; }
};

/// Camera geometry as seen by the neighbor sampler.
struct ViewGeometry {
  std::array<double, 12> projection;
  int image_w, image_h;
  double stride;  // pixels per feature cell
};

struct NeighborDims {
  int n_view, rows, cols, channels;
  int neighbors;
};

// Y(n, o) += X(n, i) W(i, o)
void matmul(const double* X, const double* W, double* Y, int n, int in, int out);
// dX(n, i) += dY(n, o) W(i, o)^T
void matmul_grad_input(const double* dY, const double* W, double* dX, int n, int in, int out);
// dW(i, o) += X(n, i)^T dY(n, o)
void matmul_grad_weight(const double* X, const double* dY, double* dW, int n, int in, int out);

struct ConvDims {
  int batch, in_h, in_w, in_c;
  int kernel, stride, pad, out_c;
  int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
};

// NHWC input, (k, k, in_c, out_c) weights, zero padding.
void conv2d(const ConvDims& d, const double* in, const double* w, double* out);
void conv2d_grad_input(const ConvDims& d, const double* dout, const double* w, double* din);
void conv2d_grad_weight(const ConvDims& d, const double* in, const double* dout, double* dw);

/// out[e.out_row, head block] += e.scale * sum_s attn * bilinear(map, ref + offset)
void deform_sample(const DeformDims& d, const double* values, std::span<const SampleEntry> entries,
                   const double* offsets, const double* attn, double* out);
/// Any of dvalues / doffsets / dattn may be null.
void deform_sample_backward(const DeformDims& d, const double* values,
                            std::span<const SampleEntry> entries, const double* offsets,
                            const double* attn, const double* dout, double* dvalues,
                            double* doffsets, double* dattn);

/// For each base point q and neighbor k, samples the hit-view average of the
/// raw feature maps at the projection of base[q] + (offsets[q,k], 0).
void neighbor_sample(const NeighborDims& d, const double* features,
                     std::span<const ViewGeometry> views, const double* base, const double* offsets,
                     int n_points, double* out);
void neighbor_sample_backward(const NeighborDims& d, const double* features,
                              std::span<const ViewGeometry> views, const double* base,
                              const double* offsets, int n_points, const double* dout,
                              double* dfeatures, double* doffsets);

namespace reference {
void matmul(const double* X, const double* W, double* Y, int n, int in, int out);
void matmul_grad_input(const double* dY, const double* W, double* dX, int n, int in, int out);
void matmul_grad_weight(const double* X, const double* dY, double* dW, int n, int in, int out);
void conv2d(const ConvDims& d, const double* in, const double* w, double* out);
void conv2d_grad_input(const ConvDims& d, const double* dout, const double* w, double* din);
void conv2d_grad_weight(const ConvDims& d, const double* in, const double* dout, double* dw);
void deform_sample(const DeformDims& d, const double* values, std::span<const SampleEntry> entries,
                   const double* offsets, const double* attn, double* out);
void deform_sample_backward(const DeformDims& d, const double* values,
                            std::span<const SampleEntry> entries, const double* offsets,
                            const double* attn, const double* dout, double* dvalues,
                            double* doffsets, double* dattn);
void neighbor_sample(const NeighborDims& d, const double* features,
                     std::span<const ViewGeometry> views, const double* base, const double* offsets,
                     int n_points, double* out);
void neighbor_sample_backward(const NeighborDims& d, const double* features,
                              std::span<const ViewGeometry> views, const double* base,
                              const double* offsets, int n_points, const double* dout,
                              double* dfeatures, double* doffsets);
}  // namespace reference

int max_threads();

}  // namespace hgbev::kernels
