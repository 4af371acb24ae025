#include "hgbev/harness.hpp"

#include <cmath>

namespace hgbev {

namespace {

using Rgb = std::array<std::uint8_t, 3>;

constexpr Rgb kBackground{255, 255, 255};
constexpr Rgb kGridLine{220, 220, 220};
constexpr Rgb kGt{0, 160, 0};
constexpr Rgb kPred{220, 0, 0};

void put(Image& img, int x, int y, const Rgb& c) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  const size_t at = (static_cast<size_t>(y) * static_cast<size_t>(img.width) + static_cast<size_t>(x)) * 3;
  img.rgb[at] = c[0];
  img.rgb[at + 1] = c[1];
  img.rgb[at + 2] = c[2];
}

Image blank(int w, int h, const Rgb& c) {
  Image img{w, h, {}};
  img.rgb.resize(static_cast<size_t>(w) * static_cast<size_t>(h) * 3);
  for (size_t i = 0; i < img.rgb.size(); i += 3) {
    img.rgb[i] = c[0];
    img.rgb[i + 1] = c[1];
    img.rgb[i + 2] = c[2];
  }
  return img;
}

void line(Image& img, double x0, double y0, double x1, double y1, const Rgb& c) {
  const int steps = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    put(img, static_cast<int>(std::floor(x0 + t * (x1 - x0))), static_cast<int>(std::floor(y0 + t * (y1 - y0))), c);
  }
}

// Image layout: +x to the right, +y upward; one cell is ppc pixels.
struct Canvas {
  const GridSpec& spec;
  int ppc;
  double px(double x) const { return (x - spec.x_range.min) / spec.cell_size_x() * ppc; }
  double py(double y) const { return (spec.y_range.max - y) / spec.cell_size_y() * ppc; }
};

void draw_box(Image& img, const Canvas& cv, const Box3D& b, const Rgb& c) {
  const double ca = std::cos(b.yaw), sa = std::sin(b.yaw);
  const double hl = b.size[0] / 2, hw = b.size[1] / 2;
  const double lx[4] = {hl, hl, -hl, -hl}, ly[4] = {hw, -hw, -hw, hw};
  double X[4], Y[4];
  for (int k = 0; k < 4; ++k) {
    X[k] = cv.px(b.center[0] + ca * lx[k] - sa * ly[k]);
    Y[k] = cv.py(b.center[1] + sa * lx[k] + ca * ly[k]);
  }
  for (int k = 0; k < 4; ++k) line(img, X[k], Y[k], X[(k + 1) % 4], Y[(k + 1) % 4], c);
  // heading tick from the center to the front edge
  line(img, cv.px(b.center[0]), cv.py(b.center[1]), (X[0] + X[1]) / 2, (Y[0] + Y[1]) / 2, c);
}

}  // namespace

Image plot_bev_boxes(const GridSpec& spec, const std::vector<Box3D>& gts, const std::vector<Box3D>& preds,
                     int pixels_per_cell) {
  if (pixels_per_cell < 1) throw std::invalid_argument("plot: pixels_per_cell must be positive");
  Image img = blank(spec.w_cells * pixels_per_cell, spec.h_cells * pixels_per_cell, kBackground);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (x % pixels_per_cell == 0 || y % pixels_per_cell == 0) put(img, x, y, kGridLine);
  const Canvas cv{spec, pixels_per_cell};
  for (const Box3D& b : gts) draw_box(img, cv, b, kGt);
  for (const Box3D& b : preds) draw_box(img, cv, b, kPred);
  return img;
}

Image plot_height_argmax(const HeightField& field, const std::vector<char>& mask, int pixels_per_cell) {
  if (pixels_per_cell < 1) throw std::invalid_argument("plot: pixels_per_cell must be positive");
  const int h = field.h(), w = field.w(), d = field.d();
  if (!mask.empty() && mask.size() != static_cast<size_t>(h * w))
    throw std::invalid_argument("plot: mask size does not match the height field");
  Image img = blank(w * pixels_per_cell, h * pixels_per_cell, {0, 0, 0});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      if (!mask.empty() && !mask[static_cast<size_t>(i * w + j)]) continue;
      const double* p = field.cell(i, j);
      int m = 0;
      for (int k = 1; k < d; ++k)
        if (p[k] > p[m]) m = k;
      const auto level = static_cast<std::uint8_t>(d > 1 ? 40 + (215 * m) / (d - 1) : 255);
      // Row i grows along +y, drawn upward like the box overlay.
      const int y0 = (h - 1 - i) * pixels_per_cell, x0 = j * pixels_per_cell;
      for (int y = 0; y < pixels_per_cell; ++y)
        for (int x = 0; x < pixels_per_cell; ++x) put(img, x0 + x, y0 + y, {level, level, level});
    }
  return img;
}

}  // namespace hgbev
