#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace hgbev {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s);

/// Dense row-major array of doubles. The last dimension is contiguous.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), fill) {}
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
      throw std::invalid_argument("Tensor: data size does not match shape " + shape_str(shape));
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i < 0 ? rank() + i : i)); }
  bool empty() const { return data.empty(); }

  double& operator[](std::int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](std::int64_t i) const { return data[static_cast<size_t>(i)]; }

  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }

  /// Same storage, new shape; numel must agree.
  Tensor reshaped(Shape s) const {
    Tensor t = *this;
    if (shape_numel(s) != numel())
      throw std::invalid_argument("Tensor::reshaped: " + shape_str(shape) + " -> " + shape_str(s));
    t.shape = std::move(s);
    return t;
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

bool all_finite(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& t);

}  // namespace hgbev
