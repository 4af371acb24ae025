#pragma once

#include "hgbev/tensor.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <string>

namespace hgbev {

struct Parameter {
  Tensor value;
  Tensor grad;
  Tensor adam_m;  // first moment
  Tensor adam_v;  // second moment
};

/// Named learnable tensors, iterated in name order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  Tensor& value(const std::string& name) { return at(name).value; }

  std::map<std::string, Parameter>& all() { return params_; }
  const std::map<std::string, Parameter>& all() const { return params_; }

  void zero_grad();
  std::int64_t total_size() const;

 private:
  std::map<std::string, Parameter> params_;
};

namespace init {
Tensor zeros(Shape shape);
Tensor constant(Shape shape, double v);
/// Uniform in [-bound, bound].
Tensor uniform(Shape shape, double bound, std::mt19937_64& rng);
/// Glorot-uniform for a (fan_in, fan_out) weight; extra leading dims (conv
/// taps) multiply into fan_in and fan_out.
Tensor xavier(Shape shape, std::mt19937_64& rng);
}  // namespace init

/// Decoupled-weight-decay Adam with a cosine learning-rate schedule.
struct AdamWConfig {
  double lr = 2e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double min_lr_ratio = 1e-3;
  int warmup_steps = 0;
  int total_steps = 1000;
  double grad_clip = 35.0;  // global-norm clip; <= 0 disables
};

double cosine_lr(const AdamWConfig& cfg, int step);

/// Applies one update at 0-based `step` from the grads stored in `store`.
/// Returns the global gradient norm before clipping.
double adamw_step(ParamStore& store, const AdamWConfig& cfg, int step);

}  // namespace hgbev
