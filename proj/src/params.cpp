#include "hgbev/params.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace hgbev {

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter: " + name);
  Parameter p;
  p.grad = Tensor(init.shape);
  p.adam_m = Tensor(init.shape);
  p.adam_v = Tensor(init.shape);
  p.value = std::move(init);
  return params_.emplace(name, std::move(p)).first->second.value;
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.grad.fill(0.0);
}

std::int64_t ParamStore::total_size() const {
  std::int64_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.numel();
  return n;
}

namespace init {

Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor constant(Shape shape, double v) { return Tensor(std::move(shape), v); }

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& x : t.data) x = dist(rng);
  return t;
}

Tensor xavier(Shape shape, std::mt19937_64& rng) {
  if (shape.size() < 2) throw std::invalid_argument("xavier: rank >= 2 required");
  double receptive = 1;
  for (size_t i = 0; i + 2 < shape.size(); ++i) receptive *= shape[i];
  const double fan_in = receptive * shape[shape.size() - 2];
  const double fan_out = receptive * shape[shape.size() - 1];
  return uniform(std::move(shape), std::sqrt(6.0 / (fan_in + fan_out)), rng);
}

}  // namespace init

double cosine_lr(const AdamWConfig& cfg, int step) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.lr * (step + 1) / static_cast<double>(cfg.warmup_steps);
  const double span = std::max(1, cfg.total_steps - cfg.warmup_steps);
  const double t = std::min(1.0, (step - cfg.warmup_steps) / span);
  const double floor = cfg.lr * cfg.min_lr_ratio;
  return floor + 0.5 * (cfg.lr - floor) * (1.0 + std::cos(std::numbers::pi * t));
}

double adamw_step(ParamStore& store, const AdamWConfig& cfg, int step) {
  double sq = 0;
  for (auto& [_, p] : store.all())
    for (double g : p.grad.data) sq += g * g;
  const double norm = std::sqrt(sq);
  const double clip = (cfg.grad_clip > 0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;

  const double lr = cosine_lr(cfg, step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, step + 1);
  const double bc2 = 1.0 - std::pow(cfg.beta2, step + 1);
  for (auto& [_, p] : store.all()) {
    for (std::int64_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i] * clip;
      p.adam_m[i] = cfg.beta1 * p.adam_m[i] + (1 - cfg.beta1) * g;
      p.adam_v[i] = cfg.beta2 * p.adam_v[i] + (1 - cfg.beta2) * g * g;
      const double mhat = p.adam_m[i] / bc1;
      const double vhat = p.adam_v[i] / bc2;
      p.value[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.value[i]);
    }
  }
  return norm;
}

}  // namespace hgbev
