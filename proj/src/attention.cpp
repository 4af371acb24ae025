#include "hgbev/attention.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace hgbev {

void init_linear(ParamStore& store, const std::string& prefix, int in, int out, std::mt19937_64& rng,
                 bool zero) {
  store.add(prefix + ".w", zero ? init::zeros({in, out}) : init::xavier({in, out}, rng));
  store.add(prefix + ".b", init::zeros({out}));
}

Var apply_linear(Graph& g, ParamStore& store, const std::string& prefix, Var x) {
  return ops::linear(g, x, g.param(store, prefix + ".w"), g.param(store, prefix + ".b"));
}

void init_deform_attention(ParamStore& store, const std::string& prefix, const DeformAttnShape& s,
                           std::mt19937_64& rng, double offset_radius) {
  if (s.channels % s.heads != 0)
    throw std::invalid_argument("deformable attention: channels must be divisible by heads");
  const int n_off = s.groups * s.offsets_per_group();
  Tensor bias({n_off});
  for (int gi = 0; gi < s.groups; ++gi)
    for (int h = 0; h < s.heads; ++h)
      for (int p = 0; p < s.points; ++p) {
        const double angle = 2 * std::numbers::pi * h / s.heads;
        const double r = (p + 1) * offset_radius;
        const int base = gi * s.offsets_per_group() + (h * s.points + p) * 2;
        bias[base] = r * std::cos(angle);
        bias[base + 1] = r * std::sin(angle);
      }
  store.add(prefix + ".offset_w", init::zeros({s.query_dim, n_off}));
  store.add(prefix + ".offset_b", std::move(bias));
  store.add(prefix + ".attn_w", init::zeros({s.query_dim, s.groups * s.weights_per_group()}));
  store.add(prefix + ".attn_b", init::zeros({s.groups * s.weights_per_group()}));
  init_linear(store, prefix + ".value", s.value_dim, s.channels, rng);
  init_linear(store, prefix + ".out", s.channels, s.channels, rng);
}

Var deformable_attention(Graph& g, ParamStore& store, const std::string& prefix,
                         const DeformAttnShape& s, Var queries, Var values,
                         std::shared_ptr<const std::vector<kernels::SampleEntry>> entries,
                         int out_rows) {
  const Shape& qs = g.shape(queries);
  if (qs.size() != 2 || qs[1] != s.query_dim)
    throw std::invalid_argument("deformable_attention: queries must be (N, " +
                                std::to_string(s.query_dim) + "), got " + shape_str(qs));
  const int n = qs[0];
  Var off = ops::linear(g, queries, g.param(store, prefix + ".offset_w"),
                        g.param(store, prefix + ".offset_b"));
  off = ops::reshape(g, off, {n * s.groups, s.offsets_per_group()});
  Var logits = ops::linear(g, queries, g.param(store, prefix + ".attn_w"),
                           g.param(store, prefix + ".attn_b"));
  Var attn = ops::softmax(g, logits, s.points);
  attn = ops::reshape(g, attn, {n * s.groups, s.weights_per_group()});
  Var v = apply_linear(g, store, prefix + ".value", values);
  Var sampled = ops::deform_sample(g, v, off, attn, std::move(entries), out_rows, s.heads, s.points);
  return apply_linear(g, store, prefix + ".out", sampled);
}

}  // namespace hgbev
