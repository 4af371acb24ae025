#pragma once

// Deformable attention with learned offsets and softmax sampling weights.

#include "hgbev/autograd.hpp"
#include "hgbev/params.hpp"

#include <memory>
#include <random>
#include <string>
#include <vector>

namespace hgbev {

struct DeformAttnShape {
  int query_dim = 16;
  int value_dim = 16;  // channels of the raw value maps
  int channels = 16;   // projected value / output channels, divisible by heads
  int heads = 4;
  int points = 2;
  int groups = 1;      // independent offset/weight sets per query (one per map or reference point)

  int offsets_per_group() const { return heads * points * 2; }
  int weights_per_group() const { return heads * points; }
};

/// Registers `<prefix>.{offset,attn,value,out}_{w,b}`. Offset biases start on
/// a ring of `offset_radius` map cells (head h points along angle 2*pi*h/heads,
/// point s at radius (s+1)*offset_radius); attention logits start equal.
void init_deform_attention(ParamStore& store, const std::string& prefix, const DeformAttnShape& shape,
                           std::mt19937_64& rng, double offset_radius = 0.5);

/// queries (N, query_dim); values (n_maps, rows, cols, value_dim). Entry
/// param rows index N * groups offset sets. Returns (out_rows, channels).
Var deformable_attention(Graph& g, ParamStore& store, const std::string& prefix,
                         const DeformAttnShape& shape, Var queries, Var values,
                         std::shared_ptr<const std::vector<kernels::SampleEntry>> entries,
                         int out_rows);

/// One linear layer `<prefix>.w` (in, out) and `<prefix>.b` (out).
void init_linear(ParamStore& store, const std::string& prefix, int in, int out, std::mt19937_64& rng,
                 bool zero = false);
Var apply_linear(Graph& g, ParamStore& store, const std::string& prefix, Var x);

}  // namespace hgbev
