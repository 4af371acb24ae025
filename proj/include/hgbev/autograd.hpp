#pragma once

// Reverse-mode differentiation over whole-tensor operations.
//
// A Graph records the forward pass as a list of nodes. Ops are free functions
// taking the graph and returning a new Var; each registers a closure that
// propagates the output gradient into its inputs. With tracking disabled the
// same ops only compute values (used for gradient-free history frames).

#include "hgbev/kernels.hpp"
#include "hgbev/tensor.hpp"

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace hgbev {

class ParamStore;

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Graph {
 public:
  explicit Graph(bool tracking = true) : tracking_(tracking) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool tracking() const { return tracking_; }

  /// Input that never receives a gradient.
  Var constant(Tensor value);
  /// Input whose gradient is retained (for tests and gradient checks).
  Var leaf(Tensor value);
  /// Parameter from a store; gradients are added to the store by
  /// `accumulate_param_grads`. Repeated calls return the same Var.
  Var param(ParamStore& store, const std::string& name);

  const Tensor& value(Var v) const { return node(v).value; }
  const Shape& shape(Var v) const { return node(v).value.shape; }
  bool needs_grad(Var v) const { return node(v).needs_grad; }

  /// Gradient buffer of a node (allocated on first access).
  Tensor& grad(Var v);
  bool has_grad(Var v) const { return !node(v).grad.empty(); }

  /// Seeds d(root)/d(root) = 1 for a scalar root and runs all closures in reverse.
  void backward(Var root);
  void backward(Var root, const Tensor& seed);

  void accumulate_param_grads(ParamStore& store) const;

  /// Registers an op result. `inputs` decide whether the node needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, std::function<void(Graph&, Var)> back);
  Var record(Tensor value, const std::vector<Var>& inputs, std::function<void(Graph&, Var)> back);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    std::function<void(Graph&, Var)> back;
  };
  const Node& node(Var v) const { return nodes_.at(static_cast<size_t>(v.id)); }
  Node& node(Var v) { return nodes_.at(static_cast<size_t>(v.id)); }

  bool tracking_;
  std::deque<Node> nodes_;
  std::map<std::string, Var> params_;
};

namespace ops {

// Elementwise and structural ops. Broadcasting is explicit: only the forms
// listed here are supported.
Var add(Graph& g, Var a, Var b);                  // same shape
Var sub(Graph& g, Var a, Var b);                  // same shape
Var mul(Graph& g, Var a, Var b);                  // same shape
Var scale(Graph& g, Var a, double k);
Var add_row(Graph& g, Var a, Var row);            // (n, c) + (c)
Var relu(Graph& g, Var a);
Var reshape(Graph& g, Var a, Shape shape);
Var concat_rows(Graph& g, const std::vector<Var>& parts);  // along dim 0
Var slice_rows(Graph& g, Var a, int begin, int end);       // along dim 0
Var sum(Graph& g, Var a);                                   // -> scalar
Var mean(Graph& g, Var a);                                  // -> scalar
Var dot(Graph& g, Var a, const Tensor& weights);            // sum(a * w) -> scalar
/// (n * group, c) -> (n, c): sums consecutive groups of rows.
Var sum_row_groups(Graph& g, Var a, int group);
/// (n, c) -> (n * repeat, c): every row repeated `repeat` times consecutively.
Var repeat_rows(Graph& g, Var a, int repeat);

/// x (n, in) * w (in, out) + b (out).  `b` may be invalid.
Var linear(Graph& g, Var x, Var w, Var b);
/// Row n*tags + t of the output is x[n] * w + b[t]: a linear layer whose
/// input is the row concatenated with a one-hot tag.
Var linear_tagged(Graph& g, Var x, Var w, Var tag_bias);

/// Softmax over `axis_len` consecutive groups: input viewed as
/// (outer, axis_len, inner), normalized along the middle axis.
Var softmax(Graph& g, Var a, int axis_len, int inner = 1);
/// Divides every row of a (n, c) tensor of positive entries by its sum.
Var normalize_rows(Graph& g, Var a);
/// Layer normalization over the last dimension with affine gamma / beta.
Var layer_norm(Graph& g, Var x, Var gamma, Var beta, double eps = 1e-5);

/// NHWC convolution with (k, k, in_c, out_c) weights and (out_c) bias.
Var conv2d(Graph& g, Var x, Var w, Var b, int stride, int pad);

/// Clamp-to-edge bilinear sampling of `map` (rows, cols, c) at constant
/// locations (u, v); rows whose `valid` flag is false produce `fill`.
Var grid_sample(Graph& g, Var map, std::vector<double> uv, std::vector<char> valid,
                double fill = 0.0);

/// Multi-map deformable sampler; see kernels::deform_sample.
/// values (n_maps, rows, cols, c); offsets (P, heads*points*2); attn (P, heads*points).
Var deform_sample(Graph& g, Var values, Var offsets, Var attn,
                  std::shared_ptr<const std::vector<kernels::SampleEntry>> entries, int out_rows,
                  int heads, int points);

/// Hit-view averaged bilinear features at base + planar offsets.
/// features (n_view, rows, cols, c); offsets (n_points * neighbors, 2) meters.
Var neighbor_sample(Graph& g, Var features, Var offsets,
                    std::shared_ptr<const std::vector<kernels::ViewGeometry>> views,
                    std::shared_ptr<const std::vector<double>> base, int neighbors);

/// x_p + sum_k w_k * x_k:  center (q, c), neighbors (q*m, c), weights (q*m, c) -> (q, c).
Var weighted_neighbor_sum(Graph& g, Var center, Var neighbor_feats, Var weights, int neighbors);

/// -mean over rows of sum_j target[r, j] * log(max(p[r, j], floor)).
Var cross_entropy_probs(Graph& g, Var probs, const Tensor& target, double floor = 1e-12);

/// Sigmoid focal loss over (n, k) logits with 0/1 targets, normalized by `normalizer`.
Var focal_loss(Graph& g, Var logits, const Tensor& targets, double alpha, double gamma,
               double normalizer);

/// Mean absolute error over the rows of `pred` flagged in `mask`
/// (sum |pred - target| over flagged rows / (rows * cols)); zero if none.
Var masked_l1(Graph& g, Var pred, const Tensor& target, const std::vector<char>& mask);

}  // namespace ops
}  // namespace hgbev
