#include "hgbev/autograd.hpp"

#include "hgbev/params.hpp"
#include "hgbev/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace hgbev {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data.begin(), t.data.end(), [](double x) { return std::isfinite(x); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw std::invalid_argument("max_abs_diff: size mismatch");
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs(const Tensor& t) {
  double m = 0;
  for (double x : t.data) m = std::max(m, std::abs(x));
  return m;
}

// ---------------------------------------------------------------- Graph

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, tracking_, {}});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::param(ParamStore& store, const std::string& name) {
  if (auto it = params_.find(name); it != params_.end()) return it->second;
  Var v = leaf(store.at(name).value);
  params_.emplace(name, v);
  return v;
}

Tensor& Graph::grad(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor(n.value.shape);
  return n.grad;
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs,
                  std::function<void(Graph&, Var)> back) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(back));
}

Var Graph::record(Tensor value, const std::vector<Var>& inputs,
                  std::function<void(Graph&, Var)> back) {
  bool needs = false;
  if (tracking_)
    for (Var in : inputs)
      if (in.valid() && node(in).needs_grad) needs = true;
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(back) : nullptr});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Graph::backward(Var root) {
  if (value(root).numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  backward(root, Tensor(value(root).shape, 1.0));
}

void Graph::backward(Var root, const Tensor& seed) {
  if (!tracking_) throw std::logic_error("backward on a non-tracking graph");
  Tensor& g = grad(root);
  for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += seed[i];
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.needs_grad && n.back && !n.grad.empty()) n.back(*this, Var{id});
  }
}

void Graph::accumulate_param_grads(ParamStore& store) const {
  for (const auto& [name, v] : params_) {
    const Node& n = node(v);
    if (n.grad.empty()) continue;
    Tensor& dst = store.at(name).grad;
    for (std::int64_t i = 0; i < dst.numel(); ++i) dst[i] += n.grad[i];
  }
}

// ---------------------------------------------------------------- ops

namespace ops {
namespace {

void require(bool cond, const char* op, const std::string& what) {
  if (!cond) throw std::invalid_argument(std::string(op) + ": " + what);
}

void add_into(Tensor& dst, const Tensor& src, double k = 1.0) {
  for (std::int64_t i = 0; i < dst.numel(); ++i) dst[i] += k * src[i];
}

int rows_of(const Tensor& t) { return t.rank() == 0 ? 1 : t.dim(0); }
int row_len(const Tensor& t) { return static_cast<int>(t.numel() / std::max(1, rows_of(t))); }

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var add(Graph& g, Var a, Var b) {
  const Tensor &A = g.value(a), &B = g.value(b);
  require(A.shape == B.shape, "add", shape_str(A.shape) + " vs " + shape_str(B.shape));
  Tensor y = A;
  add_into(y, B);
  return g.record(std::move(y), {a, b}, [a, b](Graph& g, Var self) {
    if (g.needs_grad(a)) add_into(g.grad(a), g.grad(self));
    if (g.needs_grad(b)) add_into(g.grad(b), g.grad(self));
  });
}

Var sub(Graph& g, Var a, Var b) {
  const Tensor &A = g.value(a), &B = g.value(b);
  require(A.shape == B.shape, "sub", shape_str(A.shape) + " vs " + shape_str(B.shape));
  Tensor y = A;
  add_into(y, B, -1.0);
  return g.record(std::move(y), {a, b}, [a, b](Graph& g, Var self) {
    if (g.needs_grad(a)) add_into(g.grad(a), g.grad(self));
    if (g.needs_grad(b)) add_into(g.grad(b), g.grad(self), -1.0);
  });
}

Var mul(Graph& g, Var a, Var b) {
  const Tensor &A = g.value(a), &B = g.value(b);
  require(A.shape == B.shape, "mul", shape_str(A.shape) + " vs " + shape_str(B.shape));
  Tensor y = A;
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] *= B[i];
  return g.record(std::move(y), {a, b}, [a, b](Graph& g, Var self) {
    const Tensor& gy = g.grad(self);
    if (g.needs_grad(a)) {
      Tensor& ga = g.grad(a);
      const Tensor& B = g.value(b);
      for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += gy[i] * B[i];
    }
    if (g.needs_grad(b)) {
      Tensor& gb = g.grad(b);
      const Tensor& A = g.value(a);
      for (std::int64_t i = 0; i < gb.numel(); ++i) gb[i] += gy[i] * A[i];
    }
  });
}

Var scale(Graph& g, Var a, double k) {
  Tensor y = g.value(a);
  for (auto& x : y.data) x *= k;
  return g.record(std::move(y), {a}, [a, k](Graph& g, Var self) {
    add_into(g.grad(a), g.grad(self), k);
  });
}

Var add_row(Graph& g, Var a, Var row) {
  const Tensor &A = g.value(a), &R = g.value(row);
  const int c = static_cast<int>(R.numel());
  require(A.numel() % c == 0 && A.dim(-1) == c, "add_row", "trailing dim mismatch");
  Tensor y = A;
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += R[i % c];
  return g.record(std::move(y), {a, row}, [a, row, c](Graph& g, Var self) {
    const Tensor& gy = g.grad(self);
    if (g.needs_grad(a)) add_into(g.grad(a), gy);
    if (g.needs_grad(row)) {
      Tensor& gr = g.grad(row);
      for (std::int64_t i = 0; i < gy.numel(); ++i) gr[i % c] += gy[i];
    }
  });
}

Var relu(Graph& g, Var a) {
  Tensor y = g.value(a);
  for (auto& x : y.data) x = x < 0 ? 0.0 : x;
  return g.record(std::move(y), {a}, [a](Graph& g, Var self) {
    const Tensor& gy = g.grad(self);
    const Tensor& A = g.value(a);
    Tensor& ga = g.grad(a);
    for (std::int64_t i = 0; i < ga.numel(); ++i)
      if (!(A[i] <= 0)) ga[i] += gy[i];
  });
}

Var reshape(Graph& g, Var a, Shape shape) {
  Tensor y = g.value(a).reshaped(std::move(shape));
  return g.record(std::move(y), {a}, [a](Graph& g, Var self) {
    Tensor& ga = g.grad(a);
    const Tensor& gy = g.grad(self);
    for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += gy[i];
  });
}

Var concat_rows(Graph& g, const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows", "no inputs");
  Shape shape = g.value(parts[0]).shape;
  int rows = 0;
  for (Var p : parts) {
    const Tensor& t = g.value(p);
    require(t.rank() == static_cast<int>(shape.size()), "concat_rows", "rank mismatch");
    for (size_t d = 1; d < shape.size(); ++d)
      require(t.shape[d] == shape[d], "concat_rows", "trailing dims mismatch");
    rows += t.dim(0);
  }
  shape[0] = rows;
  Tensor y(shape);
  std::int64_t pos = 0;
  for (Var p : parts) {
    const Tensor& t = g.value(p);
    std::copy(t.data.begin(), t.data.end(), y.data.begin() + pos);
    pos += t.numel();
  }
  return g.record(std::move(y), parts, [parts](Graph& g, Var self) {
    const Tensor& gy = g.grad(self);
    std::int64_t pos = 0;
    for (Var p : parts) {
      const std::int64_t n = g.value(p).numel();
      if (g.needs_grad(p)) {
        Tensor& gp = g.grad(p);
        for (std::int64_t i = 0; i < n; ++i) gp[i] += gy[pos + i];
      }
      pos += n;
    }
  });
}

Var slice_rows(Graph& g, Var a, int begin, int end) {
  const Tensor& A = g.value(a);
  require(begin >= 0 && end <= A.dim(0) && begin <= end, "slice_rows", "bad range");
  const int rl = row_len(A);
  Shape shape = A.shape;
  shape[0] = end - begin;
  Tensor y(shape);
  std::copy(A.data.begin() + static_cast<long>(begin) * rl, A.data.begin() + static_cast<long>(end) * rl,
            y.data.begin());
  return g.record(std::move(y), {a}, [a, begin, rl](Graph& g, Var self) {
    const Tensor& gy = g.grad(self);
    Tensor& ga = g.grad(a);
    for (std::int64_t i = 0; i < gy.numel(); ++i) ga[static_cast<long>(begin) * rl + i] += gy[i];
  });
}

Var sum(Graph& g, Var a) {
  double s = 0;
  for (double x : g.value(a).data) s += x;
  return g.record(Tensor({1}, s), {a}, [a](Graph& g, Var self) {
    const double gy = g.grad(self)[0];
    for (auto& x : g.grad(a).data) x += gy;
  });
}

Var mean(Graph& g, Var a) {
  const double n = static_cast<double>(g.value(a).numel());
  return scale(g, sum(g, a), 1.0 / n);
}

Var dot(Graph& g, Var a, const Tensor& weights) {
  const Tensor& A = g.value(a);
  require(A.numel() == weights.numel(), "dot", "size mismatch");
  double s = 0;
  for (std::int64_t i = 0; i < A.numel(); ++i) s += A[i] * weights[i];
  return g.record(Tensor({1}, s), {a}, [a, weights](Graph& g, Var self) {
    add_into(g.grad(a), weights, g.grad(self)[0]);
  });
}

Var sum_row_groups(Graph& g, Var a, int group) {
  const Tensor& A = g.value(a);
  require(A.dim(0) % group == 0, "sum_row_groups", "rows not divisible by group");
  const int rl = row_len(A), n = A.dim(0) / group;
  Shape shape = A.shape;
  shape[0] = n;
  Tensor y(shape);
  for (int r = 0; r < n; ++r)
    for (int k = 0; k < group; ++k)
      for (int c = 0; c < rl; ++c)
        y[static_cast<long>(r) * rl + c] += A[(static_cast<long>(r) * group + k) * rl + c];
  return g.record(std::move(y), {a}, [a, group, rl, n](Graph& g, Var self) {
    const Tensor& gy = g.grad(self);
    Tensor& ga = g.grad(a);
    for (int r = 0; r < n; ++r)
      for (int k = 0; k < group; ++k)
        for (int c = 0; c < rl; ++c)
          ga[(static_cast<long>(r) * group + k) * rl + c] += gy[static_cast<long>(r) * rl + c];
  });
}

Var repeat_rows(Graph& g, Var a, int repeat) {
  const Tensor& A = g.value(a);
  const int rl = row_len(A), n = rows_of(A);
  Shape shape = A.shape;
  shape[0] = n * repeat;
  Tensor y(shape);
  for (int r = 0; r < n; ++r)
    for (int k = 0; k < repeat; ++k)
      std::copy(A.data.begin() + static_cast<long>(r) * rl, A.data.begin() + static_cast<long>(r + 1) * rl,
                y.data.begin() + (static_cast<long>(r) * repeat + k) * rl);
  return g.record(std::move(y), {a}, [a, repeat, rl, n](Graph& g, Var self) {
    const Tensor& gy = g.grad(self);
    Tensor& ga = g.grad(a);
    for (int r = 0; r < n; ++r)
      for (int k = 0; k < repeat; ++k)
        for (int c = 0; c < rl; ++c)
          ga[static_cast<long>(r) * rl + c] += gy[(static_cast<long>(r) * repeat + k) * rl + c];
  });
}

Var linear(Graph& g, Var x, Var w, Var b) {
  const Tensor &X = g.value(x), &W = g.value(w);
  require(W.rank() == 2, "linear", "weight must be 2-D");
  const int in = W.dim(0), out = W.dim(1);
  require(X.dim(-1) == in, "linear", "input " + shape_str(X.shape) + " vs weight " + shape_str(W.shape));
  const int n = static_cast<int>(X.numel() / in);
  Shape shape = X.shape;
  shape.back() = out;
  Tensor y(shape);
  if (b.valid()) {
    const Tensor& B = g.value(b);
    require(B.numel() == out, "linear", "bias size");
    for (int r = 0; r < n; ++r)
      std::copy(B.data.begin(), B.data.end(), y.data.begin() + static_cast<long>(r) * out);
  }
  kernels::matmul(X.ptr(), W.ptr(), y.ptr(), n, in, out);
  return g.record(std::move(y), {x, w, b}, [x, w, b, n, in, out](Graph& g, Var self) {
    const Tensor& gy = g.grad(self);
    if (g.needs_grad(x)) kernels::matmul_grad_input(gy.ptr(), g.value(w).ptr(), g.grad(x).ptr(), n, in, out);
    if (g.needs_grad(w)) kernels::matmul_grad_weight(g.value(x).ptr(), gy.ptr(), g.grad(w).ptr(), n, in, out);
    if (b.valid() && g.needs_grad(b)) {
      Tensor& gb = g.grad(b);
      for (int r = 0; r < n; ++r)
        for (int o = 0; o < out; ++o) gb[o] += gy[static_cast<long>(r) * out + o];
    }
  });
}

Var linear_tagged(Graph& g, Var x, Var w, Var tag_bias) {
  const Tensor &X = g.value(x), &W = g.value(w), &TB = g.value(tag_bias);
  const int in = W.dim(0), out = W.dim(1), tags = TB.dim(0);
  require(X.rank() == 2 && X.dim(1) == in, "linear_tagged", "input shape");
  require(TB.rank() == 2 && TB.dim(1) == out, "linear_tagged", "tag bias shape");
  const int n = X.dim(0);
  Tensor base({n, out});
  kernels::matmul(X.ptr(), W.ptr(), base.ptr(), n, in, out);
  Tensor y({n * tags, out});
  for (int r = 0; r < n; ++r)
    for (int t = 0; t < tags; ++t)
      for (int o = 0; o < out; ++o)
        y[(static_cast<long>(r) * tags + t) * out + o] = base[static_cast<long>(r) * out + o] + TB[t * out + o];
  return g.record(std::move(y), {x, w, tag_bias}, [x, w, tag_bias, n, in, out, tags](Graph& g, Var self) {
    const Tensor& gy = g.grad(self);
    Tensor gbase({n, out});
    for (int r = 0; r < n; ++r)
      for (int t = 0; t < tags; ++t)
        for (int o = 0; o < out; ++o) gbase[static_cast<long>(r) * out + o] += gy[(static_cast<long>(r) * tags + t) * out + o];
    if (g.needs_grad(x)) kernels::matmul_grad_input(gbase.ptr(), g.value(w).ptr(), g.grad(x).ptr(), n, in, out);
    if (g.needs_grad(w)) kernels::matmul_grad_weight(g.value(x).ptr(), gbase.ptr(), g.grad(w).ptr(), n, in, out);
    if (g.needs_grad(tag_bias)) {
      Tensor& gt = g.grad(tag_bias);
      for (int r = 0; r < n; ++r)
        for (int t = 0; t < tags; ++t)
          for (int o = 0; o < out; ++o) gt[t * out + o] += gy[(static_cast<long>(r) * tags + t) * out + o];
    }
  });
}

Var softmax(Graph& g, Var a, int axis_len, int inner) {
  const Tensor& A = g.value(a);
  const long group = static_cast<long>(axis_len) * inner;
  require(axis_len > 0 && inner > 0 && A.numel() % group == 0, "softmax", "shape not divisible");
  const long outer = A.numel() / group;
  Tensor y(A.shape);
  for (long o = 0; o < outer; ++o)
    for (int i = 0; i < inner; ++i) {
      const long base = o * group + i;
      double mx = -INFINITY;
      for (int k = 0; k < axis_len; ++k) mx = std::max(mx, A[base + static_cast<long>(k) * inner]);
      double s = 0;
      for (int k = 0; k < axis_len; ++k) {
        const double e = std::exp(A[base + static_cast<long>(k) * inner] - mx);
        y[base + static_cast<long>(k) * inner] = e;
        s += e;
      }
      for (int k = 0; k < axis_len; ++k) y[base + static_cast<long>(k) * inner] /= s;
    }
  return g.record(std::move(y), {a}, [a, axis_len, inner, outer, group](Graph& g, Var self) {
    const Tensor& Y = g.value(self);
    const Tensor& gy = g.grad(self);
    Tensor& ga = g.grad(a);
    for (long o = 0; o < outer; ++o)
      for (int i = 0; i < inner; ++i) {
        const long base = o * group + i;
        double dotp = 0;
        for (int k = 0; k < axis_len; ++k) {
          const long idx = base + static_cast<long>(k) * inner;
          dotp += Y[idx] * gy[idx];
        }
        for (int k = 0; k < axis_len; ++k) {
          const long idx = base + static_cast<long>(k) * inner;
          ga[idx] += Y[idx] * (gy[idx] - dotp);
        }
      }
  });
}

Var normalize_rows(Graph& g, Var a) {
  const Tensor& A = g.value(a);
  require(A.rank() == 2, "normalize_rows", "expects (n, c)");
  const int n = A.dim(0), c = A.dim(1);
  Tensor y(A.shape);
  std::vector<double> sums(static_cast<size_t>(n));
  for (int r = 0; r < n; ++r) {
    double s = 0;
    for (int k = 0; k < c; ++k) s += A[static_cast<long>(r) * c + k];
    require(!(s <= 0), "normalize_rows", "row sum must be positive");
    sums[static_cast<size_t>(r)] = s;
    for (int k = 0; k < c; ++k) y[static_cast<long>(r) * c + k] = A[static_cast<long>(r) * c + k] / s;
  }
  return g.record(std::move(y), {a}, [a, n, c, sums = std::move(sums)](Graph& g, Var self) {
    const Tensor& Y = g.value(self);
    const Tensor& gy = g.grad(self);
    Tensor& ga = g.grad(a);
    for (int r = 0; r < n; ++r) {
      const long base = static_cast<long>(r) * c;
      double dotp = 0;
      for (int k = 0; k < c; ++k) dotp += Y[base + k] * gy[base + k];
      for (int k = 0; k < c; ++k) ga[base + k] += (gy[base + k] - dotp) / sums[static_cast<size_t>(r)];
    }
  });
}

Var layer_norm(Graph& g, Var x, Var gamma, Var beta, double eps) {
  const Tensor& X = g.value(x);
  const int c = X.dim(-1);
  const long n = X.numel() / c;
  require(g.value(gamma).numel() == c && g.value(beta).numel() == c, "layer_norm", "affine size");
  const Tensor &G = g.value(gamma), &B = g.value(beta);
  Tensor y(X.shape);
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(X.numel()));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  for (long r = 0; r < n; ++r) {
    double mu = 0, var = 0;
    for (int k = 0; k < c; ++k) mu += X[r * c + k];
    mu /= c;
    for (int k = 0; k < c; ++k) var += (X[r * c + k] - mu) * (X[r * c + k] - mu);
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = is;
    for (int k = 0; k < c; ++k) {
      const double xh = (X[r * c + k] - mu) * is;
      (*xhat)[static_cast<size_t>(r * c + k)] = xh;
      y[r * c + k] = G[k] * xh + B[k];
    }
  }
  return g.record(std::move(y), {x, gamma, beta}, [x, gamma, beta, c, n, xhat, inv_std](Graph& g, Var self) {
    const Tensor& gy = g.grad(self);
    const Tensor& G = g.value(gamma);
    if (g.needs_grad(gamma) || g.needs_grad(beta)) {
      Tensor& gg = g.grad(gamma);
      Tensor& gb = g.grad(beta);
      for (long r = 0; r < n; ++r)
        for (int k = 0; k < c; ++k) {
          gg[k] += gy[r * c + k] * (*xhat)[static_cast<size_t>(r * c + k)];
          gb[k] += gy[r * c + k];
        }
    }
    if (g.needs_grad(x)) {
      Tensor& gx = g.grad(x);
      for (long r = 0; r < n; ++r) {
        double m1 = 0, m2 = 0;
        for (int k = 0; k < c; ++k) {
          const double dxh = gy[r * c + k] * G[k];
          m1 += dxh;
          m2 += dxh * (*xhat)[static_cast<size_t>(r * c + k)];
        }
        m1 /= c;
        m2 /= c;
        const double is = (*inv_std)[static_cast<size_t>(r)];
        for (int k = 0; k < c; ++k) {
          const double dxh = gy[r * c + k] * G[k];
          gx[r * c + k] += is * (dxh - m1 - (*xhat)[static_cast<size_t>(r * c + k)] * m2);
        }
      }
    }
  });
}

Var conv2d(Graph& g, Var x, Var w, Var b, int stride, int pad) {
  const Tensor &X = g.value(x), &W = g.value(w);
  require(X.rank() == 4 && W.rank() == 4, "conv2d", "NHWC input and (k,k,in,out) weights");
  require(W.dim(0) == W.dim(1) && W.dim(2) == X.dim(3), "conv2d",
          "input " + shape_str(X.shape) + " vs weight " + shape_str(W.shape));
  kernels::ConvDims d{X.dim(0), X.dim(1), X.dim(2), X.dim(3), W.dim(0), stride, pad, W.dim(3)};
  Tensor y({d.batch, d.out_h(), d.out_w(), d.out_c});
  if (b.valid()) {
    const Tensor& B = g.value(b);
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = B[i % d.out_c];
  }
  kernels::conv2d(d, X.ptr(), W.ptr(), y.ptr());
  return g.record(std::move(y), {x, w, b}, [x, w, b, d](Graph& g, Var self) {
    const Tensor& gy = g.grad(self);
    if (g.needs_grad(x)) kernels::conv2d_grad_input(d, gy.ptr(), g.value(w).ptr(), g.grad(x).ptr());
    if (g.needs_grad(w)) kernels::conv2d_grad_weight(d, g.value(x).ptr(), gy.ptr(), g.grad(w).ptr());
    if (b.valid() && g.needs_grad(b)) {
      Tensor& gb = g.grad(b);
      for (std::int64_t i = 0; i < gy.numel(); ++i) gb[i % d.out_c] += gy[i];
    }
  });
}

Var grid_sample(Graph& g, Var map, std::vector<double> uv, std::vector<char> valid, double fill) {
  const Tensor& Mp = g.value(map);
  require(Mp.rank() == 3, "grid_sample", "map must be (rows, cols, c)");
  const int rows = Mp.dim(0), cols = Mp.dim(1), c = Mp.dim(2);
  const int n = static_cast<int>(valid.size());
  require(static_cast<int>(uv.size()) == 2 * n, "grid_sample", "uv size");
  Tensor y({n, c});
  for (int r = 0; r < n; ++r) {
    if (!valid[static_cast<size_t>(r)]) {
      for (int k = 0; k < c; ++k) y[static_cast<long>(r) * c + k] = fill;
      continue;
    }
    const BilinearTap t = bilinear_tap(uv[2 * r], uv[2 * r + 1], rows, cols);
    for (int k = 0; k < c; ++k)
      y[static_cast<long>(r) * c + k] = t.w00() * Mp[(t.v0 * cols + t.u0) * c + k] +
                                        t.w01() * Mp[(t.v0 * cols + t.u1) * c + k] +
                                        t.w10() * Mp[(t.v1 * cols + t.u0) * c + k] +
                                        t.w11() * Mp[(t.v1 * cols + t.u1) * c + k];
  }
  return g.record(std::move(y), {map},
                  [map, uv = std::move(uv), valid = std::move(valid), rows, cols, c, n](Graph& g, Var self) {
                    const Tensor& gy = g.grad(self);
                    Tensor& gm = g.grad(map);
                    for (int r = 0; r < n; ++r) {
                      if (!valid[static_cast<size_t>(r)]) continue;
                      const BilinearTap t = bilinear_tap(uv[2 * r], uv[2 * r + 1], rows, cols);
                      for (int k = 0; k < c; ++k) {
                        const double v = gy[static_cast<long>(r) * c + k];
                        gm[(t.v0 * cols + t.u0) * c + k] += v * t.w00();
                        gm[(t.v0 * cols + t.u1) * c + k] += v * t.w01();
                        gm[(t.v1 * cols + t.u0) * c + k] += v * t.w10();
                        gm[(t.v1 * cols + t.u1) * c + k] += v * t.w11();
                      }
                    }
                  });
}

Var deform_sample(Graph& g, Var values, Var offsets, Var attn,
                  std::shared_ptr<const std::vector<kernels::SampleEntry>> entries, int out_rows,
                  int heads, int points) {
  const Tensor &V = g.value(values), &O = g.value(offsets), &A = g.value(attn);
  require(V.rank() == 4, "deform_sample", "values must be (maps, rows, cols, c)");
  kernels::DeformDims d{V.dim(0), V.dim(1), V.dim(2), V.dim(3), heads, points};
  require(d.channels % heads == 0, "deform_sample", "channels not divisible by heads");
  require(O.dim(-1) == d.offset_stride() && A.dim(-1) == d.weight_stride(), "deform_sample",
          "offset / weight row length");
  const int p_rows = static_cast<int>(A.numel() / d.weight_stride());
  require(O.numel() / d.offset_stride() == p_rows, "deform_sample", "offset / weight rows");
  for (const auto& e : *entries) {
    if (e.out_row < 0 || e.out_row >= out_rows || e.param_row < 0 || e.param_row >= p_rows ||
        e.map < 0 || e.map >= d.n_maps)
      throw std::invalid_argument("deform_sample: entry out of range");
    if (!std::isfinite(e.u) || !std::isfinite(e.v))
      throw std::invalid_argument("deform_sample: non-finite reference location");
  }
  Tensor y({out_rows, d.channels});
  kernels::deform_sample(d, V.ptr(), *entries, O.ptr(), A.ptr(), y.ptr());
  return g.record(std::move(y), {values, offsets, attn}, [values, offsets, attn, entries, d](Graph& g, Var self) {
    kernels::deform_sample_backward(d, g.value(values).ptr(), *entries, g.value(offsets).ptr(),
                                    g.value(attn).ptr(), g.grad(self).ptr(),
                                    g.needs_grad(values) ? g.grad(values).ptr() : nullptr,
                                    g.needs_grad(offsets) ? g.grad(offsets).ptr() : nullptr,
                                    g.needs_grad(attn) ? g.grad(attn).ptr() : nullptr);
  });
}

Var neighbor_sample(Graph& g, Var features, Var offsets,
                    std::shared_ptr<const std::vector<kernels::ViewGeometry>> views,
                    std::shared_ptr<const std::vector<double>> base, int neighbors) {
  const Tensor &F = g.value(features), &O = g.value(offsets);
  require(F.rank() == 4 && F.dim(0) == static_cast<int>(views->size()), "neighbor_sample",
          "features must be (n_view, rows, cols, c)");
  const int n_points = static_cast<int>(base->size() / 3);
  require(O.numel() == static_cast<long>(n_points) * neighbors * 2, "neighbor_sample", "offset count");
  kernels::NeighborDims d{F.dim(0), F.dim(1), F.dim(2), F.dim(3), neighbors};
  Tensor y({n_points * neighbors, d.channels});
  kernels::neighbor_sample(d, F.ptr(), *views, base->data(), O.ptr(), n_points, y.ptr());
  return g.record(std::move(y), {features, offsets}, [features, offsets, views, base, d, n_points](Graph& g, Var self) {
    kernels::neighbor_sample_backward(d, g.value(features).ptr(), *views, base->data(),
                                      g.value(offsets).ptr(), n_points, g.grad(self).ptr(),
                                      g.needs_grad(features) ? g.grad(features).ptr() : nullptr,
                                      g.needs_grad(offsets) ? g.grad(offsets).ptr() : nullptr);
  });
}

Var weighted_neighbor_sum(Graph& g, Var center, Var neighbor_feats, Var weights, int neighbors) {
  const Tensor &Cn = g.value(center), &X = g.value(neighbor_feats), &Wt = g.value(weights);
  require(Cn.rank() == 2, "weighted_neighbor_sum", "center must be (q, c)");
  const int q = Cn.dim(0), c = Cn.dim(1);
  require(X.numel() == static_cast<long>(q) * neighbors * c && Wt.numel() == X.numel(),
          "weighted_neighbor_sum", "neighbor / weight shape");
  Tensor y = Cn;
  for (int r = 0; r < q; ++r)
    for (int k = 0; k < neighbors; ++k)
      for (int j = 0; j < c; ++j) {
        const long idx = (static_cast<long>(r) * neighbors + k) * c + j;
        y[static_cast<long>(r) * c + j] += Wt[idx] * X[idx];
      }
  return g.record(std::move(y), {center, neighbor_feats, weights},
                  [center, neighbor_feats, weights, q, c, neighbors](Graph& g, Var self) {
                    const Tensor& gy = g.grad(self);
                    if (g.needs_grad(center)) add_into(g.grad(center), gy);
                    const bool gx = g.needs_grad(neighbor_feats), gw = g.needs_grad(weights);
                    if (!gx && !gw) return;
                    const Tensor &X = g.value(neighbor_feats), &Wt = g.value(weights);
                    for (int r = 0; r < q; ++r)
                      for (int k = 0; k < neighbors; ++k)
                        for (int j = 0; j < c; ++j) {
                          const long idx = (static_cast<long>(r) * neighbors + k) * c + j;
                          const double v = gy[static_cast<long>(r) * c + j];
                          if (gx) g.grad(neighbor_feats)[idx] += v * Wt[idx];
                          if (gw) g.grad(weights)[idx] += v * X[idx];
                        }
                  });
}

Var cross_entropy_probs(Graph& g, Var probs, const Tensor& target, double floor) {
  const Tensor& P = g.value(probs);
  require(P.shape == target.shape, "cross_entropy_probs",
          shape_str(P.shape) + " vs " + shape_str(target.shape));
  const int rows = rows_of(P);
  double s = 0;
  for (std::int64_t i = 0; i < P.numel(); ++i) s += target[i] * std::log(std::max(P[i], floor));
  return g.record(Tensor({1}, -s / rows), {probs}, [probs, target, floor, rows](Graph& g, Var self) {
    const double gy = g.grad(self)[0];
    const Tensor& P = g.value(probs);
    Tensor& gp = g.grad(probs);
    for (std::int64_t i = 0; i < P.numel(); ++i)
      if (P[i] > floor) gp[i] += -gy * target[i] / (P[i] * rows);
  });
}

Var focal_loss(Graph& g, Var logits, const Tensor& targets, double alpha, double gamma,
               double normalizer) {
  const Tensor& L = g.value(logits);
  require(L.shape == targets.shape, "focal_loss", shape_str(L.shape) + " vs " + shape_str(targets.shape));
  require(normalizer > 0, "focal_loss", "normalizer must be positive");
  double s = 0;
  for (std::int64_t i = 0; i < L.numel(); ++i) {
    const double x = L[i], p = sigmoid(x);
    if (targets[i] > 0.5)
      s += alpha * std::pow(1 - p, gamma) * softplus(-x);
    else
      s += (1 - alpha) * std::pow(p, gamma) * softplus(x);
  }
  return g.record(Tensor({1}, s / normalizer), {logits},
                  [logits, targets, alpha, gamma, normalizer](Graph& g, Var self) {
                    const double gy = g.grad(self)[0] / normalizer;
                    const Tensor& L = g.value(logits);
                    Tensor& gl = g.grad(logits);
                    for (std::int64_t i = 0; i < L.numel(); ++i) {
                      const double x = L[i], p = sigmoid(x);
                      double d;
                      if (targets[i] > 0.5)
                        d = alpha * (-gamma * std::pow(1 - p, gamma) * p * softplus(-x) -
                                     std::pow(1 - p, gamma + 1));
                      else
                        d = (1 - alpha) * (gamma * std::pow(p, gamma) * (1 - p) * softplus(x) +
                                           std::pow(p, gamma + 1));
                      gl[i] += gy * d;
                    }
                  });
}

Var masked_l1(Graph& g, Var pred, const Tensor& target, const std::vector<char>& mask) {
  const Tensor& P = g.value(pred);
  require(P.shape == target.shape, "masked_l1", shape_str(P.shape) + " vs " + shape_str(target.shape));
  const int rows = rows_of(P), cols = row_len(P);
  require(static_cast<int>(mask.size()) == rows, "masked_l1", "mask length");
  int n_pos = 0;
  for (char m : mask) n_pos += m ? 1 : 0;
  double s = 0;
  for (int r = 0; r < rows; ++r)
    if (mask[static_cast<size_t>(r)])
      for (int c = 0; c < cols; ++c) s += std::abs(P[static_cast<long>(r) * cols + c] - target[static_cast<long>(r) * cols + c]);
  const double denom = n_pos > 0 ? static_cast<double>(n_pos) * cols : 1.0;
  return g.record(Tensor({1}, n_pos > 0 ? s / denom : 0.0), {pred},
                  [pred, target, mask, rows, cols, denom](Graph& g, Var self) {
                    const double gy = g.grad(self)[0] / denom;
                    const Tensor& P = g.value(pred);
                    Tensor& gp = g.grad(pred);
                    for (int r = 0; r < rows; ++r) {
                      if (!mask[static_cast<size_t>(r)]) continue;
                      for (int c = 0; c < cols; ++c) {
                        const long i = static_cast<long>(r) * cols + c;
                        const double d = P[i] - target[i];
                        gp[i] += gy * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
                      }
                    }
                  });
}

}  // namespace ops
}  // namespace hgbev
