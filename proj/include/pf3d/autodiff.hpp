#pragma once

// Reverse-mode automatic differentiation over dense double-precision arrays.
//
// A Graph records every operation applied to Var handles in execution order
// (define-by-run). Node ids are therefore a topological order. Backward
// closures are themselves written in terms of recorded operations, so the
// gradient of a gradient is available (needed by the R1 penalty) for every
// primitive except the few fused kernels that declare themselves first-order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace pf3d {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when an operation produces NaN or Inf. Carries the offending node.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::string op, int node)
      : std::runtime_error("non-finite value produced by op '" + op + "' at node " + std::to_string(node)),
        op_(std::move(op)),
        node_(node) {}
  const std::string& op() const noexcept { return op_; }
  int node() const noexcept { return node_; }

 private:
  std::string op_;
  int node_;
};

class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(numel_of(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel_of(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t numel() const noexcept { return data_.size(); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    Tensor t(std::move(shape), data_);
    t.requires_grad = requires_grad;
    return t;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool requires_grad = false;

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Graph;

// Lightweight handle to a recorded node.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return graph_ != nullptr; }
  Graph& graph() const { return *graph_; }
  int id() const noexcept { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  double item() const { return value().item(); }
  bool requires_grad() const;

 private:
  friend class Graph;
  Var(Graph* g, int id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  int id_ = -1;
};

// Returns one gradient per input; an invalid Var means "no contribution".
using BackwardFn = std::function<std::vector<Var>(const Var& out, const Var& grad_out)>;

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(Tensor value, bool requires_grad, std::string name = {}) {
    if (!value.all_finite()) throw NonFiniteError("input:" + name, static_cast<int>(nodes_.size()));
    Node n;
    n.op = name.empty() ? "input" : "input:" + name;
    n.requires_grad = requires_grad;
    value.requires_grad = requires_grad;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var input(const Tensor& value) { return input(value, value.requires_grad); }
  Var constant(Tensor value) { return input(std::move(value), false, "const"); }
  Var scalar(double v) { return constant(Tensor::scalar(v)); }

  // Records an op. `backward` may be empty for ops that are not differentiable
  // beyond this order; reaching such a node during a backward pass throws.
  Var record(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    const int id = static_cast<int>(nodes_.size());
    if (!value.all_finite()) throw NonFiniteError(op, id);
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    bool any = false;
    n.inputs.reserve(inputs.size());
    for (const Var& v : inputs) {
      if (v.graph_ != this) throw std::logic_error("op '" + n.op + "' mixes vars from different graphs");
      n.inputs.push_back(v.id_);
      any = any || nodes_[v.id_].requires_grad;
    }
    n.requires_grad = any && !no_grad_;
    if (n.requires_grad) n.backward = std::move(backward);
    n.value.requires_grad = n.requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, id);
  }

  const Tensor& value(const Var& v) const { return nodes_.at(v.id_).value; }
  bool requires_grad(const Var& v) const { return nodes_.at(v.id_).requires_grad; }
  const std::string& op_name(const Var& v) const { return nodes_.at(v.id_).op; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool grad_enabled() const noexcept { return !no_grad_; }

  // Gradient of the sum of `roots` (each summed to a scalar) w.r.t. `wrt`.
  // With create_graph the returned gradients are differentiable themselves.
  std::vector<Var> gradients(std::span<const Var> roots, std::span<const Var> wrt, bool create_graph = false);

  std::vector<Var> gradients(const Var& root, std::span<const Var> wrt, bool create_graph = false) {
    return gradients(std::span<const Var>(&root, 1), wrt, create_graph);
  }

  class NoGradGuard {
   public:
    explicit NoGradGuard(Graph& g) : g_(g), prev_(g.no_grad_) { g_.no_grad_ = true; }
    ~NoGradGuard() { g_.no_grad_ = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    Graph& g_;
    bool prev_;
  };

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<int> inputs;
    bool requires_grad = false;
    BackwardFn backward;
  };

  // deque: references stay valid while backward closures append new nodes.
  std::deque<Node> nodes_;
  bool no_grad_ = false;
};

inline const Tensor& Var::value() const { return graph_->value(*this); }
inline bool Var::requires_grad() const { return graph_->requires_grad(*this); }

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

namespace detail {

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class F>
Tensor map_unary(const Tensor& x, F f) {
  Tensor out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  auto pa = a.data();
  auto pb = b.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = f(pa[i], pb[i]);
  return out;
}

inline double stable_softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

using Index = std::shared_ptr<const std::vector<std::size_t>>;

}  // namespace detail

Var broadcast_to(const Var& x, const Shape& target);
Var sum_to(const Var& x, const Shape& target);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& x);
Var scale(const Var& x, double c);
Var add_scalar(const Var& x, double c);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var sum(const Var& x);
Var mean(const Var& x);
Var reshape(const Var& x, Shape shape);
Var gather(const Var& x, detail::Index idx, Shape out_shape);
Var scatter_add(const Var& src, detail::Index idx, Shape out_shape);
Var gather_rows(const Var& x, detail::Index rows);
Var scatter_rows_add(const Var& src, detail::Index rows, std::size_t n_rows);

namespace detail {
// Pairs up operands for elementwise binary ops: equal shapes, or one side is
// a scalar / trailing-suffix shape of the other and gets broadcast.
inline std::pair<Var, Var> align(const Var& a, const Var& b, const char* op) {
  if (a.shape() == b.shape()) return {a, b};
  if (a.numel() == 1 || is_suffix(a.shape(), b.shape())) return {broadcast_to(a, b.shape()), b};
  if (b.numel() == 1 || is_suffix(b.shape(), a.shape())) return {a, broadcast_to(b, a.shape())};
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
}
}  // namespace detail

inline Var broadcast_to(const Var& x, const Shape& target) {
  if (x.shape() == target) return x;
  const std::size_t n = x.numel();
  if (!(n == 1 || detail::is_suffix(x.shape(), target)))
    throw ShapeError("broadcast_to: " + shape_str(x.shape()) + " -> " + shape_str(target));
  Tensor out(target);
  auto src = x.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = src[i % n];
  const Shape src_shape = x.shape();
  return x.graph().record("broadcast_to", std::move(out), {x}, [src_shape](const Var&, const Var& g) {
    return std::vector<Var>{sum_to(g, src_shape)};
  });
}

inline Var sum_to(const Var& x, const Shape& target) {
  if (x.shape() == target) return x;
  const std::size_t n = numel_of(target);
  if (!(n == 1 || detail::is_suffix(target, x.shape())))
    throw ShapeError("sum_to: " + shape_str(x.shape()) + " -> " + shape_str(target));
  Tensor out(target);
  auto src = x.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i % n] += src[i];
  const Shape src_shape = x.shape();
  return x.graph().record("sum_to", std::move(out), {x}, [src_shape](const Var&, const Var& g) {
    return std::vector<Var>{broadcast_to(g, src_shape)};
  });
}

inline Var add(const Var& a0, const Var& b0) {
  auto [a, b] = detail::align(a0, b0, "add");
  Tensor out = detail::map_binary(a.value(), b.value(), [](double x, double y) { return x + y; });
  return a.graph().record("add", std::move(out), {a, b},
                          [](const Var&, const Var& g) { return std::vector<Var>{g, g}; });
}

inline Var sub(const Var& a0, const Var& b0) {
  auto [a, b] = detail::align(a0, b0, "sub");
  Tensor out = detail::map_binary(a.value(), b.value(), [](double x, double y) { return x - y; });
  return a.graph().record("sub", std::move(out), {a, b},
                          [](const Var&, const Var& g) { return std::vector<Var>{g, neg(g)}; });
}

inline Var mul(const Var& a0, const Var& b0) {
  auto [a, b] = detail::align(a0, b0, "mul");
  Tensor out = detail::map_binary(a.value(), b.value(), [](double x, double y) { return x * y; });
  return a.graph().record("mul", std::move(out), {a, b}, [a, b](const Var&, const Var& g) {
    return std::vector<Var>{a.requires_grad() ? mul(g, b) : Var{}, b.requires_grad() ? mul(g, a) : Var{}};
  });
}

inline Var div(const Var& a0, const Var& b0) {
  auto [a, b] = detail::align(a0, b0, "div");
  Tensor out = detail::map_binary(a.value(), b.value(), [](double x, double y) { return x / y; });
  return a.graph().record("div", std::move(out), {a, b}, [a, b](const Var& out, const Var& g) {
    Var ga = a.requires_grad() ? div(g, b) : Var{};
    Var gb = b.requires_grad() ? neg(div(mul(g, out), b)) : Var{};
    return std::vector<Var>{ga, gb};
  });
}

inline Var neg(const Var& x) {
  return x.graph().record("neg", detail::map_unary(x.value(), [](double v) { return -v; }), {x},
                          [](const Var&, const Var& g) { return std::vector<Var>{neg(g)}; });
}

inline Var scale(const Var& x, double c) {
  return x.graph().record("scale", detail::map_unary(x.value(), [c](double v) { return c * v; }), {x},
                          [c](const Var&, const Var& g) { return std::vector<Var>{scale(g, c)}; });
}

inline Var add_scalar(const Var& x, double c) {
  return x.graph().record("add_scalar", detail::map_unary(x.value(), [c](double v) { return v + c; }), {x},
                          [](const Var&, const Var& g) { return std::vector<Var>{g}; });
}

inline Var exp(const Var& x) {
  return x.graph().record("exp", detail::map_unary(x.value(), [](double v) { return std::exp(v); }), {x},
                          [](const Var& out, const Var& g) { return std::vector<Var>{mul(g, out)}; });
}

inline Var log(const Var& x) {
  return x.graph().record("log", detail::map_unary(x.value(), [](double v) { return std::log(v); }), {x},
                          [x](const Var&, const Var& g) { return std::vector<Var>{div(g, x)}; });
}

inline Var sigmoid(const Var& x) {
  return x.graph().record("sigmoid", detail::map_unary(x.value(), detail::stable_sigmoid), {x},
                          [](const Var& out, const Var& g) {
                            // s' = s (1 - s)
                            return std::vector<Var>{mul(g, sub(out, mul(out, out)))};
                          });
}

inline Var softplus(const Var& x) {
  return x.graph().record("softplus", detail::map_unary(x.value(), detail::stable_softplus), {x},
                          [x](const Var&, const Var& g) { return std::vector<Var>{mul(g, sigmoid(x))}; });
}

inline Var tanh(const Var& x) {
  return x.graph().record("tanh", detail::map_unary(x.value(), [](double v) { return std::tanh(v); }), {x},
                          [](const Var& out, const Var& g) {
                            return std::vector<Var>{sub(g, mul(g, mul(out, out)))};
                          });
}

Var cos(const Var& x);

inline Var sin(const Var& x) {
  return x.graph().record("sin", detail::map_unary(x.value(), [](double v) { return std::sin(v); }), {x},
                          [x](const Var&, const Var& g) { return std::vector<Var>{mul(g, cos(x))}; });
}

inline Var cos(const Var& x) {
  return x.graph().record("cos", detail::map_unary(x.value(), [](double v) { return std::cos(v); }), {x},
                          [x](const Var&, const Var& g) { return std::vector<Var>{neg(mul(g, sin(x)))}; });
}

inline Var square(const Var& x) {
  return x.graph().record("square", detail::map_unary(x.value(), [](double v) { return v * v; }), {x},
                          [x](const Var&, const Var& g) { return std::vector<Var>{scale(mul(g, x), 2.0)}; });
}

// |x|; subgradient 0 at x = 0.
inline Var abs(const Var& x) {
  Tensor sign = detail::map_unary(x.value(), [](double v) { return double((v > 0) - (v < 0)); });
  Graph& g0 = x.graph();
  return g0.record("abs", detail::map_unary(x.value(), [](double v) { return std::fabs(v); }), {x},
                   [sign = std::move(sign)](const Var& out, const Var& g) {
                     return std::vector<Var>{mul(g, out.graph().constant(sign))};
                   });
}

// max(x, slope * x). At 0 the slope-1 branch is taken.
inline Var leaky_relu(const Var& x, double slope) {
  Tensor mask = detail::map_unary(x.value(), [slope](double v) { return v >= 0.0 ? 1.0 : slope; });
  Tensor out = detail::map_binary(x.value(), mask, [](double v, double m) { return v * m; });
  return x.graph().record("leaky_relu", std::move(out), {x}, [mask = std::move(mask)](const Var& o, const Var& g) {
    return std::vector<Var>{mul(g, o.graph().constant(mask))};
  });
}

// Elementwise maximum; ties send the gradient to the first argument.
inline Var maximum(const Var& a0, const Var& b0) {
  auto [a, b] = detail::align(a0, b0, "maximum");
  Tensor pick_a = detail::map_binary(a.value(), b.value(), [](double x, double y) { return x >= y ? 1.0 : 0.0; });
  Tensor out = detail::map_binary(a.value(), b.value(), [](double x, double y) { return x >= y ? x : y; });
  return a.graph().record("maximum", std::move(out), {a, b}, [pick_a = std::move(pick_a)](const Var& o, const Var& g) {
    Tensor pick_b = detail::map_unary(pick_a, [](double v) { return 1.0 - v; });
    Graph& gr = o.graph();
    return std::vector<Var>{mul(g, gr.constant(pick_a)), mul(g, gr.constant(pick_b))};
  });
}

inline Var matmul(const Var& a, const Var& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto m = static_cast<Eigen::Index>(a.shape()[0]);
  const auto k = static_cast<Eigen::Index>(a.shape()[1]);
  const auto n = static_cast<Eigen::Index>(b.shape()[1]);
  Tensor out(Shape{a.shape()[0], b.shape()[1]});
  Eigen::Map<const RowMat> ma(a.value().data().data(), m, k);
  Eigen::Map<const RowMat> mb(b.value().data().data(), k, n);
  Eigen::Map<RowMat> mo(out.data().data(), m, n);
  mo.noalias() = ma * mb;
  return a.graph().record("matmul", std::move(out), {a, b}, [a, b](const Var&, const Var& g) {
    Var ga = a.requires_grad() ? matmul(g, transpose(b)) : Var{};
    Var gb = b.requires_grad() ? matmul(transpose(a), g) : Var{};
    return std::vector<Var>{ga, gb};
  });
}

inline Var transpose(const Var& a) {
  if (a.shape().size() != 2) throw ShapeError("transpose: rank-2 required, got " + shape_str(a.shape()));
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out(Shape{c, r});
  auto src = a.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  return a.graph().record("transpose", std::move(out), {a},
                          [](const Var&, const Var& g) { return std::vector<Var>{transpose(g)}; });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const Shape src_shape = x.shape();
  return x.graph().record("sum", Tensor::scalar(s), {x}, [src_shape](const Var&, const Var& g) {
    return std::vector<Var>{broadcast_to(g, src_shape)};
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

inline Var reshape(const Var& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  const Shape src_shape = x.shape();
  return x.graph().record("reshape", x.value().reshaped(std::move(shape)), {x},
                          [src_shape](const Var&, const Var& g) { return std::vector<Var>{reshape(g, src_shape)}; });
}

inline detail::Index make_index(std::vector<std::size_t> idx) {
  return std::make_shared<const std::vector<std::size_t>>(std::move(idx));
}

// out.flat[i] = x.flat[idx[i]]
inline Var gather(const Var& x, detail::Index idx, Shape out_shape) {
  if (numel_of(out_shape) != idx->size()) throw ShapeError("gather: index count does not match output shape");
  Tensor out(out_shape);
  auto src = x.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const std::size_t j = (*idx)[i];
    if (j >= src.size()) throw ShapeError("gather: index out of range");
    dst[i] = src[j];
  }
  const Shape src_shape = x.shape();
  return x.graph().record("gather", std::move(out), {x}, [idx, src_shape](const Var&, const Var& g) {
    return std::vector<Var>{scatter_add(g, idx, src_shape)};
  });
}

// out.flat[idx[i]] += src.flat[i]
inline Var scatter_add(const Var& src, detail::Index idx, Shape out_shape) {
  if (src.numel() != idx->size()) throw ShapeError("scatter_add: index count does not match source");
  Tensor out(out_shape);
  auto s = src.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const std::size_t j = (*idx)[i];
    if (j >= dst.size()) throw ShapeError("scatter_add: index out of range");
    dst[j] += s[i];
  }
  const Shape src_shape = src.shape();
  return src.graph().record("scatter_add", std::move(out), {src}, [idx, src_shape](const Var&, const Var& g) {
    return std::vector<Var>{gather(g, idx, src_shape)};
  });
}

inline std::size_t row_width(const Shape& s) {
  if (s.empty()) throw ShapeError("row op on a scalar");
  return numel_of(Shape(s.begin() + 1, s.end()));
}

// Selects rows along the leading axis: out[i] = x[rows[i]].
inline Var gather_rows(const Var& x, detail::Index rows) {
  const std::size_t w = row_width(x.shape());
  const std::size_t n = x.shape()[0];
  Shape out_shape = x.shape();
  out_shape[0] = rows->size();
  Tensor out(out_shape);
  auto src = x.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < rows->size(); ++i) {
    const std::size_t r = (*rows)[i];
    if (r >= n) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(r * w), w, dst.begin() + static_cast<std::ptrdiff_t>(i * w));
  }
  return x.graph().record("gather_rows", std::move(out), {x}, [rows, n](const Var&, const Var& g) {
    return std::vector<Var>{scatter_rows_add(g, rows, n)};
  });
}

inline Var scatter_rows_add(const Var& src, detail::Index rows, std::size_t n_rows) {
  const std::size_t w = row_width(src.shape());
  if (src.shape()[0] != rows->size()) throw ShapeError("scatter_rows_add: row count mismatch");
  Shape out_shape = src.shape();
  out_shape[0] = n_rows;
  Tensor out(out_shape);
  auto s = src.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < rows->size(); ++i) {
    const std::size_t r = (*rows)[i];
    if (r >= n_rows) throw ShapeError("scatter_rows_add: row index out of range");
    for (std::size_t j = 0; j < w; ++j) dst[r * w + j] += s[i * w + j];
  }
  return src.graph().record("scatter_rows_add", std::move(out), {src}, [rows](const Var&, const Var& g) {
    return std::vector<Var>{gather_rows(g, rows)};
  });
}

inline Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  if (x.shape().empty() || begin > end || end > x.shape()[0]) throw ShapeError("slice_rows: bad range");
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return gather_rows(x, make_index(std::move(idx)));
}

// Concatenation along the leading axis; trailing extents must agree.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape tail(parts[0].shape().begin() + (parts[0].shape().empty() ? 0 : 1), parts[0].shape().end());
  std::size_t rows = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.empty()) throw ShapeError("concat: scalar input, reshape to [1] first");
    if (Shape(s.begin() + 1, s.end()) != tail) throw ShapeError("concat: trailing shape mismatch");
    rows += s[0];
  }
  Shape out_shape{rows};
  out_shape.insert(out_shape.end(), tail.begin(), tail.end());
  Tensor out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    offsets.push_back(off);
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off * numel_of(tail)));
    off += p.shape()[0];
  }
  std::vector<std::size_t> lens;
  for (const Var& p : parts) lens.push_back(p.shape()[0]);
  return parts[0].graph().record("concat", std::move(out), parts, [offsets, lens](const Var&, const Var& g) {
    std::vector<Var> grads;
    for (std::size_t i = 0; i < offsets.size(); ++i) grads.push_back(slice_rows(g, offsets[i], offsets[i] + lens[i]));
    return grads;
  });
}

// Euclidean norm of each row of a rank-2 tensor. Subgradient 0 for zero rows.
// First-order only.
inline Var row_norm(const Var& x) {
  if (x.shape().size() != 2) throw ShapeError("row_norm: rank-2 required");
  const std::size_t n = x.shape()[0], w = x.shape()[1];
  Tensor out(Shape{n});
  auto src = x.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < w; ++j) s += src[i * w + j] * src[i * w + j];
    out[i] = std::sqrt(s);
  }
  return x.graph().record("row_norm", std::move(out), {x}, [x, n, w](const Var& out, const Var& g) {
    Tensor gx(x.shape());
    auto xv = x.value().data();
    auto nv = out.value().data();
    auto gv = g.value().data();
    for (std::size_t i = 0; i < n; ++i) {
      if (nv[i] == 0.0) continue;
      const double f = gv[i] / nv[i];
      for (std::size_t j = 0; j < w; ++j) gx[i * w + j] = f * xv[i * w + j];
    }
    return std::vector<Var>{g.graph().record("row_norm_backward", std::move(gx), {g, x, out}, nullptr)};
  });
}

// L2 norm of the whole tensor as a scalar.
inline Var norm(const Var& x) { return reshape(row_norm(reshape(x, Shape{1, x.numel()})), Shape{}); }

// Identity forward; multiplies the incoming gradient by `factor`.
inline Var grad_scale(const Var& x, double factor) {
  return x.graph().record("grad_scale", x.value(), {x},
                          [factor](const Var&, const Var& g) { return std::vector<Var>{scale(g, factor)}; });
}

// Identity forward; blocks gradient flow.
inline Var detach(const Var& x) { return x.graph().constant(x.value()); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }
inline Var operator+(double c, const Var& a) { return add_scalar(a, c); }
inline Var operator-(const Var& a, double c) { return add_scalar(a, -c); }
inline Var operator-(double c, const Var& a) { return add_scalar(neg(a), c); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator/(const Var& a, double c) { return scale(a, 1.0 / c); }

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

inline std::vector<Var> Graph::gradients(std::span<const Var> roots, std::span<const Var> wrt, bool create_graph) {
  if (roots.empty()) throw std::invalid_argument("gradients: no roots");
  int top = -1;
  for (const Var& r : roots) {
    if (r.graph_ != this) throw std::logic_error("gradients: root from another graph");
    top = std::max(top, r.id_);
  }
  std::vector<Var> acc(static_cast<std::size_t>(top) + 1);
  {
    NoGradGuard guard(*this);
    for (const Var& r : roots) {
      Var seed = constant(Tensor(r.shape(), 1.0));
      acc[r.id_] = acc[r.id_].valid() ? add(acc[r.id_], seed) : seed;
    }
  }

  std::unique_ptr<NoGradGuard> guard;
  if (!create_graph) guard = std::make_unique<NoGradGuard>(*this);

  for (int id = top; id >= 0; --id) {
    if (!acc[id].valid()) continue;
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.requires_grad || node.inputs.empty()) continue;
    if (!node.backward)
      throw std::logic_error("op '" + node.op + "' does not support differentiation at this order");
    const std::vector<int> inputs = node.inputs;
    std::vector<Var> g_in = node.backward(Var(this, id), acc[id]);
    for (std::size_t j = 0; j < inputs.size(); ++j) {
      const int in = inputs[j];
      if (j >= g_in.size() || !g_in[j].valid() || !nodes_[static_cast<std::size_t>(in)].requires_grad) continue;
      Var gj = g_in[j];
      if (gj.shape() != nodes_[static_cast<std::size_t>(in)].value.shape())
        throw std::logic_error("op '" + node.op + "' produced a gradient of the wrong shape");
      acc[in] = acc[in].valid() ? add(acc[in], gj) : gj;
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.graph_ != this) throw std::logic_error("gradients: wrt var from another graph");
    if (w.id_ <= top && acc[w.id_].valid()) {
      out.push_back(acc[w.id_]);
    } else {
      NoGradGuard g(*this);
      out.push_back(constant(Tensor(w.shape(), 0.0)));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Named evaluation and finite-difference checking
// ---------------------------------------------------------------------------

using NamedTensors = std::map<std::string, Tensor>;
using NamedVars = std::map<std::string, Var>;

// A re-buildable computation: declared input shapes plus a builder that
// records the graph for one evaluation.
struct Program {
  std::map<std::string, Shape> inputs;
  std::function<NamedVars(Graph&, const NamedVars&)> build;
};

struct Evaluation {
  NamedTensors outputs;
  NamedTensors grads;
};

// Scalar outputs are the roots of the backward pass; grads cover every input
// whose Tensor has requires_grad set.
inline Evaluation evaluate(const Program& program, const NamedTensors& inputs, bool want_grads) {
  Graph g;
  NamedVars vars;
  for (const auto& [name, shape] : program.inputs) {
    auto it = inputs.find(name);
    if (it == inputs.end()) throw ShapeError("evaluate: missing input '" + name + "'");
    if (it->second.shape() != shape)
      throw ShapeError("evaluate: input '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                       shape_str(shape));
    vars.emplace(name, g.input(it->second, want_grads && it->second.requires_grad, name));
  }
  for (const auto& [name, t] : inputs)
    if (!program.inputs.contains(name)) throw ShapeError("evaluate: undeclared input '" + name + "'");

  NamedVars outs = program.build(g, vars);
  Evaluation result;
  std::vector<Var> roots;
  for (const auto& [name, v] : outs) {
    result.outputs.emplace(name, v.value());
    if (v.numel() == 1) roots.push_back(v);
  }
  if (want_grads && !roots.empty()) {
    std::vector<std::string> names;
    std::vector<Var> wrt;
    for (const auto& [name, v] : vars)
      if (v.requires_grad()) {
        names.push_back(name);
        wrt.push_back(v);
      }
    auto grads = g.gradients(roots, wrt);
    for (std::size_t i = 0; i < names.size(); ++i) result.grads.emplace(names[i], grads[i].value());
  }
  return result;
}

using ScalarFn = std::function<Var(Graph&, const NamedVars&)>;

// max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline double finite_diff_check(const ScalarFn& fn, const NamedTensors& point, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");

  auto eval_value = [&](const NamedTensors& at) {
    Graph g;
    NamedVars vars;
    for (const auto& [name, t] : at) vars.emplace(name, g.input(t, false, name));
    Var out = fn(g, vars);
    if (out.numel() != 1) throw ShapeError("finite_diff_check: function is not scalar-valued");
    return out.item();
  };

  Graph g;
  NamedVars vars;
  std::vector<std::string> names;
  std::vector<Var> wrt;
  for (const auto& [name, t] : point) {
    Var v = g.input(t, true, name);
    vars.emplace(name, v);
    names.push_back(name);
    wrt.push_back(v);
  }
  Var out = fn(g, vars);
  if (out.numel() != 1) throw ShapeError("finite_diff_check: function is not scalar-valued");
  auto grads = g.gradients(out, wrt);

  double worst = 0.0;
  NamedTensors probe = point;
  for (std::size_t k = 0; k < names.size(); ++k) {
    Tensor& t = probe.at(names[k]);
    const Tensor& analytic = grads[k].value();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double x0 = t[i];
      t[i] = x0 + step;
      const double fp = eval_value(probe);
      t[i] = x0 - step;
      const double fm = eval_value(probe);
      t[i] = x0;
      const double numeric = (fp - fm) / (2.0 * step);
      const double err = std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace pf3d
