#include "epsilon/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace epsilon {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

thread_local bool g_grad_enabled = true;

// Fixed-order dense kernels. Each output element accumulates its terms in the
// same left-to-right order no matter how the matrix is embedded in a larger
// batch, which keeps results bitwise reproducible and per-sample independent.
// The inner loops run over contiguous output lanes, so they vectorize without
// reordering the reduction.

// C (+)= A[P,Q] . B[Q,R]
void mm(const double* a, const double* b, double* c, std::size_t p, std::size_t q, std::size_t r,
        bool accumulate) {
  for (std::size_t i = 0; i < p; ++i) {
    double* crow = c + i * r;
    if (!accumulate) std::fill(crow, crow + r, 0.0);
    const double* arow = a + i * q;
    for (std::size_t j = 0; j < q; ++j) {
      const double aij = arow[j];
      const double* brow = b + j * r;
      for (std::size_t k = 0; k < r; ++k) crow[k] += aij * brow[k];
    }
  }
}

// C (+)= A^T . B where A is [Q,P] stored row-major (so A^T is [P,Q])
void mm_at(const double* a, const double* b, double* c, std::size_t q, std::size_t p,
           std::size_t r) {
  for (std::size_t i = 0; i < q; ++i) {
    const double* arow = a + i * p;
    const double* brow = b + i * r;
    for (std::size_t j = 0; j < p; ++j) {
      const double aij = arow[j];
      double* crow = c + j * r;
      for (std::size_t k = 0; k < r; ++k) crow[k] += aij * brow[k];
    }
  }
}

// Materialized transpose of a [rows, cols] row-major matrix.
std::vector<double> transposed(const double* m, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = m[i * cols + j];
  }
  return t;
}

[[noreturn]] void shape_error(const std::string& what) { throw std::invalid_argument(what); }

void check_finite_debug(const Node& node) {
#ifndef NDEBUG
  for (double v : node.data) {
    assert(std::isfinite(v) && "non-finite value produced by a forward op");
    (void)v;
  }
#else
  (void)node;
#endif
}

NodePtr make_leaf(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  return node;
}

// Creates the result node of an op. The backward closure is only attached
// when the tape is live and some parent needs gradients.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(const Node&)> backward_fn) {
  auto node = make_leaf(std::move(shape), std::move(data));
  check_finite_debug(*node);
  bool needs_grad = false;
  for (const Tensor& p : parents) {
    if (p.node() && p.node()->requires_grad) needs_grad = true;
  }
  if (g_grad_enabled && needs_grad) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const Tensor& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(node);
}

std::vector<double>& ensure_grad(Node& node) {
  if (node.grad.empty()) node.grad.assign(node.data.size(), 0.0);
  return node.grad;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

// Row-major element strides.
std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      shape_error(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                  " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `shape` as seen from a broadcast result of rank `rank`:
// left-padded with zeros, zero where the dim is 1.
std::vector<std::size_t> broadcast_strides(const Shape& shape, std::size_t rank) {
  std::vector<std::size_t> s(rank, 0);
  const auto own = strides_of(shape);
  const std::size_t pad = rank - shape.size();
  for (std::size_t i = 0; i < shape.size(); ++i) s[pad + i] = shape[i] == 1 ? 0 : own[i];
  return s;
}

// Sums `src` (shaped `src_shape`) into a buffer of shape `target`, where
// `target` broadcasts to `src_shape`. Used to push gradients through
// broadcasts; iteration order is fixed for determinism.
std::vector<double> reduce_to_shape(const std::vector<double>& src, const Shape& src_shape,
                                    const Shape& target) {
  std::vector<double> out(numel(target), 0.0);
  if (src_shape == target) {
    out = src;
    return out;
  }
  const std::size_t rank = src_shape.size();
  const auto tstrides = broadcast_strides(target, rank);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t toff = 0;
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    out[toff] += src[flat];
    for (std::size_t d = rank; d-- > 0;) {
      idx[d]++;
      toff += tstrides[d];
      if (idx[d] < src_shape[d]) break;
      toff -= tstrides[d] * src_shape[d];
      idx[d] = 0;
    }
  }
  return out;
}

void accumulate(Node& node, const std::vector<double>& g, const Shape& g_shape) {
  if (!node.requires_grad) return;
  auto& grad = ensure_grad(node);
  if (g_shape == node.shape) {
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    return;
  }
  const auto reduced = reduce_to_shape(g, g_shape, node.shape);
  for (std::size_t i = 0; i < reduced.size(); ++i) grad[i] += reduced[i];
}

// Splits a shape around `axis` into (outer, n, inner) extents so that element
// (o, j, i) lives at flat index (o*n + j)*inner + i.
struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    shape_error(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdims) {
  Shape out = shape;
  if (keepdims) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

// Generic broadcast binary op. fwd(a, b) -> value, bwd emits (da, db) factors
// per element given upstream g.
template <class Fwd, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA dfa, DB dfb) {
  require_defined(a, name);
  require_defined(b, name);
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape(), name);
  const std::size_t rank = out_shape.size();
  const auto sa = broadcast_strides(a.shape(), rank);
  const auto sb = broadcast_strides(b.shape(), rank);
  const std::size_t n = numel(out_shape);
  std::vector<double> out(n);

  const auto& av = a.node()->data;
  const auto& bv = b.node()->data;
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
      out[flat] = fwd(av[ia], bv[ib]);
      for (std::size_t d = rank; d-- > 0;) {
        idx[d]++;
        ia += sa[d];
        ib += sb[d];
        if (idx[d] < out_shape[d]) break;
        ia -= sa[d] * out_shape[d];
        ib -= sb[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }

  auto an = a.node();
  auto bn = b.node();
  return make_result(
      out_shape, std::move(out), {a, b},
      [an, bn, out_shape, rank, sa, sb, dfa, dfb](const Node& self) {
        const std::size_t n = self.data.size();
        std::vector<double> ga(an->requires_grad ? n : 0);
        std::vector<double> gb(bn->requires_grad ? n : 0);
        std::vector<std::size_t> idx(rank, 0);
        std::size_t ia = 0, ib = 0;
        for (std::size_t flat = 0; flat < n; ++flat) {
          const double g = self.grad[flat];
          const double x = an->data[ia];
          const double y = bn->data[ib];
          if (!ga.empty()) ga[flat] = g * dfa(x, y);
          if (!gb.empty()) gb[flat] = g * dfb(x, y);
          for (std::size_t d = rank; d-- > 0;) {
            idx[d]++;
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out_shape[d]) break;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
          }
        }
        if (!ga.empty()) accumulate(*an, ga, out_shape);
        if (!gb.empty()) accumulate(*bn, gb, out_shape);
      });
}

// Elementwise unary op with pointwise derivative df(x, y) where y = f(x).
template <class Fwd, class Der>
Tensor unary_op(const Tensor& x, const char* name, Fwd fwd, Der der) {
  require_defined(x, name);
  const auto& xv = x.node()->data;
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {x}, [xn, der](const Node& self) {
    auto& grad = ensure_grad(*xn);
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      grad[i] += self.grad[i] * der(xn->data[i], self.data[i]);
    }
  });
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape) {
  std::size_t n = numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(Shape shape, double value) {
  std::size_t n = numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  if (numel(shape) != data.size()) {
    shape_error("from_data: shape " + shape_str(shape) + " needs " + std::to_string(numel(shape)) +
                " values, got " + std::to_string(data.size()));
  }
  return Tensor(make_leaf(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double value) { return Tensor(make_leaf({}, {value})); }

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::size() const {
  require_defined(*this, "size");
  return node_->data.size();
}

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  return node_->data;
}

double Tensor::value() const {
  require_defined(*this, "value");
  if (node_->data.size() != 1) {
    shape_error("value: tensor of shape " + shape_str(node_->shape) + " is not scalar");
  }
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  require_defined(*this, "at");
  if (index.size() != node_->shape.size()) {
    shape_error("at: index rank " + std::to_string(index.size()) + " vs shape " +
                shape_str(node_->shape));
  }
  const auto strides = strides_of(node_->shape);
  std::size_t off = 0, d = 0;
  for (std::size_t i : index) {
    if (i >= node_->shape[d]) shape_error("at: index out of range");
    off += i * strides[d++];
  }
  return node_->data[off];
}

Tensor& Tensor::set_requires_grad(bool on) {
  require_defined(*this, "set_requires_grad");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require_defined(*this, "grad");
  if (node_->grad.empty()) throw std::runtime_error("grad: no gradient present; run backward()");
  return node_->grad;
}

void Tensor::zero_grad() {
  require_defined(*this, "zero_grad");
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& x, double c) {
  return unary_op(
      x, "scale", [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(
      x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor log1pexp(const Tensor& x) {
  return unary_op(
      x, "log1pexp",
      [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::fabs(v))); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(
      x, "sqrt", [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      x, "abs", [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// ---- structural ----

Tensor reshape(const Tensor& x, Shape new_shape) {
  require_defined(x, "reshape");
  if (numel(new_shape) != x.size()) {
    shape_error("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  }
  auto xn = x.node();
  return make_result(std::move(new_shape), xn->data, {x}, [xn](const Node& self) {
    auto& grad = ensure_grad(*xn);
    for (std::size_t i = 0; i < self.grad.size(); ++i) grad[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x, std::size_t axis_a, std::size_t axis_b) {
  require_defined(x, "transpose");
  const Shape& in_shape = x.shape();
  if (axis_a >= in_shape.size() || axis_b >= in_shape.size()) {
    shape_error("transpose: axes (" + std::to_string(axis_a) + ", " + std::to_string(axis_b) +
                ") out of range for " + shape_str(in_shape));
  }
  Shape out_shape = in_shape;
  std::swap(out_shape[axis_a], out_shape[axis_b]);

  const auto in_strides = strides_of(in_shape);
  auto perm_strides = in_strides;  // stride of input as iterated in output order
  std::swap(perm_strides[axis_a], perm_strides[axis_b]);

  const std::size_t n = x.size();
  const std::size_t rank = out_shape.size();
  std::vector<double> out(n);
  const auto& xv = x.node()->data;
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    out[flat] = xv[src];
    for (std::size_t d = rank; d-- > 0;) {
      idx[d]++;
      src += perm_strides[d];
      if (idx[d] < out_shape[d]) break;
      src -= perm_strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }

  auto xn = x.node();
  return make_result(out_shape, std::move(out), {x},
                     [xn, out_shape, perm_strides, rank](const Node& self) {
                       auto& grad = ensure_grad(*xn);
                       std::vector<std::size_t> idx(rank, 0);
                       std::size_t src = 0;
                       for (std::size_t flat = 0; flat < self.grad.size(); ++flat) {
                         grad[src] += self.grad[flat];
                         for (std::size_t d = rank; d-- > 0;) {
                           idx[d]++;
                           src += perm_strides[d];
                           if (idx[d] < out_shape[d]) break;
                           src -= perm_strides[d] * out_shape[d];
                           idx[d] = 0;
                         }
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  require_defined(x, "slice");
  const auto s = split_axis(x.shape(), axis, "slice");
  if (start + len > s.n) {
    shape_error("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                ") exceeds axis extent " + std::to_string(s.n));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  std::vector<double> out(numel(out_shape));
  const auto& xv = x.node()->data;
  for (std::size_t o = 0; o < s.outer; ++o) {
    const double* src = xv.data() + (o * s.n + start) * s.inner;
    double* dst = out.data() + o * len * s.inner;
    std::copy(src, src + len * s.inner, dst);
  }
  auto xn = x.node();
  return make_result(out_shape, std::move(out), {x}, [xn, s, start, len](const Node& self) {
    auto& grad = ensure_grad(*xn);
    for (std::size_t o = 0; o < s.outer; ++o) {
      const double* g = self.grad.data() + o * len * s.inner;
      double* dst = grad.data() + (o * s.n + start) * s.inner;
      for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += g[i];
    }
  });
}

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) shape_error("concat: no inputs");
  for (const Tensor& t : xs) require_defined(t, "concat");
  const Shape& base = xs.front().shape();
  if (axis >= base.size()) {
    shape_error("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(base));
  }
  std::size_t total_axis = 0;
  for (const Tensor& t : xs) {
    const Shape& s = t.shape();
    if (s.size() != base.size()) {
      shape_error("concat: rank mismatch between " + shape_str(base) + " and " + shape_str(s));
    }
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != base[d]) {
        shape_error("concat: shapes " + shape_str(base) + " and " + shape_str(s) +
                    " differ off-axis");
      }
    }
    total_axis += s[axis];
  }
  Shape out_shape = base;
  out_shape[axis] = total_axis;
  const auto os = split_axis(out_shape, axis, "concat");
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (const Tensor& t : xs) {
    const std::size_t extent = t.shape()[axis];
    const auto& tv = t.node()->data;
    for (std::size_t o = 0; o < os.outer; ++o) {
      const double* src = tv.data() + o * extent * os.inner;
      double* dst = out.data() + (o * os.n + offset) * os.inner;
      std::copy(src, src + extent * os.inner, dst);
    }
    offset += extent;
  }

  std::vector<NodePtr> nodes;
  std::vector<std::size_t> extents;
  for (const Tensor& t : xs) {
    nodes.push_back(t.node());
    extents.push_back(t.shape()[axis]);
  }
  return make_result(out_shape, std::move(out), xs, [nodes, extents, os](const Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      const std::size_t extent = extents[k];
      if (nodes[k]->requires_grad) {
        auto& grad = ensure_grad(*nodes[k]);
        for (std::size_t o = 0; o < os.outer; ++o) {
          const double* g = self.grad.data() + (o * os.n + offset) * os.inner;
          double* dst = grad.data() + o * extent * os.inner;
          for (std::size_t i = 0; i < extent * os.inner; ++i) dst[i] += g[i];
        }
      }
      offset += extent;
    }
  });
}

Tensor broadcast_to(const Tensor& x, const Shape& target) {
  require_defined(x, "broadcast_to");
  const Shape check = broadcast_shapes(x.shape(), target, "broadcast_to");
  if (check != target) {
    shape_error("broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " +
                shape_str(target));
  }
  const std::size_t rank = target.size();
  const auto sx = broadcast_strides(x.shape(), rank);
  const std::size_t n = numel(target);
  std::vector<double> out(n);
  const auto& xv = x.node()->data;
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    out[flat] = xv[src];
    for (std::size_t d = rank; d-- > 0;) {
      idx[d]++;
      src += sx[d];
      if (idx[d] < target[d]) break;
      src -= sx[d] * target[d];
      idx[d] = 0;
    }
  }
  auto xn = x.node();
  Shape target_copy = target;
  return make_result(target_copy, std::move(out), {x}, [xn, target_copy](const Node& self) {
    accumulate(*xn, self.grad, target_copy);
  });
}

Tensor take(const Tensor& x, const std::vector<std::size_t>& indices) {
  require_defined(x, "take");
  if (x.rank() != 1) shape_error("take: expects a rank-1 tensor, got " + shape_str(x.shape()));
  const auto& xv = x.node()->data;
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= xv.size()) {
      shape_error("take: index " + std::to_string(indices[i]) + " out of range " +
                  std::to_string(xv.size()));
    }
    out[i] = xv[indices[i]];
  }
  auto xn = x.node();
  auto idx = indices;
  return make_result({indices.size()}, std::move(out), {x}, [xn, idx](const Node& self) {
    auto& grad = ensure_grad(*xn);
    for (std::size_t i = 0; i < idx.size(); ++i) grad[idx[i]] += self.grad[i];
  });
}

// ---- reductions ----

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  const auto& xv = x.node()->data;
  double total = 0.0;
  for (double v : xv) total += v;
  auto xn = x.node();
  return make_result({}, {total}, {x}, [xn](const Node& self) {
    auto& grad = ensure_grad(*xn);
    const double g = self.grad[0];
    for (double& v : grad) v += g;
  });
}

Tensor sum(const Tensor& x, std::size_t axis, bool keepdims) {
  require_defined(x, "sum");
  const auto s = split_axis(x.shape(), axis, "sum");
  Shape out_shape = reduced_shape(x.shape(), axis, keepdims);
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto& xv = x.node()->data;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.n; ++j) {
      const double* src = xv.data() + (o * s.n + j) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  auto xn = x.node();
  return make_result(out_shape, std::move(out), {x}, [xn, s](const Node& self) {
    auto& grad = ensure_grad(*xn);
    for (std::size_t o = 0; o < s.outer; ++o) {
      const double* g = self.grad.data() + o * s.inner;
      for (std::size_t j = 0; j < s.n; ++j) {
        double* dst = grad.data() + (o * s.n + j) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += g[i];
      }
    }
  });
}

Tensor mean(const Tensor& x, std::size_t axis, bool keepdims) {
  require_defined(x, "mean");
  const auto s = split_axis(x.shape(), axis, "mean");
  Shape out_shape = reduced_shape(x.shape(), axis, keepdims);
  const double inv_n = 1.0 / static_cast<double>(s.n);
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto& xv = x.node()->data;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.n; ++j) {
      const double* src = xv.data() + (o * s.n + j) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  for (double& v : out) v *= inv_n;
  auto xn = x.node();
  return make_result(out_shape, std::move(out), {x}, [xn, s, inv_n](const Node& self) {
    auto& grad = ensure_grad(*xn);
    for (std::size_t o = 0; o < s.outer; ++o) {
      const double* g = self.grad.data() + o * s.inner;
      for (std::size_t j = 0; j < s.n; ++j) {
        double* dst = grad.data() + (o * s.n + j) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += g[i] * inv_n;
      }
    }
  });
}

Tensor variance(const Tensor& x, std::size_t axis, bool keepdims) {
  require_defined(x, "variance");
  const auto s = split_axis(x.shape(), axis, "variance");
  Shape out_shape = reduced_shape(x.shape(), axis, keepdims);
  const double inv_n = 1.0 / static_cast<double>(s.n);
  const std::size_t lanes = s.outer * s.inner;
  std::vector<double> mu(lanes, 0.0);
  std::vector<double> out(lanes, 0.0);
  const auto& xv = x.node()->data;
  // Mean is computed relative to the lane's first element so that a constant
  // lane yields variance exactly 0 (the deviations cancel bitwise).
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.n; ++j) {
      const double* src = xv.data() + (o * s.n + j) * s.inner;
      const double* base = xv.data() + (o * s.n) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) mu[o * s.inner + i] += src[i] - base[i];
    }
  }
  for (std::size_t o = 0; o < s.outer; ++o) {
    const double* base = xv.data() + (o * s.n) * s.inner;
    for (std::size_t i = 0; i < s.inner; ++i) {
      mu[o * s.inner + i] = base[i] + mu[o * s.inner + i] * inv_n;
    }
  }
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.n; ++j) {
      const double* src = xv.data() + (o * s.n + j) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) {
        const double d = src[i] - mu[o * s.inner + i];
        out[o * s.inner + i] += d * d;
      }
    }
  }
  for (double& v : out) v *= inv_n;
  auto xn = x.node();
  return make_result(out_shape, std::move(out), {x}, [xn, s, inv_n, mu](const Node& self) {
    // d var / d x_j = 2 (x_j - mean) / n
    auto& grad = ensure_grad(*xn);
    for (std::size_t o = 0; o < s.outer; ++o) {
      const double* g = self.grad.data() + o * s.inner;
      for (std::size_t j = 0; j < s.n; ++j) {
        const double* src = xn->data.data() + (o * s.n + j) * s.inner;
        double* dst = grad.data() + (o * s.n + j) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) {
          dst[i] += g[i] * 2.0 * inv_n * (src[i] - mu[o * s.inner + i]);
        }
      }
    }
  });
}

Tensor max(const Tensor& x, std::size_t axis, bool keepdims) {
  require_defined(x, "max");
  const auto s = split_axis(x.shape(), axis, "max");
  if (s.n == 0) shape_error("max: empty axis");
  Shape out_shape = reduced_shape(x.shape(), axis, keepdims);
  const std::size_t lanes = s.outer * s.inner;
  std::vector<double> out(lanes);
  std::vector<std::size_t> argmax(lanes, 0);  // first max per lane (tie rule)
  const auto& xv = x.node()->data;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double best = xv[(o * s.n) * s.inner + i];
      std::size_t best_j = 0;
      for (std::size_t j = 1; j < s.n; ++j) {
        const double v = xv[(o * s.n + j) * s.inner + i];
        if (v > best) {
          best = v;
          best_j = j;
        }
      }
      out[o * s.inner + i] = best;
      argmax[o * s.inner + i] = best_j;
    }
  }
  auto xn = x.node();
  return make_result(out_shape, std::move(out), {x}, [xn, s, argmax](const Node& self) {
    auto& grad = ensure_grad(*xn);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t j = argmax[o * s.inner + i];
        grad[(o * s.n + j) * s.inner + i] += self.grad[o * s.inner + i];
      }
    }
  });
}

// ---- linear algebra ----

namespace {

struct MatmulDims {
  Shape batch;         // broadcast leading dims
  std::size_t p, q, r;
  std::vector<std::size_t> a_strides, b_strides;  // per batch dim, in blocks
};

MatmulDims matmul_dims(const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2) {
    shape_error("matmul: inputs must have rank >= 2, got " + shape_str(a) + " and " +
                shape_str(b));
  }
  const std::size_t p = a[a.size() - 2], qa = a[a.size() - 1];
  const std::size_t qb = b[b.size() - 2], r = b[b.size() - 1];
  if (qa != qb) {
    shape_error("matmul: inner dimensions disagree: " + shape_str(a) + " x " + shape_str(b));
  }
  Shape lead_a(a.begin(), a.end() - 2), lead_b(b.begin(), b.end() - 2);
  MatmulDims d;
  d.batch = broadcast_shapes(lead_a, lead_b, "matmul");
  d.p = p;
  d.q = qa;
  d.r = r;
  d.a_strides = broadcast_strides(lead_a, d.batch.size());
  d.b_strides = broadcast_strides(lead_b, d.batch.size());
  // convert element strides over lead dims into block indices
  // (strides_of of lead shape counts matrices, and broadcast zeros stay zero)
  return d;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");

  // x[.., P, Q] * w[Q, R]: one flattened product covers every fast case.
  if (b.rank() == 2 && a.rank() >= 2 && a.shape()[a.rank() - 1] == b.shape()[0]) {
    const std::size_t q = b.shape()[0], r = b.shape()[1];
    const std::size_t rows = a.size() / q;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(r);
    std::vector<double> out(rows * r);
    mm(a.node()->data.data(), b.node()->data.data(), out.data(), rows, q, r, false);
    auto an = a.node();
    auto bn = b.node();
    return make_result(out_shape, std::move(out), {a, b}, [an, bn, rows, q, r](const Node& self) {
      if (an->requires_grad) {
        // dA = G . B^T
        const auto bt = transposed(bn->data.data(), q, r);
        mm(self.grad.data(), bt.data(), ensure_grad(*an).data(), rows, r, q, true);
      }
      if (bn->requires_grad) {
        // dB = A^T . G
        mm_at(an->data.data(), self.grad.data(), ensure_grad(*bn).data(), rows, q, r);
      }
    });
  }

  const MatmulDims d = matmul_dims(a.shape(), b.shape());
  Shape out_shape = d.batch;
  out_shape.push_back(d.p);
  out_shape.push_back(d.r);
  const std::size_t batches = numel(d.batch);
  const std::size_t a_block = d.p * d.q, b_block = d.q * d.r, o_block = d.p * d.r;
  std::vector<double> out(batches * o_block);

  const std::size_t rank = d.batch.size();
  const auto& av = a.node()->data;
  const auto& bv = b.node()->data;
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t n = 0; n < batches; ++n) {
    mm(av.data() + ia * a_block, bv.data() + ib * b_block, out.data() + n * o_block, d.p, d.q,
       d.r, false);
    for (std::size_t dd = rank; dd-- > 0;) {
      idx[dd]++;
      ia += d.a_strides[dd];
      ib += d.b_strides[dd];
      if (idx[dd] < d.batch[dd]) break;
      ia -= d.a_strides[dd] * d.batch[dd];
      ib -= d.b_strides[dd] * d.batch[dd];
      idx[dd] = 0;
    }
  }

  auto an = a.node();
  auto bn = b.node();
  return make_result(out_shape, std::move(out), {a, b}, [an, bn, d, batches, a_block, b_block,
                                                         o_block](const Node& self) {
    const std::size_t rank = d.batch.size();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0, ib = 0;
    if (an->requires_grad) ensure_grad(*an);
    if (bn->requires_grad) ensure_grad(*bn);
    for (std::size_t n = 0; n < batches; ++n) {
      const double* g = self.grad.data() + n * o_block;
      if (an->requires_grad) {
        const auto bt = transposed(bn->data.data() + ib * b_block, d.q, d.r);
        mm(g, bt.data(), an->grad.data() + ia * a_block, d.p, d.r, d.q, true);
      }
      if (bn->requires_grad) {
        mm_at(an->data.data() + ia * a_block, g, bn->grad.data() + ib * b_block, d.p, d.q, d.r);
      }
      for (std::size_t dd = rank; dd-- > 0;) {
        idx[dd]++;
        ia += d.a_strides[dd];
        ib += d.b_strides[dd];
        if (idx[dd] < d.batch[dd]) break;
        ia -= d.a_strides[dd] * d.batch[dd];
        ib -= d.b_strides[dd] * d.batch[dd];
        idx[dd] = 0;
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_defined(x, "linear");
  require_defined(w, "linear");
  require_defined(b, "linear");
  if (w.rank() != 2) shape_error("linear: weight must be rank 2, got " + shape_str(w.shape()));
  const std::size_t din = w.shape()[0], dout = w.shape()[1];
  if (x.rank() < 1 || x.shape().back() != din) {
    shape_error("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                shape_str(w.shape()));
  }
  if (b.rank() != 1 || b.shape()[0] != dout) {
    shape_error("linear: bias " + shape_str(b.shape()) + " must be [" + std::to_string(dout) +
                "]");
  }
  const std::size_t rows = x.size() / din;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(dout);
  std::vector<double> out(rows * dout);
  const auto& bias = b.node()->data;
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy(bias.begin(), bias.end(), out.data() + i * dout);
  }
  mm(x.node()->data.data(), w.node()->data.data(), out.data(), rows, din, dout, true);
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  return make_result(out_shape, std::move(out), {x, w, b},
                     [xn, wn, bn, rows, din, dout](const Node& self) {
                       if (xn->requires_grad) {
                         const auto wt = transposed(wn->data.data(), din, dout);
                         mm(self.grad.data(), wt.data(), ensure_grad(*xn).data(), rows, dout,
                            din, true);
                       }
                       if (wn->requires_grad) {
                         mm_at(xn->data.data(), self.grad.data(), ensure_grad(*wn).data(), rows,
                               din, dout);
                       }
                       if (bn->requires_grad) {
                         auto& gb = ensure_grad(*bn);
                         for (std::size_t i = 0; i < rows; ++i) {
                           const double* g = self.grad.data() + i * dout;
                           for (std::size_t j = 0; j < dout; ++j) gb[j] += g[j];
                         }
                       }
                     });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  const auto s = split_axis(x.shape(), axis, "softmax");
  std::vector<double> out(x.size());
  const auto& xv = x.node()->data;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      double hi = xv[base];
      for (std::size_t j = 1; j < s.n; ++j) hi = std::max(hi, xv[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const double e = std::exp(xv[base + j * s.inner] - hi);
        out[base + j * s.inner] = e;
        z += e;
      }
      const double inv_z = 1.0 / z;
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] *= inv_z;
    }
  }
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {x}, [xn, s](const Node& self) {
    // dx = y * (g - sum_j g_j y_j) per lane
    auto& grad = ensure_grad(*xn);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.n; ++j) {
          dot += self.grad[base + j * s.inner] * self.data[base + j * s.inner];
        }
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t k = base + j * s.inner;
          grad[k] += self.data[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

// ---- autodiff driver ----

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  auto root = loss.node();
  if (root->data.size() != 1) {
    shape_error("backward: loss must be scalar, got shape " + shape_str(root->shape));
  }
  if (root->backward_ran) {
    throw std::runtime_error("backward: already called on this loss; run a new forward first");
  }
  root->backward_ran = true;
  if (!root->requires_grad) return;  // nothing reachable needs gradients

  // Iterative post-order DFS for the topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  ensure_grad(*root)[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be positive");
  Tensor probe = Tensor::from_data(x.shape(), {x.data().begin(), x.data().end()});
  probe.set_requires_grad(true);
  Tensor y = f(probe);
  if (y.size() != 1) throw std::invalid_argument("finite_diff_check: f must return a scalar");
  backward(y);
  const std::vector<double> analytic(probe.grad().begin(), probe.grad().end());

  double worst = 0.0;
  NoGradGuard no_tape;  // numeric probes only need values
  auto buf = probe.mutable_data();
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const double saved = buf[i];
    buf[i] = saved + h;
    const double up = f(probe).value();
    buf[i] = saved - h;
    const double down = f(probe).value();
    buf[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double err =
        std::fabs(analytic[i] - numeric) / (std::fabs(analytic[i]) + std::fabs(numeric) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace epsilon
