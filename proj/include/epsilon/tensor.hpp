#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace epsilon {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One recorded forward result. Parent links plus the backward closure form
// the reverse-mode tape; backward() walks them in reverse topological order.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool backward_ran = false;  // set on a loss node once backward() consumed it
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad (and data where needed) and accumulates into the
  // parents' grad buffers. Empty for leaves.
  std::function<void(const Node&)> backward_fn;
};

}  // namespace detail

// Dense row-major f64 tensor with reverse-mode autodiff. Value-semantic
// handle onto a shared graph node; ops are free functions below.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_data(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;

  std::span<const double> data() const;
  // Direct write access to the buffer. Only meaningful on leaves between
  // training steps; graphs built from the old values are stale afterwards.
  std::span<double> mutable_data();

  double value() const;  // scalar tensors only
  double at(std::initializer_list<std::size_t> index) const;

  Tensor& set_requires_grad(bool on = true);
  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// While alive, ops are evaluated forward-only (no tape). Used for inference.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- elementwise (broadcasting, NumPy-style right-aligned) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor relu(const Tensor& x);
Tensor log1pexp(const Tensor& x);  // stable softplus: max(x,0) + log1p(exp(-|x|))
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& x, double c) { return scale(x, c); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }

// ---- structural ----
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor transpose(const Tensor& x, std::size_t axis_a, std::size_t axis_b);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len);
Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
Tensor broadcast_to(const Tensor& x, const Shape& target);
Tensor take(const Tensor& x, const std::vector<std::size_t>& indices);  // rank-1 gather

// ---- reductions ----
Tensor sum(const Tensor& x);  // all elements -> scalar (shape {})
Tensor sum(const Tensor& x, std::size_t axis, bool keepdims = false);
Tensor mean(const Tensor& x, std::size_t axis, bool keepdims = false);
// Population variance (divide by n) along the axis.
Tensor variance(const Tensor& x, std::size_t axis, bool keepdims = false);
// Max along the axis; gradient routes to the first max position per lane.
Tensor max(const Tensor& x, std::size_t axis, bool keepdims = false);

// ---- linear algebra ----
// [.., P, Q] x [.., Q, R] -> [.., P, R]; leading dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);
// x[.., Din] * w[Din, Dout] + b[Dout]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// Max-subtracted softmax along the axis.
Tensor softmax(const Tensor& x, std::size_t axis);

// ---- autodiff driver ----
// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
// requires_grad node reachable from `loss`. The loss must be scalar; calling
// backward twice on the same loss node is an error.
void backward(const Tensor& loss);

// Max over elements of |analytic - central difference| / (|analytic| +
// |numeric| + 1e-12), evaluating f at x +- h per element. f must be a
// deterministic map from a tensor to a scalar tensor.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h);

}  // namespace epsilon
