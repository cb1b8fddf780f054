#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double tensors. Each differentiable op records a node holding its parents
// and a backward closure; backward() walks the graph in reverse topological
// order and frees it afterwards.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace faircl::ag {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Guard value for log() and division by near-zero magnitudes.
inline constexpr double kLogClamp = 1e-12;
// Finite stand-in for log(0) inside masked reductions.
inline constexpr double kLogZero = -1e30;

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Reads this->grad, accumulates into parents' grads.
  std::function<void(TensorImpl&)> backward_fn;

  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->values.size(); }

  std::span<const double> values() const { return impl_->values; }
  // Direct write access; only for leaves (optimizer updates, initialization).
  std::span<double> mutable_values();
  double item() const;
  double operator[](std::size_t i) const { return impl_->values[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad() { impl_->grad.clear(); }
  const char* op() const { return impl_->op; }

  // Same values, no graph history.
  Tensor detach() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& handle() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// While alive, ops on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

// Populates .grad on every tensor reachable from the scalar `loss`; grads
// accumulate across calls until zero_grad(). The graph is released afterwards.
void backward(const Tensor& loss);

// --- elementwise binary; b broadcasts right-aligned onto a's shape --------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

// --- elementwise unary ---------------------------------------------------
Tensor exp(const Tensor& a);
// log(max(a, kLogClamp))
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);

// --- linear algebra ------------------------------------------------------
// a: [..., k] (leading dims flattened), b: [k, m] -> [..., m]
Tensor matmul(const Tensor& a, const Tensor& b);
// a: [B, n, k], b: [B, k, m] -> [B, n, m]
Tensor bmm(const Tensor& a, const Tensor& b);
// Swaps the last two axes.
Tensor transpose(const Tensor& a);

// --- reductions ----------------------------------------------------------
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);
Tensor sum_all(const Tensor& a);
Tensor log_sum_exp(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a);   // over the last axis
Tensor l2_normalize(const Tensor& a);  // over the last axis

// --- structural ----------------------------------------------------------
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
// out.flat[i] = a.flat[indices[i]], reshaped to `shape`.
Tensor gather(const Tensor& a, std::vector<std::size_t> indices, Shape shape);

// --- model-specific fused ops --------------------------------------------
// Per-row normalization over the last axis (no affine part).
Tensor layer_norm(const Tensor& a, double eps = 1e-5);
// x: [B, T, D], w: [K, D] with K odd; zero padding at sequence edges.
Tensor depthwise_conv_time(const Tensor& x, const Tensor& w);

// Identity forward; backward multiplies the incoming gradient by -alpha.
Tensor grad_reverse(const Tensor& x, double alpha);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

}  // namespace faircl::ag
