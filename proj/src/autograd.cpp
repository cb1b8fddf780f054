#include "faircl/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "faircl/error.hpp"
#include "faircl/kernels.hpp"

namespace faircl::ag {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
  return grad;
}

namespace {

thread_local int no_grad_depth = 0;

using ImplPtr = std::shared_ptr<TensorImpl>;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                   " do not conform");
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(op) + ": shape " + shape_str(a) + " " + why);
}

Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> parents, std::function<void(TensorImpl&)> backward_fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  impl->op = op;
  impl->is_leaf = false;
  const bool track = grad_enabled() &&
                     std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.requires_grad(); });
  if (track) {
    impl->requires_grad = true;
    for (auto& p : parents) impl->parents.push_back(p.handle());
    impl->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(impl));
}

// Accumulate into parent p's grad only when it participates in the graph.
inline bool wants(const ImplPtr& p) { return p->requires_grad; }

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) shape_fail(op, shape, "has no axis " + std::to_string(axis));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Maps every flat index of `a` to the flat index of the broadcast operand.
struct Broadcast {
  enum class Kind { Same, Suffix, General } kind = Kind::Same;
  std::size_t b_size = 0;
  std::vector<std::size_t> index;

  std::size_t operator()(std::size_t i) const {
    switch (kind) {
      case Kind::Same: return i;
      case Kind::Suffix: return i % b_size;
      case Kind::General: return index[i];
    }
    return i;
  }
};

Broadcast make_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  bc.b_size = numel(b);
  if (a == b) return bc;
  if (b.size() > a.size()) shape_fail(op, a, b);
  const std::size_t off = a.size() - b.size();
  bool suffix = true;
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i] != a[off + i]) {
      suffix = false;
      if (b[i] != 1) shape_fail(op, a, b);
    }
  }
  if (suffix) {
    bc.kind = Broadcast::Kind::Suffix;
    return bc;
  }
  bc.kind = Broadcast::Kind::General;
  // Strides of b aligned to a's axes; broadcast axes get stride 0.
  std::vector<std::size_t> bstride(a.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = b.size(); i-- > 0;) {
    bstride[off + i] = b[i] == 1 ? 0 : stride;
    stride *= b[i];
  }
  const std::size_t n = numel(a);
  bc.index.resize(n);
  std::vector<std::size_t> coord(a.size(), 0);
  std::size_t bi = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bc.index[i] = bi;
    for (std::size_t ax = a.size(); ax-- > 0;) {
      ++coord[ax];
      bi += bstride[ax];
      if (coord[ax] < a[ax]) break;
      bi -= bstride[ax] * coord[ax];
      coord[ax] = 0;
    }
  }
  return bc;
}

template <class Fwd, class GradA, class GradB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, GradA ga, GradB gb) {
  auto bc = std::make_shared<Broadcast>(make_broadcast(a.shape(), b.shape(), op));
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[(*bc)(i)]);
  return make_result(op, a.shape(), std::move(out), {a, b}, [bc, ga, gb](TensorImpl& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    const auto& g = self.grad;
    if (wants(pa)) {
      auto& gA = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        gA[i] += g[i] * ga(pa->values[i], pb->values[(*bc)(i)]);
      }
    }
    if (wants(pb)) {
      auto& gB = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t j = (*bc)(i);
        gB[j] += g[i] * gb(pa->values[i], pb->values[j]);
      }
    }
  });
}

template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  // deriv(x, y) receives input and output values.
  return make_result(op, a.shape(), std::move(out), {a}, [deriv](TensorImpl& self) {
    const auto& pa = self.parents[0];
    auto& gA = pa->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      gA[i] += self.grad[i] * deriv(pa->values[i], self.values[i]);
    }
  });
}

}  // namespace

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }
bool grad_enabled() { return no_grad_depth == 0; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->values.assign(numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " +
                     std::to_string(numel(shape)) + " values, got " + std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

std::span<double> Tensor::mutable_values() {
  if (!impl_->is_leaf) throw RuntimeFailure(std::string("cannot write values of non-leaf tensor (") + impl_->op + ")");
  return impl_->values;
}

double Tensor::item() const {
  if (impl_->values.size() != 1) shape_fail("item", impl_->shape, "is not a single value");
  return impl_->values[0];
}

Tensor Tensor::detach() const { return from(shape(), impl_->values, false); }

void backward(const Tensor& loss) {
  if (loss.size() != 1) shape_fail("backward", loss.shape(), "is not a scalar loss");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{loss.impl(), 0}};
  visited.insert(loss.impl());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  loss.impl()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  for (TensorImpl* node : order) {
    if (!node->is_leaf) {
      node->backward_fn = nullptr;
      node->parents.clear();
    }
  }
}

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      "scale", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](double x) { return std::log(std::max(x, kLogClamp)); },
      [](double x, double) { return x > kLogClamp ? 1.0 / x : 0.0; });
}

Tensor relu(const Tensor& a) {
  return unary(
      // NaN passes through so a corrupt input still trips the loss check
      "relu", a, [](double x) { return x < 0.0 ? 0.0 : x; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) shape_fail("matmul", a.shape(), b.shape());
  const std::size_t k = b.dim(0);
  const std::size_t m = b.dim(1);
  const std::size_t n = a.size() / k;
  Shape out_shape = a.shape();
  out_shape.back() = m;
  std::vector<double> out(n * m);
  kernels::gemm(false, false, n, m, k, a.values().data(), b.values().data(), out.data(), false);
  return make_result("matmul", std::move(out_shape), std::move(out), {a, b}, [n, m, k](TensorImpl& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    if (wants(pa)) {
      kernels::gemm(false, true, n, k, m, self.grad.data(), pb->values.data(), pa->grad_buffer().data(), true);
    }
    if (wants(pb)) {
      kernels::gemm(true, false, k, m, n, pa->values.data(), self.grad.data(), pb->grad_buffer().data(), true);
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    shape_fail("bmm", a.shape(), b.shape());
  }
  const std::size_t batch = a.dim(0), n = a.dim(1), k = a.dim(2), m = b.dim(2);
  std::vector<double> out(batch * n * m);
  for (std::size_t i = 0; i < batch; ++i) {
    kernels::gemm(false, false, n, m, k, a.values().data() + i * n * k, b.values().data() + i * k * m,
                  out.data() + i * n * m, false);
  }
  return make_result("bmm", {batch, n, m}, std::move(out), {a, b}, [batch, n, m, k](TensorImpl& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    for (std::size_t i = 0; i < batch; ++i) {
      const double* g = self.grad.data() + i * n * m;
      if (wants(pa)) {
        kernels::gemm(false, true, n, k, m, g, pb->values.data() + i * k * m,
                      pa->grad_buffer().data() + i * n * k, true);
      }
      if (wants(pb)) {
        kernels::gemm(true, false, k, m, n, pa->values.data() + i * n * k, g,
                      pb->grad_buffer().data() + i * k * m, true);
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) shape_fail("transpose", a.shape(), "needs rank >= 2");
  const std::size_t r = a.dim(a.rank() - 2), c = a.dim(a.rank() - 1);
  const std::size_t outer = a.size() / (r * c);
  Shape out_shape = a.shape();
  std::swap(out_shape[a.rank() - 2], out_shape[a.rank() - 1]);
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[o * r * c + j * r + i] = av[o * r * c + i * c + j];
    }
  }
  return make_result("transpose", std::move(out_shape), std::move(out), {a}, [outer, r, c](TensorImpl& self) {
    auto& gA = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gA[o * r * c + i * c + j] += self.grad[o * r * c + j * r + i];
      }
    }
  });
}

// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a, std::size_t axis) {
  const auto s = split_axis(a.shape(), axis, "sum");
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.len; ++l) {
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += av[(o * s.len + l) * s.inner + i];
    }
  }
  return make_result("sum", std::move(out_shape), std::move(out), {a}, [s](TensorImpl& self) {
    auto& gA = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t l = 0; l < s.len; ++l) {
        for (std::size_t i = 0; i < s.inner; ++i) gA[(o * s.len + l) * s.inner + i] += self.grad[o * s.inner + i];
      }
    }
  });
}

Tensor mean(const Tensor& a, std::size_t axis) {
  const auto s = split_axis(a.shape(), axis, "mean");
  if (s.len == 0) shape_fail("mean", a.shape(), "has an empty reduction axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(s.len));
}

Tensor sum_all(const Tensor& a) {
  const double total = kernels::active().sum(a.values().data(), a.size());
  return make_result("sum_all", {}, {total}, {a}, [](TensorImpl& self) {
    auto& gA = self.parents[0]->grad_buffer();
    const double g = self.grad[0];
    for (double& v : gA) v += g;
  });
}

Tensor log_sum_exp(const Tensor& a, std::size_t axis) {
  const auto s = split_axis(a.shape(), axis, "log_sum_exp");
  if (s.len == 0) shape_fail("log_sum_exp", a.shape(), "has an empty reduction axis");
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(s.outer * s.inner);
  const auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double mx = av[o * s.len * s.inner + i];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, av[(o * s.len + l) * s.inner + i]);
      double acc = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) acc += std::exp(av[(o * s.len + l) * s.inner + i] - mx);
      out[o * s.inner + i] = mx + std::log(acc);
    }
  }
  return make_result("log_sum_exp", std::move(out_shape), std::move(out), {a}, [s](TensorImpl& self) {
    const auto& pa = self.parents[0];
    auto& gA = pa->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const double y = self.values[o * s.inner + i];
        const double g = self.grad[o * s.inner + i];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t idx = (o * s.len + l) * s.inner + i;
          gA[idx] += g * std::exp(pa->values[idx] - y);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& a) {
  if (a.rank() == 0) shape_fail("log_softmax", a.shape(), "needs rank >= 1");
  const std::size_t len = a.shape().back();
  const std::size_t rows = len == 0 ? 0 : a.size() / len;
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * len;
    const double mx = *std::max_element(x, x + len);
    double acc = 0.0;
    for (std::size_t j = 0; j < len; ++j) acc += std::exp(x[j] - mx);
    const double lse = mx + std::log(acc);
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = x[j] - lse;
  }
  return make_result("log_softmax", a.shape(), std::move(out), {a}, [rows, len](TensorImpl& self) {
    auto& gA = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * len;
      const double* y = self.values.data() + r * len;
      double gsum = 0.0;
      for (std::size_t j = 0; j < len; ++j) gsum += g[j];
      for (std::size_t j = 0; j < len; ++j) gA[r * len + j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
}

Tensor l2_normalize(const Tensor& a) {
  if (a.rank() == 0) shape_fail("l2_normalize", a.shape(), "needs rank >= 1");
  const std::size_t len = a.shape().back();
  const std::size_t rows = len == 0 ? 0 : a.size() / len;
  const auto& kt = kernels::active();
  auto norms = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * len;
    const double n = std::max(std::sqrt(kt.dot(x, x, len)), kLogClamp);
    (*norms)[r] = n;
    kt.scale(x, 1.0 / n, out.data() + r * len, len);
  }
  return make_result("l2_normalize", a.shape(), std::move(out), {a}, [rows, len, norms](TensorImpl& self) {
    const auto& kt = kernels::active();
    auto& gA = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * len;
      const double* y = self.values.data() + r * len;
      const double yg = kt.dot(y, g, len);
      const double inv = 1.0 / (*norms)[r];
      for (std::size_t j = 0; j < len; ++j) gA[r * len + j] += (g[j] - y[j] * yg) * inv;
    }
  });
}

// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) shape_fail("reshape", a.shape(), shape);
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_result("reshape", std::move(shape), std::move(out), {a}, [](TensorImpl& self) {
    kernels::active().add(self.grad.data(), self.parents[0]->grad_buffer().data(), self.grad.size());
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  Shape out_shape = first;
  split_axis(first, axis, "concat");
  out_shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) shape_fail("concat", first, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) shape_fail("concat", first, s);
    }
    lens.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const auto base = split_axis(out_shape, axis, "concat");
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].values();
    const std::size_t chunk = lens[k] * base.inner;
    for (std::size_t o = 0; o < base.outer; ++o) {
      std::copy_n(pv.data() + o * chunk, chunk, out.data() + o * base.len * base.inner + offset);
    }
    offset += chunk;
  }
  return make_result("concat", std::move(out_shape), std::move(out), parts, [base, lens](TensorImpl& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t chunk = lens[k] * base.inner;
      const auto& p = self.parents[k];
      if (wants(p)) {
        auto& gP = p->grad_buffer();
        for (std::size_t o = 0; o < base.outer; ++o) {
          kernels::active().add(self.grad.data() + o * base.len * base.inner + offset, gP.data() + o * chunk, chunk);
        }
      }
      offset += chunk;
    }
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const auto s = split_axis(a.shape(), axis, "slice");
  if (start + length > s.len) {
    shape_fail("slice", a.shape(), "cannot slice [" + std::to_string(start) + ", " +
                                        std::to_string(start + length) + ") on axis " + std::to_string(axis));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  const std::size_t chunk = length * s.inner;
  std::vector<double> out(s.outer * chunk);
  const auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(av.data() + (o * s.len + start) * s.inner, chunk, out.data() + o * chunk);
  }
  return make_result("slice", std::move(out_shape), std::move(out), {a}, [s, start, chunk](TensorImpl& self) {
    auto& gA = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      kernels::active().add(self.grad.data() + o * chunk, gA.data() + (o * s.len + start) * s.inner, chunk);
    }
  });
}

Tensor gather(const Tensor& a, std::vector<std::size_t> indices, Shape shape) {
  if (numel(shape) != indices.size()) shape_fail("gather", shape, "does not match the index count");
  const auto av = a.values();
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= av.size()) shape_fail("gather", a.shape(), "index " + std::to_string(indices[i]) + " out of range");
    out[i] = av[indices[i]];
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
  return make_result("gather", std::move(shape), std::move(out), {a}, [idx](TensorImpl& self) {
    auto& gA = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx->size(); ++i) gA[(*idx)[i]] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& a, double eps) {
  if (a.rank() == 0) shape_fail("layer_norm", a.shape(), "needs rank >= 1");
  const std::size_t len = a.shape().back();
  const std::size_t rows = len == 0 ? 0 : a.size() / len;
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * len;
    double mu = 0.0;
    for (std::size_t j = 0; j < len; ++j) mu += x[j];
    mu /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t j = 0; j < len; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(len);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = (x[j] - mu) * is;
  }
  return make_result("layer_norm", a.shape(), std::move(out), {a}, [rows, len, inv_std](TensorImpl& self) {
    auto& gA = self.parents[0]->grad_buffer();
    const double inv_len = 1.0 / static_cast<double>(len);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * len;
      const double* y = self.values.data() + r * len;
      double gmean = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        gmean += g[j];
        gy += g[j] * y[j];
      }
      gmean *= inv_len;
      gy *= inv_len;
      for (std::size_t j = 0; j < len; ++j) gA[r * len + j] += (*inv_std)[r] * (g[j] - gmean - y[j] * gy);
    }
  });
}

Tensor depthwise_conv_time(const Tensor& x, const Tensor& w) {
  if (x.rank() != 3 || w.rank() != 2 || w.dim(1) != x.dim(2) || w.dim(0) % 2 == 0) {
    shape_fail("depthwise_conv_time", x.shape(), w.shape());
  }
  const std::size_t batch = x.dim(0), steps = x.dim(1), d = x.dim(2), taps = w.dim(0);
  const auto half = static_cast<std::ptrdiff_t>(taps / 2);
  const auto& kt = kernels::active();
  std::vector<double> out(x.size(), 0.0);
  const auto xv = x.values();
  const auto wv = w.values();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      double* o = out.data() + (b * steps + t) * d;
      for (std::size_t k = 0; k < taps; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(k) - half;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(steps)) continue;
        kt.mul_acc(wv.data() + k * d, xv.data() + (b * steps + static_cast<std::size_t>(src)) * d, o, d);
      }
    }
  }
  return make_result("depthwise_conv_time", x.shape(), std::move(out), {x, w},
                     [batch, steps, d, taps, half](TensorImpl& self) {
                       const auto& kt = kernels::active();
                       const auto& px = self.parents[0];
                       const auto& pw = self.parents[1];
                       double* gx = wants(px) ? px->grad_buffer().data() : nullptr;
                       double* gw = wants(pw) ? pw->grad_buffer().data() : nullptr;
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t t = 0; t < steps; ++t) {
                           const double* g = self.grad.data() + (b * steps + t) * d;
                           for (std::size_t k = 0; k < taps; ++k) {
                             const std::ptrdiff_t src =
                                 static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(k) - half;
                             if (src < 0 || src >= static_cast<std::ptrdiff_t>(steps)) continue;
                             const std::size_t row = (b * steps + static_cast<std::size_t>(src)) * d;
                             if (gx) kt.mul_acc(pw->values.data() + k * d, g, gx + row, d);
                             if (gw) kt.mul_acc(px->values.data() + row, g, gw + k * d, d);
                           }
                         }
                       }
                     });
}

Tensor grad_reverse(const Tensor& x, double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("grad_reverse: alpha must be > 0, got " + std::to_string(alpha));
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result("grad_reverse", x.shape(), std::move(out), {x}, [alpha](TensorImpl& self) {
    kernels::active().axpy(-alpha, self.grad.data(), self.parents[0]->grad_buffer().data(), self.grad.size());
  });
}

}  // namespace faircl::ag
