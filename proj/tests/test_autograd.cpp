#include <doctest.h>

#include <cmath>
#include <cstring>

#include "faircl/autograd.hpp"
#include "faircl/error.hpp"
#include "gradcheck.hpp"
#include "ops.hpp"

using namespace faircl;
using ag::Tensor;

TEST_CASE("forward values") {
  CHECK(ag::log_sum_exp(Tensor::from({2}, {0.0, 0.0}), 0).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  auto n = ag::l2_normalize(Tensor::from({2}, {3.0, 4.0}));
  CHECK(n[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(n[1] == doctest::Approx(0.8).epsilon(1e-15));

  // 2x3 · 3x2 against a triple loop
  Rng rng(4);
  auto a = testing::random_tensor(rng, {2, 3}), b = testing::random_tensor(rng, {3, 2});
  auto c = ag::matmul(a, b);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 2 + j];
      CHECK(c[i * 2 + j] == doctest::Approx(s).epsilon(1e-14));
    }

  auto ls = ag::log_softmax(Tensor::from({1, 3}, {1000.0, 1000.0, 1000.0}));
  for (double v : ls.values()) CHECK(v == doctest::Approx(-std::log(3.0)));
  CHECK(ag::log(Tensor::from({1}, {0.0})).item() == doctest::Approx(std::log(ag::kLogClamp)));

  // NaN must survive elementwise ops so training can detect it
  auto bad = Tensor::from({1}, {std::nan("")});
  CHECK(std::isnan(ag::relu(bad).item()));
  CHECK(std::isnan(ag::log(bad).item()));
  CHECK(std::isnan(ag::tanh(bad).item()));
}

TEST_CASE("backward basics") {
  auto x = Tensor::from({1}, {3.0}, true);
  ag::backward(ag::sum_all(ag::mul(x, x)));
  CHECK(x.grad()[0] == 6.0);

  // Gradient through log_softmax then a pick sums to zero along the axis.
  auto y = Tensor::from({4}, {0.3, -1.0, 2.0, 0.5}, true);
  ag::backward(ag::slice(ag::log_softmax(y), 0, 2, 1));
  double s = 0.0;
  for (double g : y.grad()) s += g;
  CHECK(std::abs(s) < 1e-15);

  // Two consumers accumulate.
  auto z = Tensor::from({2}, {1.0, 2.0}, true);
  ag::backward(ag::sum_all(ag::add(ag::scale(z, 3.0), ag::mul(z, z))));
  CHECK(z.grad()[0] == doctest::Approx(3.0 + 2.0));
  CHECK(z.grad()[1] == doctest::Approx(3.0 + 4.0));

  CHECK_THROWS_AS(ag::backward(Tensor::from({2}, {1.0, 2.0}, true)), ShapeError);
}

TEST_CASE("graph is released after backward") {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  auto y = ag::exp(x);
  auto loss = ag::sum_all(y);
  ag::backward(loss);
  CHECK(loss.impl()->parents.empty());
  CHECK(y.impl()->parents.empty());
}

TEST_CASE("no-grad guard records nothing") {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  ag::NoGradGuard g;
  auto y = ag::exp(x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("shape errors name the op and both shapes") {
  auto a = Tensor::zeros({2, 3}), b = Tensor::zeros({4, 2});
  try {
    ag::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
  CHECK_THROWS_AS(ag::add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
}

TEST_CASE("gradient reversal") {
  auto x = Tensor::from({2}, {1.5, -2.0}, true);
  auto r = ag::grad_reverse(x, 1.0);
  CHECK(std::memcmp(r.values().data(), x.values().data(), 2 * sizeof(double)) == 0);
  ag::backward(ag::sum_all(r));
  CHECK(x.grad()[0] == -1.0);
  CHECK(x.grad()[1] == -1.0);

  // sum(grad_reverse(x, 0.5) * c) -> -0.5 c
  auto x2 = Tensor::from({3}, {0.1, 0.2, 0.3}, true);
  auto c = Tensor::from({3}, {2.0, -4.0, 7.0});
  ag::backward(ag::sum_all(ag::mul(ag::grad_reverse(x2, 0.5), c)));
  CHECK(x2.grad()[0] == -1.0);
  CHECK(x2.grad()[1] == 2.0);
  CHECK(x2.grad()[2] == -3.5);

  CHECK_THROWS_AS(ag::grad_reverse(x, 0.0), ConfigError);
  CHECK_THROWS_AS(ag::grad_reverse(x, -1.0), ConfigError);
}

TEST_CASE("reversal negates an arbitrary composite gradient exactly") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto x1 = testing::random_tensor(rng, {3, 4});
    auto x2 = Tensor::from({3, 4}, std::vector<double>(x1.values().begin(), x1.values().end()), true);
    auto f = [](const Tensor& x) { return ag::sum_all(ag::tanh(ag::l2_normalize(ag::mul(x, x)))); };
    ag::backward(f(x1));
    ag::backward(f(ag::grad_reverse(x2, 2.0)));
    for (std::size_t i = 0; i < x1.size(); ++i) CHECK(x2.grad()[i] == -2.0 * x1.grad()[i]);
  }
}

TEST_CASE("every op matches central differences") {
  Rng rng(5);
  for (const auto& op : testing::op_cases()) {
    CAPTURE(op.name);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      const auto inputs = op.inputs(rng);
      worst = std::max(worst, op.check(inputs).max_rel_error);
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("composite of several op types matches central differences") {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = testing::random_tensor(rng, {3, 4}), w = testing::random_tensor(rng, {4, 2});
    auto f = [](const std::vector<Tensor>& x) {
      auto h = ag::tanh(ag::matmul(x[0], x[1]));
      auto s = ag::log_softmax(ag::concat({h, ag::sigmoid(h)}, 1));
      return ag::mean(ag::mul(s, ag::concat({ag::exp(ag::scale(h, 0.1)), h}, 1)), 0);
    };
    CHECK(testing::gradcheck(f, {a, w}).max_rel_error < 1e-4);
  }
}
