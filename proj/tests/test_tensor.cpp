#include "epsilon/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "epsilon/rng.hpp"

using epsilon::backward;
using epsilon::CounterRng;
using epsilon::finite_diff_check;
using epsilon::Shape;
using epsilon::Tensor;

namespace {

Tensor random_tensor(Shape shape, CounterRng& rng, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(epsilon::numel(shape));
  for (double& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor::from_data(std::move(shape), std::move(v));
}

// Random values bounded away from zero (for ops with a kink or pole there).
Tensor random_tensor_away_from_zero(Shape shape, CounterRng& rng, double lo = 0.1,
                                    double hi = 2.1) {
  std::vector<double> v(epsilon::numel(shape));
  for (double& x : v) {
    const double mag = lo + (hi - lo) * rng.uniform();
    x = rng.uniform() < 0.5 ? -mag : mag;
  }
  return Tensor::from_data(std::move(shape), std::move(v));
}

constexpr double kFdStep = 1e-6;
constexpr double kFdTol = 1e-6;

}  // namespace

TEST_CASE("shape bookkeeping") {
  CHECK(epsilon::numel({2, 3, 4}) == 24);
  CHECK(epsilon::numel({}) == 1);
  CHECK(epsilon::shape_str({2, 3}) == "[2, 3]");

  auto t = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(t.rank() == 2);
  CHECK(t.size() == 4);
  CHECK(t.at({0, 1}) == 2.0);
  CHECK(t.at({1, 0}) == 3.0);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(t.value(), std::invalid_argument);
  CHECK(Tensor::scalar(5.0).value() == 5.0);
  CHECK(Tensor::full({3}, 2.5).at({1}) == 2.5);
}

TEST_CASE("elementwise ops broadcast right-aligned") {
  auto a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::from_data({3}, {10, 20, 30});
  auto c = epsilon::add(a, b);
  REQUIRE(c.shape() == Shape{2, 3});
  CHECK(c.at({0, 0}) == 11.0);
  CHECK(c.at({1, 2}) == 36.0);

  auto col = Tensor::from_data({2, 1}, {1, -1});
  auto d = epsilon::mul(a, col);
  CHECK(d.at({0, 2}) == 3.0);
  CHECK(d.at({1, 0}) == -4.0);

  auto s = epsilon::add(a, Tensor::scalar(1.0));
  CHECK(s.at({1, 1}) == 6.0);

  CHECK_THROWS_WITH_AS(epsilon::add(Tensor::zeros({2, 3}), Tensor::zeros({4})).value(),
                       doctest::Contains("[2, 3]"), std::invalid_argument);
}

TEST_CASE("softmax anchors") {
  auto flat = epsilon::softmax(Tensor::from_data({3}, {0, 0, 0}), 0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(flat.at({i}) == doctest::Approx(1.0 / 3).epsilon(1e-12));

  auto y = epsilon::softmax(Tensor::from_data({3}, {1, 2, 3}), 0);
  CHECK(y.at({0}) == doctest::Approx(0.09003057317038046).epsilon(1e-5));
  CHECK(y.at({1}) == doctest::Approx(0.24472847105479767).epsilon(1e-5));
  CHECK(y.at({2}) == doctest::Approx(0.6652409557748219).epsilon(1e-5));
}

TEST_CASE("softmax rows sum to one and shift invariance holds") {
  CounterRng rng(100);
  for (int rep = 0; rep < 20; ++rep) {
    auto x = random_tensor({3, 4, 5}, rng, -8.0, 8.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      auto y = epsilon::softmax(x, axis);
      auto sums = epsilon::sum(y, axis);
      for (double v : sums.data()) CHECK(std::fabs(v - 1.0) < 1e-12);
    }
    auto shifted = epsilon::softmax(epsilon::add_scalar(x, 3.7), 1);
    auto base = epsilon::softmax(x, 1);
    for (std::size_t i = 0; i < base.size(); ++i) {
      CHECK(std::fabs(base.data()[i] - shifted.data()[i]) < 1e-12);
    }
  }
}

TEST_CASE("log1pexp anchors and stability") {
  auto y = epsilon::log1pexp(Tensor::from_data({3}, {0.0, 1000.0, -1000.0}));
  CHECK(y.at({0}) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(y.at({1}) == doctest::Approx(1000.0).epsilon(1e-14));
  CHECK(y.at({2}) == 0.0);
}

TEST_CASE("variance anchors") {
  auto v = epsilon::variance(Tensor::from_data({4}, {1, 1, 0, 0}), 0);
  CHECK(v.value() == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(epsilon::variance(Tensor::full({5}, 3.3), 0).value() == 0.0);

  CounterRng rng(101);
  for (int rep = 0; rep < 10; ++rep) {
    auto x = random_tensor({4, 6}, rng);
    auto var = epsilon::variance(x, 1);
    for (double val : var.data()) CHECK(val >= 0.0);
  }
}

TEST_CASE("matmul anchors") {
  auto eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CounterRng rng(102);
  auto a = random_tensor({3, 3}, rng);
  auto prod = epsilon::matmul(eye, a);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(prod.data()[i] == doctest::Approx(a.data()[i]).epsilon(1e-12));
  }

  auto m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto v = Tensor::from_data({2, 1}, {1, 1});
  auto r = epsilon::matmul(m, v);
  CHECK(r.at({0, 0}) == 3.0);
  CHECK(r.at({1, 0}) == 7.0);

  CHECK_THROWS_AS(epsilon::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})).value(),
                  std::invalid_argument);
}

TEST_CASE("matmul associativity on random chains") {
  CounterRng rng(103);
  for (int rep = 0; rep < 10; ++rep) {
    auto a = random_tensor({4, 4}, rng);
    auto b = random_tensor({4, 4}, rng);
    auto c = random_tensor({4, 4}, rng);
    auto left = epsilon::matmul(epsilon::matmul(a, b), c);
    auto right = epsilon::matmul(a, epsilon::matmul(b, c));
    for (std::size_t i = 0; i < left.size(); ++i) {
      CHECK(std::fabs(left.data()[i] - right.data()[i]) < 1e-10);
    }
  }
}

TEST_CASE("batched matmul matches naive loops") {
  CounterRng rng(104);
  const std::size_t B = 2, P = 3, Q = 4, R = 5;
  auto a = random_tensor({B, P, Q}, rng);
  auto b = random_tensor({B, Q, R}, rng);
  auto c = epsilon::matmul(a, b);
  REQUIRE(c.shape() == Shape{B, P, R});
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t i = 0; i < P; ++i) {
      for (std::size_t k = 0; k < R; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < Q; ++j) acc += a.at({n, i, j}) * b.at({n, j, k});
        CHECK(c.at({n, i, k}) == doctest::Approx(acc).epsilon(1e-12));
      }
    }
  }

  // leading-dim broadcast: [1,P,Q] x [B,Q,R]
  auto a1 = random_tensor({1, P, Q}, rng);
  auto c2 = epsilon::matmul(a1, b);
  REQUIRE(c2.shape() == Shape{B, P, R});
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t i = 0; i < P; ++i) {
      for (std::size_t k = 0; k < R; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < Q; ++j) acc += a1.at({0, i, j}) * b.at({n, j, k});
        CHECK(c2.at({n, i, k}) == doctest::Approx(acc).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("linear anchors") {
  auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto x = Tensor::from_data({2}, {1, 1});
  auto zero_b = Tensor::zeros({2});
  auto same = epsilon::linear(x, eye, zero_b);
  CHECK(same.at({0}) == 1.0);
  CHECK(same.at({1}) == 1.0);

  auto ones_b = Tensor::from_data({2}, {1, 1});
  auto shifted = epsilon::linear(x, eye, ones_b);
  CHECK(shifted.at({0}) == 2.0);
  CHECK(shifted.at({1}) == 2.0);

  CHECK_THROWS_AS(epsilon::linear(Tensor::zeros({3}), eye, zero_b).value(),
                  std::invalid_argument);
}

TEST_CASE("backward anchors") {
  auto x = Tensor::from_data({3}, {5, -1, 2});
  x.set_requires_grad();
  backward(epsilon::sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  auto x2 = Tensor::from_data({2}, {1, 2});
  x2.set_requires_grad();
  backward(epsilon::sum(epsilon::mul(x2, x2)));
  CHECK(x2.grad()[0] == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(x2.grad()[1] == doctest::Approx(4.0).epsilon(1e-14));
}

TEST_CASE("grad of sum(A*B) with respect to A is row sums of B") {
  CounterRng rng(105);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 5}, rng);
  a.set_requires_grad();
  backward(epsilon::sum(epsilon::matmul(a, b)));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      double row_sum = 0.0;
      for (std::size_t k = 0; k < 5; ++k) row_sum += b.at({j, k});
      CHECK(a.grad()[i * 4 + j] == doctest::Approx(row_sum).epsilon(1e-12));
    }
  }
}

TEST_CASE("finite differences: elementwise composites") {
  CounterRng rng(106);
  auto c = random_tensor({3, 4}, rng);

  auto x = random_tensor({3, 4}, rng);
  CHECK(finite_diff_check(
            [&](const Tensor& t) {
              return epsilon::sum(epsilon::mul(epsilon::add(t, c), epsilon::sub(t, c)));
            },
            x, kFdStep) < kFdTol);

  CHECK(finite_diff_check([&](const Tensor& t) { return epsilon::sum(epsilon::log1pexp(t)); }, x,
                          kFdStep) < kFdTol);

  CHECK(finite_diff_check(
            [&](const Tensor& t) { return epsilon::sum(epsilon::scale(epsilon::add_scalar(t, 0.5), -1.5)); },
            x, kFdStep) < kFdTol);

  auto away = random_tensor_away_from_zero({3, 4}, rng);
  CHECK(finite_diff_check([&](const Tensor& t) { return epsilon::sum(epsilon::relu(t)); }, away,
                          kFdStep) < kFdTol);
  CHECK(finite_diff_check([&](const Tensor& t) { return epsilon::sum(epsilon::abs(t)); }, away,
                          kFdStep) < kFdTol);
  CHECK(finite_diff_check([&](const Tensor& t) { return epsilon::sum(epsilon::div(c, t)); }, away,
                          kFdStep) < kFdTol);

  auto positive = random_tensor({3, 4}, rng, 0.5, 2.5);
  CHECK(finite_diff_check([&](const Tensor& t) { return epsilon::sum(epsilon::sqrt(t)); },
                          positive, kFdStep) < kFdTol);
}

TEST_CASE("finite differences: broadcasting binary ops") {
  CounterRng rng(107);
  auto wide = random_tensor({2, 3}, rng);
  auto col = random_tensor({2, 1}, rng);
  auto row = random_tensor({3}, rng);

  CHECK(finite_diff_check(
            [&](const Tensor& t) { return epsilon::sum(epsilon::mul(t, wide)); }, col, kFdStep) <
        kFdTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) { return epsilon::sum(epsilon::mul(wide, t)); }, row, kFdStep) <
        kFdTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) {
              return epsilon::sum(epsilon::mul(epsilon::add(t, row), col));
            },
            wide, kFdStep) < kFdTol);
}

TEST_CASE("finite differences: softmax and reductions") {
  CounterRng rng(108);
  auto x = random_tensor({2, 3, 4}, rng);
  auto c = random_tensor({2, 3, 4}, rng);
  auto c2 = random_tensor({2, 4}, rng);

  CHECK(finite_diff_check(
            [&](const Tensor& t) { return epsilon::sum(epsilon::mul(epsilon::softmax(t, 1), c)); },
            x, kFdStep) < kFdTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) { return epsilon::sum(epsilon::mul(epsilon::sum(t, 1), c2)); },
            x, kFdStep) < kFdTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) { return epsilon::sum(epsilon::mul(epsilon::mean(t, 1), c2)); },
            x, kFdStep) < kFdTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) {
              return epsilon::sum(epsilon::mul(epsilon::variance(t, 1), c2));
            },
            x, kFdStep) < kFdTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) { return epsilon::sum(epsilon::mul(epsilon::max(t, 1), c2)); },
            x, kFdStep) < kFdTol);
}

TEST_CASE("finite differences: matmul and linear") {
  CounterRng rng(109);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 5}, rng);
  auto batched = random_tensor({2, 3, 4}, rng);
  auto rhs3 = random_tensor({2, 4, 5}, rng);
  auto xlin = random_tensor({6, 4}, rng);
  auto w = random_tensor({4, 5}, rng);
  auto bias = random_tensor({5}, rng);

  CHECK(finite_diff_check(
            [&](const Tensor& t) { return epsilon::sum(epsilon::matmul(t, b)); }, a, kFdStep) <
        kFdTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) { return epsilon::sum(epsilon::matmul(a, t)); }, b, kFdStep) <
        kFdTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) { return epsilon::sum(epsilon::matmul(t, rhs3)); }, batched,
            kFdStep) < kFdTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) { return epsilon::sum(epsilon::matmul(batched, t)); }, rhs3,
            kFdStep) < kFdTol);
  // leading-dim broadcast on the left operand
  auto a1 = random_tensor({1, 3, 4}, rng);
  CHECK(finite_diff_check(
            [&](const Tensor& t) { return epsilon::sum(epsilon::matmul(t, rhs3)); }, a1,
            kFdStep) < kFdTol);

  CHECK(finite_diff_check(
            [&](const Tensor& t) { return epsilon::sum(epsilon::linear(t, w, bias)); }, xlin,
            kFdStep) < kFdTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) { return epsilon::sum(epsilon::linear(xlin, t, bias)); }, w,
            kFdStep) < kFdTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) { return epsilon::sum(epsilon::linear(xlin, w, t)); }, bias,
            kFdStep) < kFdTol);
}

TEST_CASE("finite differences: structural ops") {
  CounterRng rng(110);
  auto x = random_tensor({3, 4}, rng);
  auto c24 = random_tensor({4, 3}, rng);
  auto c_slice = random_tensor({3, 2}, rng);
  auto c_cat = random_tensor({6, 4}, rng);
  auto c_b = random_tensor({5, 3, 4}, rng);
  auto v = random_tensor({6}, rng);
  auto c_take = random_tensor({4}, rng);

  CHECK(finite_diff_check(
            [&](const Tensor& t) {
              return epsilon::sum(epsilon::mul(epsilon::transpose(t, 0, 1), c24));
            },
            x, kFdStep) < kFdTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) {
              return epsilon::sum(epsilon::mul(epsilon::slice(t, 1, 1, 2), c_slice));
            },
            x, kFdStep) < kFdTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) {
              return epsilon::sum(epsilon::mul(epsilon::concat({t, t}, 0), c_cat));
            },
            x, kFdStep) < kFdTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) {
              return epsilon::sum(epsilon::mul(epsilon::broadcast_to(t, {5, 3, 4}), c_b));
            },
            x, kFdStep) < kFdTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) {
              return epsilon::sum(epsilon::mul(epsilon::take(t, {0, 2, 2, 5}), c_take));
            },
            v, kFdStep) < kFdTol);
  CHECK(finite_diff_check(
            [&](const Tensor& t) {
              return epsilon::sum(epsilon::mul(epsilon::reshape(t, {4, 3}), c24));
            },
            x, kFdStep) < kFdTol);
}

TEST_CASE("max routes gradient to the first argmax on ties") {
  auto x = Tensor::from_data({1, 3}, {1, 3, 3});
  x.set_requires_grad();
  backward(epsilon::sum(epsilon::max(x, 1)));
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 1.0);
  CHECK(x.grad()[2] == 0.0);
}

TEST_CASE("backward validates its input") {
  auto x = Tensor::from_data({2}, {1, 2});
  x.set_requires_grad();
  auto y = epsilon::mul(x, x);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);  // non-scalar loss

  auto loss = epsilon::sum(y);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), std::runtime_error);  // second backward
}

TEST_CASE("NoGradGuard suppresses taping") {
  auto x = Tensor::from_data({2}, {1, 2});
  x.set_requires_grad();
  {
    epsilon::NoGradGuard guard;
    CHECK_FALSE(epsilon::grad_enabled());
    auto y = epsilon::sum(epsilon::mul(x, x));
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
  }
  CHECK(epsilon::grad_enabled());
}

TEST_CASE("gradients accumulate across uses of the same tensor") {
  auto x = Tensor::from_data({2}, {3, 4});
  x.set_requires_grad();
  // loss = sum(x) + sum(x*x): grad = 1 + 2x
  backward(epsilon::add(epsilon::sum(x), epsilon::sum(epsilon::mul(x, x))));
  CHECK(x.grad()[0] == doctest::Approx(7.0).epsilon(1e-14));
  CHECK(x.grad()[1] == doctest::Approx(9.0).epsilon(1e-14));
}

TEST_CASE("forward is bitwise deterministic") {
  CounterRng rng(111);
  auto x = random_tensor({4, 5}, rng);
  auto w = random_tensor({5, 3}, rng);
  auto b = random_tensor({3}, rng);
  auto run = [&]() {
    return epsilon::softmax(epsilon::linear(epsilon::relu(x), w, b), 1);
  };
  auto y1 = run();
  auto y2 = run();
  for (std::size_t i = 0; i < y1.size(); ++i) CHECK(y1.data()[i] == y2.data()[i]);
}

TEST_CASE("structural op validation errors") {
  auto x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK_THROWS_AS(epsilon::reshape(x, {4, 2}).value(), std::invalid_argument);
  CHECK_THROWS_AS(epsilon::transpose(x, 0, 2).value(), std::invalid_argument);
  CHECK_THROWS_AS(epsilon::slice(x, 1, 2, 3).value(), std::invalid_argument);
  CHECK_THROWS_AS(epsilon::concat({x, Tensor::zeros({2, 4})}, 0).value(), std::invalid_argument);
  CHECK_THROWS_AS(epsilon::take(Tensor::zeros({3}), {5}).value(), std::invalid_argument);
  CHECK_THROWS_AS(epsilon::take(x, {0}).value(), std::invalid_argument);
  CHECK_THROWS_AS(epsilon::broadcast_to(x, {3, 3}).value(), std::invalid_argument);
  CHECK_THROWS_AS(epsilon::sum(x, 2).value(), std::invalid_argument);
}

TEST_CASE("finite_diff_check is exact for sum and tight for quadratics") {
  CounterRng rng(112);
  auto x = random_tensor({4}, rng);
  // With a power-of-two step on representable inputs the central difference
  // of a linear map is exact.
  auto whole = Tensor::from_data({4}, {1, -2, 3, 4});
  CHECK(finite_diff_check([](const Tensor& t) { return epsilon::sum(t); }, whole, 0.5) == 0.0);
  CHECK(finite_diff_check([](const Tensor& t) { return epsilon::sum(t); }, x, kFdStep) < 1e-9);
  CHECK(finite_diff_check([](const Tensor& t) { return epsilon::sum(epsilon::mul(t, t)); }, x,
                          kFdStep) < 1e-7);
}
