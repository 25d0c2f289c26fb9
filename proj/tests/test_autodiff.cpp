#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "capsworld/autodiff.hpp"
#include "capsworld/gradcheck.hpp"
#include "capsworld/rng.hpp"

using namespace capsworld;
using namespace capsworld::ad;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

std::vector<double> values(Var<double> v) { return {v.value().begin(), v.value().end()}; }

// Direct summation, independent of the engine's loop order.
std::vector<double> conv1d_oracle(const Tensor<double>& x, const Tensor<double>& k, std::size_t stride) {
  const std::size_t cin = x.shape()[0], w = x.shape()[1];
  const std::size_t cout = k.shape()[0], kw = k.shape()[2];
  const std::size_t wout = (w - kw) / stride + 1;
  std::vector<double> y(cout * wout, 0.0);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t j = 0; j < wout; ++j)
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t t = 0; t < kw; ++t) y[o * wout + j] += k[(o * cin + c) * kw + t] * x[c * w + j * stride + t];
  return y;
}

}  // namespace

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor<float>({2, 0}), DimensionError);
  Tensor<float> t({3}, {1, 2, 3}, true);
  CHECK(t.grad().size() == 3);

  Tensor<double> frozen({2}, {1.0, 2.0}, false);
  Graph<double> g;
  auto x = g.param(frozen);
  g.backward(sum_all(square(x)));
  CHECK(frozen.grad().empty());
}

TEST_CASE("matmul") {
  Graph<double> g;
  SUBCASE("identity") {
    auto eye = g.constant({2, 2}, {1, 0, 0, 1});
    auto a = g.constant({2, 2}, {0.3, -1.5, 2.0, 7.0});
    CHECK(values(matmul(eye, a)) == values(a));
  }
  SUBCASE("hand dot products") {
    auto a = g.constant({2, 2}, {1, 2, 3, 4});
    auto b = g.constant({2, 1}, {5, 6});
    auto c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 1});
    CHECK(values(c) == std::vector<double>{17, 39});
  }
  SUBCASE("shape mismatch names both shapes") {
    auto a = g.constant({2, 3}, std::vector<double>(6, 1.0));
    auto b = g.constant({2, 3}, std::vector<double>(6, 1.0));
    try {
      matmul(a, b);
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
    }
  }
  SUBCASE("gradient of sum vs finite differences") {
    Rng rng(11);
    Tensor<double> a = random_tensor({3, 4}, rng);
    Tensor<double> b = random_tensor({4, 2}, rng);
    auto rep = finite_diff_check([&](Graph<double>& gr) { return sum_all(matmul(gr.param(a), gr.param(b))); },
                                 {&a, &b}, 1e-3);
    CHECK(rep.max_rel_error <= 1e-4);
    CHECK(rep.checked == 20);
  }
}

TEST_CASE("conv1d") {
  Graph<double> g;
  SUBCASE("direct summation example") {
    auto x = g.constant({1, 3}, {1, 2, 3});
    auto k = g.constant({1, 1, 3}, {1, 0, -1});
    CHECK(values(conv1d(x, k, Var<double>{}, 1)) == std::vector<double>{-2});
  }
  SUBCASE("identity kernel copies centred values") {
    auto x = g.constant({1, 5}, {4, 5, 6, 7, 8});
    auto k = g.constant({1, 1, 3}, {0, 1, 0});
    CHECK(values(conv1d(x, k, Var<double>{}, 1)) == std::vector<double>{5, 6, 7});
  }
  SUBCASE("bias and stride against oracle") {
    Rng rng(3);
    Tensor<double> x = random_tensor({3, 11}, rng);
    Tensor<double> k = random_tensor({4, 3, 3}, rng);
    auto y = conv1d(g.constant(x), g.constant(k), g.constant({4}, {1, 2, 3, 4}), 2);
    CHECK(y.shape() == Shape{4, 5});
    auto expect = conv1d_oracle(x, k, 2);
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t j = 0; j < 5; ++j) CHECK(y.value()[o * 5 + j] == doctest::Approx(expect[o * 5 + j] + o + 1.0));
  }
  SUBCASE("kernel wider than input") {
    auto x = g.constant({1, 2}, {1, 2});
    auto k = g.constant({1, 1, 3}, {1, 1, 1});
    CHECK_THROWS_AS(conv1d(x, k, Var<double>{}, 1), DimensionError);
  }
  SUBCASE("gradients vs finite differences") {
    Rng rng(5);
    Tensor<double> x = random_tensor({2, 9}, rng);
    Tensor<double> k = random_tensor({3, 2, 3}, rng);
    Tensor<double> b = random_tensor({3}, rng);
    Tensor<double> w = random_tensor({3, 4}, rng);
    auto rep = finite_diff_check(
        [&](Graph<double>& gr) {
          auto y = conv1d(gr.param(x), gr.param(k), gr.param(b), 2);
          return sum_all(mul(y, gr.constant(w)));
        },
        {&x, &k, &b}, 1e-3);
    CHECK(rep.max_rel_error <= 1e-4);
  }
}

TEST_CASE("conv_transpose1d") {
  Graph<double> g;
  SUBCASE("single tap spread") {
    auto x = g.constant({1, 1}, {1});
    auto k = g.constant({1, 1, 3}, {1, 2, 3});
    CHECK(values(conv_transpose1d(x, k, Var<double>{}, 1)) == std::vector<double>{1, 2, 3});
  }
  SUBCASE("adjoint identity") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t stride = 1 + trial % 3;
      Tensor<double> x = random_tensor({3, 12}, rng);
      Tensor<double> k = random_tensor({2, 3, 4}, rng);
      const std::size_t wout = (12 - 4) / stride + 1;
      Tensor<double> y = random_tensor({2, wout}, rng);
      auto fx = conv1d(g.constant(x), g.constant(k), Var<double>{}, stride);
      auto ty = conv_transpose1d(g.constant(y), g.constant(k), Var<double>{}, stride);
      // ty may be shorter than x when the stride drops trailing columns.
      double lhs = 0, rhs = 0;
      for (std::size_t i = 0; i < fx.size(); ++i) lhs += fx.value()[i] * y[i];
      const std::size_t wup = ty.shape()[1];
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t j = 0; j < wup; ++j) rhs += x[c * 12 + j] * ty.value()[c * wup + j];
      CHECK(std::abs(lhs - rhs) <= 1e-5 * std::max(1.0, std::abs(lhs)));
    }
  }
  SUBCASE("gradients vs finite differences") {
    Rng rng(23);
    Tensor<double> x = random_tensor({2, 4}, rng);
    Tensor<double> k = random_tensor({2, 3, 3}, rng);
    Tensor<double> b = random_tensor({3}, rng);
    Tensor<double> w = random_tensor({3, 9}, rng);
    auto rep = finite_diff_check(
        [&](Graph<double>& gr) {
          auto y = conv_transpose1d(gr.param(x), gr.param(k), gr.param(b), 2);
          return sum_all(mul(y, gr.constant(w)));
        },
        {&x, &k, &b}, 1e-3);
    CHECK(rep.max_rel_error <= 1e-4);
  }
}

TEST_CASE("pointwise") {
  Graph<double> g;
  CHECK(sigmoid(g.scalar(0.0)).item() == 0.5);

  Tensor<double> a({1}, {0.2}, true), b({1}, {0.8}, true);
  auto m = max_binary(g.param(a), g.param(b));
  CHECK(m.item() == 0.8);
  g.backward(sum_all(m));
  CHECK(a.grad()[0] == 0.0);
  CHECK(b.grad()[0] == 1.0);

  Graph<double> g2;
  Tensor<double> n({1}, {-3.0}, true);
  auto r = relu(g2.param(n));
  CHECK(r.item() == 0.0);
  g2.backward(sum_all(r));
  CHECK(n.grad()[0] == 0.0);

  SUBCASE("max ties go to the first argument") {
    Graph<double> gt;
    Tensor<double> p({1}, {0.5}, true), q({1}, {0.5}, true);
    gt.backward(sum_all(max_binary(gt.param(p), gt.param(q))));
    CHECK(p.grad()[0] == 1.0);
    CHECK(q.grad()[0] == 0.0);
  }
  SUBCASE("checked division") {
    Graph<double> gc(Graph<double>::Options{.checked = true});
    CHECK_THROWS_AS(div(gc.scalar(1.0), gc.scalar(1e-31)), NumericDomainError);
    Graph<double> gu;
    CHECK(std::isinf(div(gu.scalar(1.0), gu.scalar(0.0)).item()));
  }
  SUBCASE("trailing-dimension broadcasting") {
    auto x = g.constant({2, 3}, {1, 2, 3, 4, 5, 6});
    auto row = g.constant({3}, {10, 20, 30});
    auto col = g.constant({2, 1}, {100, 200});
    CHECK(values(add(x, row)) == std::vector<double>{11, 22, 33, 14, 25, 36});
    CHECK(values(add(x, col)) == std::vector<double>{101, 102, 103, 204, 205, 206});
    CHECK_THROWS_AS(add(x, g.constant({2}, {1, 2})), DimensionError);
  }
}

TEST_CASE("reductions") {
  Graph<double> g;
  CHECK(reduce(g.constant({3}, {1, 2, 3}), ReduceKind::mean, 0).item() == 2.0);
  CHECK(reduce(g.constant({2}, {0, 0}), ReduceKind::logsumexp, 0).item() == doctest::Approx(std::numbers::ln2));
  const double big = reduce(g.constant({2}, {1000, 1000}), ReduceKind::logsumexp, 0).item();
  CHECK(std::isfinite(big));
  CHECK(big == doctest::Approx(1000.0 + std::numbers::ln2).epsilon(1e-12));

  auto x = g.constant({2, 3}, {1, 5, 2, 7, 0, 3});
  CHECK(values(reduce(x, ReduceKind::max, 1)) == std::vector<double>{5, 7});
  CHECK(values(reduce(x, ReduceKind::sum, 0)) == std::vector<double>{8, 5, 5});
  CHECK(reduce(x, ReduceKind::sum, 0, true).shape() == Shape{1, 3});
  CHECK_THROWS_AS(reduce(x, ReduceKind::sum, 2), DimensionError);
}

TEST_CASE("softmax") {
  Graph<double> g;
  auto u = softmax(g.constant({3}, {0, 0, 0}), 0);
  for (double v : u.value()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  auto a = softmax(g.constant({2, 3}, {0.1, -2.0, 3.0, 1.0, 1.5, -0.5}), 1);
  auto b = softmax(g.constant({2, 3}, {42.1, 40.0, 45.0, 43.0, 43.5, 41.5}), 1);
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(a.value()[i] - b.value()[i]) <= 1e-6);
  CHECK(a.value()[0] + a.value()[1] + a.value()[2] == doctest::Approx(1.0).epsilon(1e-6));

  Rng rng(29);
  Tensor<double> x = random_tensor({3, 4}, rng);
  Tensor<double> w = random_tensor({3, 4}, rng);
  for (std::size_t axis = 0; axis < 2; ++axis) {
    auto rep = finite_diff_check(
        [&](Graph<double>& gr) { return sum_all(mul(softmax(gr.param(x), axis), gr.constant(w))); }, {&x}, 1e-3);
    CHECK(rep.max_rel_error <= 1e-4);
  }
}

TEST_CASE("concat and slice") {
  Graph<double> g;
  auto a = g.constant({2}, {1, 2});
  auto b = g.constant({1}, {3});
  auto c = concat<double>({a, b}, 0);
  CHECK(values(c) == std::vector<double>{1, 2, 3});
  CHECK(values(slice(c, 0, 0, 2)) == values(a));
  CHECK_THROWS_AS(slice(c, 0, 2, 4), DimensionError);

  auto m = concat<double>({g.constant({2, 1}, {1, 2}), g.constant({2, 2}, {3, 4, 5, 6})}, 1);
  CHECK(values(m) == std::vector<double>{1, 3, 4, 2, 5, 6});

  Tensor<double> x({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Graph<double> g2;
  g2.backward(sum_all(slice(g2.param(x), 1, 1, 3)));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{0, 1, 1, 0, 1, 1});
}

TEST_CASE("backward") {
  SUBCASE("sum gives ones") {
    Tensor<double> x({4}, {1, -2, 3, 0.5}, true);
    Graph<double> g;
    g.backward(sum_all(g.param(x)));
    for (double v : x.grad()) CHECK(v == 1.0);
  }
  SUBCASE("product rule") {
    Tensor<double> x({1}, {3.0}, true), y({1}, {-4.0}, true);
    Graph<double> g;
    g.backward(mul(g.param(x), g.param(y)));
    CHECK(x.grad()[0] == -4.0);
    CHECK(y.grad()[0] == 3.0);
  }
  SUBCASE("non-scalar loss") {
    Graph<double> g;
    CHECK_THROWS_AS(g.backward(g.constant({2}, {1, 2})), ContractError);
  }
  SUBCASE("repeat accumulates, reset reproduces bitwise") {
    Rng rng(31);
    Tensor<float> x({5}, {0.1f, -0.7f, 0.3f, 0.9f, -0.2f}, true);
    Graph<float> g;
    auto loss = sum_all(sigmoid(mul(g.param(x), g.constant({5}, {1.f, 2.f, 3.f, 4.f, 5.f}))));
    g.backward(loss);
    std::vector<float> first(x.grad().begin(), x.grad().end());
    g.backward(loss);
    for (std::size_t i = 0; i < 5; ++i) CHECK(x.grad()[i] == 2.0f * first[i]);
    x.zero_grad();
    g.backward(loss);
    for (std::size_t i = 0; i < 5; ++i) CHECK(x.grad()[i] == first[i]);
  }
  SUBCASE("shared subexpression visited once") {
    Tensor<double> x({1}, {2.0}, true);
    Graph<double> g;
    auto v = g.param(x);
    auto s = square(v);
    g.backward(add(s, s));
    CHECK(x.grad()[0] == 8.0);
  }
}

TEST_CASE("finite_diff_check") {
  Rng rng(37);
  Tensor<double> x = random_tensor({6}, rng);
  auto quad = finite_diff_check([](Graph<double>&, Var<double> v) { return sum_all(square(v)); }, x, 1e-3);
  CHECK(quad.max_rel_error <= 1e-6);
  CHECK(quad.checked == 6);

  auto sig = finite_diff_check([](Graph<double>&, Var<double> v) { return sigmoid(sum_all(v)); }, x, 1e-3);
  CHECK(sig.max_rel_error <= 1e-4);

  Tensor<double> tie({2}, {0.4, 0.4});
  auto kink = finite_diff_check(
      [](Graph<double>&, Var<double> v) { return sum_all(max_binary(slice(v, 0, 0, 1), slice(v, 0, 1, 2))); }, tie,
      1e-3);
  CHECK(kink.skipped == 2);
  CHECK(kink.checked == 0);

  CHECK_THROWS_AS(
      finite_diff_check([](Graph<double>&, Var<double> v) { return sum_all(log(v)); }, Tensor<double>({1}, std::vector<double>{-1.0}), 1e-3),
      NumericDomainError);
}

TEST_CASE("every differentiable op passes random finite-difference checks") {
  Rng rng(41);
  using F = std::function<Var<double>(Graph<double>&, Var<double>)>;
  // Each op is composed with a fixed random projection so the loss depends
  // on every output element.
  struct Case {
    const char* name;
    Shape shape;
    F f;
  };
  Tensor<double> v = random_tensor({24}, rng);
  auto project = [&](Graph<double>& gr, Var<double> y) {
    std::vector<double> w(v.data().begin(), v.data().begin() + static_cast<std::ptrdiff_t>(y.size()));
    return sum_all(mul(reshape(y, Shape{y.size()}), gr.constant(Shape{y.size()}, w)));
  };
  Tensor<double> other = random_tensor({3, 4}, rng);
  const std::vector<Case> cases = {
      {"add", {3, 4}, [&](Graph<double>& gr, Var<double> x) { return project(gr, add(x, gr.constant(other))); }},
      {"sub", {3, 4}, [&](Graph<double>& gr, Var<double> x) { return project(gr, sub(gr.constant(other), x)); }},
      {"mul", {3, 4}, [&](Graph<double>& gr, Var<double> x) { return project(gr, mul(x, x)); }},
      {"div", {3, 4},
       [&](Graph<double>& gr, Var<double> x) { return project(gr, div(x, add_scalar(square(x), 1.0))); }},
      {"max_binary", {3, 4},
       [&](Graph<double>& gr, Var<double> x) { return project(gr, max_binary(x, gr.constant(other))); }},
      {"broadcast", {4},
       [&](Graph<double>& gr, Var<double> x) { return project(gr, mul(gr.constant(other), x)); }},
      {"scale", {3, 4}, [&](Graph<double>& gr, Var<double> x) { return project(gr, scale(x, -2.5)); }},
      {"relu", {3, 4}, [&](Graph<double>& gr, Var<double> x) { return project(gr, relu(x)); }},
      {"sigmoid", {3, 4}, [&](Graph<double>& gr, Var<double> x) { return project(gr, sigmoid(x)); }},
      {"tanh", {3, 4}, [&](Graph<double>& gr, Var<double> x) { return project(gr, tanh(x)); }},
      {"square", {3, 4}, [&](Graph<double>& gr, Var<double> x) { return project(gr, square(x)); }},
      {"log", {3, 4}, [&](Graph<double>& gr, Var<double> x) { return project(gr, log(add_scalar(square(x), 0.5))); }},
      {"transpose", {3, 4}, [&](Graph<double>& gr, Var<double> x) { return project(gr, transpose(x)); }},
      {"reduce_sum", {3, 4},
       [&](Graph<double>& gr, Var<double> x) { return project(gr, reduce(x, ReduceKind::sum, 1)); }},
      {"reduce_mean", {3, 4},
       [&](Graph<double>& gr, Var<double> x) { return project(gr, reduce(x, ReduceKind::mean, 0)); }},
      {"reduce_max", {3, 4},
       [&](Graph<double>& gr, Var<double> x) { return project(gr, reduce(x, ReduceKind::max, 1)); }},
      {"logsumexp", {3, 4},
       [&](Graph<double>& gr, Var<double> x) { return project(gr, reduce(x, ReduceKind::logsumexp, 1)); }},
      {"concat", {3, 4},
       [&](Graph<double>& gr, Var<double> x) { return project(gr, concat<double>({x, square(x)}, 0)); }},
  };
  for (const auto& c : cases) {
    const std::string name = c.name;
    CAPTURE(name);
    Tensor<double> x = random_tensor(c.shape, rng);
    auto rep = finite_diff_check(c.f, x, 1e-3);
    CHECK(rep.max_rel_error <= 1e-4);
    CHECK(rep.checked > 0);
  }
}

TEST_CASE("reductions and softmax are permutation-equivariant") {
  Rng rng(43);
  Graph<double> g;
  Tensor<double> x = random_tensor({5}, rng);
  const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  std::vector<double> px(5);
  for (std::size_t i = 0; i < 5; ++i) px[i] = x[perm[i]];
  auto a = g.constant(x);
  auto b = g.constant({5}, px);
  for (auto kind : {ReduceKind::sum, ReduceKind::mean, ReduceKind::max, ReduceKind::logsumexp}) {
    CHECK(reduce(a, kind, 0).item() == doctest::Approx(reduce(b, kind, 0).item()).epsilon(1e-12));
  }
  auto sa = softmax(a, 0);
  auto sb = softmax(b, 0);
  for (std::size_t i = 0; i < 5; ++i) CHECK(sb.value()[i] == doctest::Approx(sa.value()[perm[i]]).epsilon(1e-12));
}
