#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pf3d/autodiff.hpp"

using namespace pf3d;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

}  // namespace

TEST(Autodiff, SquareValueAndGradient) {
  Program p{{{"x", Shape{}}}, [](Graph&, const NamedVars& in) { return NamedVars{{"f", square(in.at("x"))}}; }};
  Tensor x = Tensor::scalar(3.0);
  x.requires_grad = true;
  auto r = evaluate(p, {{"x", x}}, true);
  EXPECT_DOUBLE_EQ(r.outputs.at("f").item(), 9.0);
  EXPECT_DOUBLE_EQ(r.grads.at("x").item(), 6.0);
}

TEST(Autodiff, ProductRule) {
  Program p{{{"x", Shape{}}, {"y", Shape{}}},
            [](Graph&, const NamedVars& in) { return NamedVars{{"f", in.at("x") * in.at("y")}}; }};
  Tensor x = Tensor::scalar(2.0), y = Tensor::scalar(5.0);
  x.requires_grad = y.requires_grad = true;
  auto r = evaluate(p, {{"x", x}, {"y", y}}, true);
  EXPECT_DOUBLE_EQ(r.outputs.at("f").item(), 10.0);
  EXPECT_DOUBLE_EQ(r.grads.at("x").item(), 5.0);
  EXPECT_DOUBLE_EQ(r.grads.at("y").item(), 2.0);
}

TEST(Autodiff, SoftplusAtZero) {
  Program p{{{"x", Shape{}}}, [](Graph&, const NamedVars& in) { return NamedVars{{"f", softplus(in.at("x"))}}; }};
  Tensor x = Tensor::scalar(0.0);
  x.requires_grad = true;
  auto r = evaluate(p, {{"x", x}}, true);
  EXPECT_NEAR(r.outputs.at("f").item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(r.grads.at("x").item(), 0.5, 1e-15);
}

TEST(Autodiff, NoGradsWhenNotRequested) {
  Program p{{{"x", Shape{}}}, [](Graph&, const NamedVars& in) { return NamedVars{{"f", square(in.at("x"))}}; }};
  Tensor x = Tensor::scalar(3.0);
  x.requires_grad = true;
  auto r = evaluate(p, {{"x", x}}, false);
  EXPECT_TRUE(r.grads.empty());
}

TEST(Autodiff, ShapeMismatchIsRejected) {
  Program p{{{"x", Shape{3}}}, [](Graph&, const NamedVars& in) { return NamedVars{{"f", sum(in.at("x"))}}; }};
  EXPECT_THROW(evaluate(p, {{"x", Tensor(Shape{4})}}, false), ShapeError);
  EXPECT_THROW(evaluate(p, {}, false), ShapeError);
  Graph g;
  Var a = g.input(Tensor(Shape{2, 3}), false);
  Var b = g.input(Tensor(Shape{2, 3}), false);
  EXPECT_THROW(matmul(a, b), ShapeError);
  EXPECT_THROW(add(a, g.input(Tensor(Shape{2}), false)), ShapeError);
}

TEST(Autodiff, NonFiniteReportsOffendingNode) {
  Graph g;
  Var x = g.input(Tensor::scalar(-1.0), true, "x");
  try {
    (void)log(x);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.op(), "log");
    EXPECT_EQ(e.node(), 1);
  }
}

TEST(Autodiff, BroadcastingFollowsTrailingShape) {
  Graph g;
  Var m = g.input(Tensor(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6}), true);
  Var b = g.input(Tensor::vector({10, 20, 30}), true);
  Var y = m + b;
  EXPECT_EQ(y.value()[4], 25.0);
  auto gr = g.gradients(sum(y), std::vector<Var>{m, b});
  EXPECT_EQ(gr[1].value()[0], 2.0);
  EXPECT_EQ(gr[0].value()[5], 1.0);
}

TEST(Autodiff, EvaluateIsBitDeterministic) {
  std::mt19937_64 rng(7);
  Tensor a = random_tensor(rng, {8, 5});
  Tensor b = random_tensor(rng, {5, 4});
  a.requires_grad = b.requires_grad = true;
  Program p{{{"a", Shape{8, 5}}, {"b", Shape{5, 4}}}, [](Graph&, const NamedVars& in) {
              Var h = tanh(matmul(in.at("a"), in.at("b")));
              return NamedVars{{"h", h}, {"loss", sum(softplus(h))}};
            }};
  auto r1 = evaluate(p, {{"a", a}, {"b", b}}, true);
  auto r2 = evaluate(p, {{"a", a}, {"b", b}}, true);
  EXPECT_EQ(r1.outputs.at("h").values(), r2.outputs.at("h").values());
  EXPECT_EQ(r1.grads.at("a").values(), r2.grads.at("a").values());
  EXPECT_EQ(r1.grads.at("b").values(), r2.grads.at("b").values());
}

TEST(Autodiff, BackwardVisitsSharedSubexpressionOnce) {
  // f = (x*x) + (x*x) through a shared node: df/dx = 4x.
  Graph g;
  Var x = g.input(Tensor::scalar(1.5), true);
  Var s = x * x;
  Var f = s + s;
  auto gr = g.gradients(f, std::vector<Var>{x});
  EXPECT_DOUBLE_EQ(gr[0].item(), 6.0);
}

TEST(Autodiff, SecondOrderThroughCreateGraph) {
  // d/dx (d/dx x^3) = 6x
  Graph g;
  Var x = g.input(Tensor::scalar(1.25), true);
  Var f = x * x * x;
  auto d1 = g.gradients(f, std::vector<Var>{x}, true);
  EXPECT_NEAR(d1[0].item(), 3 * 1.25 * 1.25, 1e-14);
  auto d2 = g.gradients(d1[0], std::vector<Var>{x});
  EXPECT_NEAR(d2[0].item(), 6 * 1.25, 1e-14);
}

TEST(Autodiff, FirstOrderOnlyOpsRefuseSecondOrder) {
  Graph g;
  Var x = g.input(Tensor(Shape{1, 3}, std::vector<double>{1, 2, 2}), true);
  Var n = sum(row_norm(x));
  EXPECT_DOUBLE_EQ(n.item(), 3.0);
  auto d1 = g.gradients(n, std::vector<Var>{x}, true);
  EXPECT_THROW(g.gradients(sum(d1[0]), std::vector<Var>{x}), std::logic_error);
}

TEST(FiniteDiff, QuadraticFormIsExact) {
  std::mt19937_64 rng(11);
  Tensor q = random_tensor(rng, {4, 4});
  Tensor x = random_tensor(rng, {4, 1});
  ScalarFn fn = [q](Graph& g, const NamedVars& in) {
    Var xv = in.at("x");
    return sum(mul(xv, matmul(g.constant(q), xv)));
  };
  EXPECT_LT(finite_diff_check(fn, {{"x", x}}, 1e-5), 1e-8);
}

TEST(FiniteDiff, DetectsCorruptedGradient) {
  ScalarFn fn = [](Graph&, const NamedVars& in) { return sum(grad_scale(scale(in.at("x"), 3.0), 2.0)); };
  const double err = finite_diff_check(fn, {{"x", Tensor::vector({0.1, -0.4, 2.0})}}, 1e-5);
  EXPECT_NEAR(err, 1.0, 1e-6);
}

TEST(FiniteDiff, RejectsBadStepAndNonFinitePerturbations) {
  ScalarFn fn = [](Graph&, const NamedVars& in) { return sum(log(in.at("x"))); };
  EXPECT_THROW(finite_diff_check(fn, {{"x", Tensor::vector({1.0})}}, 0.0), std::invalid_argument);
  EXPECT_THROW(finite_diff_check(fn, {{"x", Tensor::vector({1e-7})}}, 1e-5), NonFiniteError);
}

// Every primitive, 10 random points, double precision.
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(1000 + GetParam());
  auto idx = make_index({2, 0, 5, 5, 1});
  const std::vector<std::pair<std::string, ScalarFn>> cases = {
      {"add", [](Graph&, const NamedVars& in) { return sum(square(in.at("a") + in.at("b"))); }},
      {"sub", [](Graph&, const NamedVars& in) { return sum(square(in.at("a") - in.at("b"))); }},
      {"mul", [](Graph&, const NamedVars& in) { return sum(in.at("a") * in.at("b")); }},
      {"div", [](Graph&, const NamedVars& in) { return sum(in.at("a") / (square(in.at("b")) + 1.0)); }},
      {"matmul", [](Graph&, const NamedVars& in) { return sum(square(matmul(in.at("a"), transpose(in.at("b"))))); }},
      {"sigmoid", [](Graph&, const NamedVars& in) { return sum(sigmoid(in.at("a") * 3.0)); }},
      {"softplus", [](Graph&, const NamedVars& in) { return sum(softplus(in.at("a") * 3.0)); }},
      {"exp", [](Graph&, const NamedVars& in) { return sum(exp(in.at("a"))); }},
      {"tanh_sin_cos", [](Graph&, const NamedVars& in) { return sum(tanh(in.at("a")) * sin(in.at("b")) + cos(in.at("a"))); }},
      {"sum", [](Graph&, const NamedVars& in) { return square(sum(in.at("a"))); }},
      {"broadcast", [](Graph&, const NamedVars& in) {
         return sum(square(in.at("a") * broadcast_to(reshape(in.at("c"), Shape{3}), Shape{2, 3})));
       }},
      {"gather", [idx](Graph&, const NamedVars& in) { return sum(square(gather(in.at("a"), idx, Shape{5}))); }},
      {"concat_rows", [](Graph&, const NamedVars& in) {
         return sum(square(gather_rows(concat({in.at("a"), in.at("b")}), make_index({3, 0, 0}))));
       }},
      {"row_norm", [](Graph&, const NamedVars& in) { return sum(row_norm(in.at("a"))); }},
  };
  for (const auto& [name, fn] : cases) {
    NamedTensors point{{"a", random_tensor(rng, {2, 3})}, {"b", random_tensor(rng, {2, 3})}, {"c", random_tensor(rng, {1, 3})}};
    EXPECT_LT(finite_diff_check(fn, point, 1e-6), 1e-6) << name;
  }
}

INSTANTIATE_TEST_SUITE_P(TenPoints, PrimitiveGradient, ::testing::Range(0, 10));

TEST(Autodiff, SecondOrderMatchesFiniteDifferenceOfGradient) {
  // g(w) = || d/dx sum(leaky(x W)) ||^2 ; check dg/dW numerically.
  std::mt19937_64 rng(3);
  Tensor x = random_tensor(rng, {3, 4});
  ScalarFn fn = [x](Graph& g, const NamedVars& in) {
    Var xv = g.input(x, true, "x");
    Var out = sum(square(leaky_relu(matmul(xv, in.at("w")), 0.2)));
    auto gx = g.gradients(out, std::vector<Var>{xv}, true);
    return sum(square(gx[0]));
  };
  EXPECT_LT(finite_diff_check(fn, {{"w", random_tensor(rng, {4, 2})}}, 1e-6), 1e-6);
}
