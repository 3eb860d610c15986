#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "pdfd/autodiff.hpp"
#include "pdfd/random.hpp"
#include "pdfd/tensor.hpp"

namespace {

using pdfd::PrimitiveArgs;
using pdfd::RngStream;
using pdfd::Shape;
using pdfd::Tape;
using pdfd::Tensor;
using pdfd::Var;

Tensor random_tensor(RngStream& rng, const Shape& shape) {
  return Tensor(shape, rng.gaussian_vector(pdfd::shape_numel(shape)));
}

// Scalarizes an arbitrary-shaped output with fixed mixing weights so the full
// Jacobian participates in the check.
Var weighted_sum(Tape& t, Var v, const Tensor& w) {
  return pdfd::sum(pdfd::mul(v, t.constant(w)));
}

TEST(Primitives, MatmulIdentityPassesThrough) {
  RngStream rng(7, "matmul-identity");
  Tensor eye(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  for (int rep = 0; rep < 4; ++rep) {
    Tensor a = random_tensor(rng, {3, 3});
    Tape t;
    Var out = t.matmul(t.constant(eye), t.constant(a));
    EXPECT_TRUE(pdfd::approx_equal(out.value(), a, 0.0));
  }
}

TEST(Primitives, MatmulKnownProduct) {
  Tape t;
  Var a = t.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Var b = t.constant(Tensor::matrix(2, 2, {5, 6, 7, 8}));
  Tensor expect = Tensor::matrix(2, 2, {19, 22, 43, 50});
  EXPECT_TRUE(pdfd::approx_equal(t.matmul(a, b).value(), expect, 0.0));
}

TEST(Primitives, SoftmaxRowsUniformOnZeros) {
  Tape t;
  Var out = t.softmax_rows(t.constant(Tensor::vec({0, 0, 0})));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(out.value()[i], 1.0 / 3.0, 1e-15);
}

TEST(Primitives, SoftmaxRowsSumToOne) {
  RngStream rng(11, "softmax-rows");
  Tape t;
  Var out = t.softmax_rows(t.constant(random_tensor(rng, {5, 7})));
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += out.value()[i * 7 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Primitives, ReluClampsNegatives) {
  Tape t;
  Var out = t.relu(t.constant(Tensor::vec({-1, 2})));
  EXPECT_EQ(out.value()[0], 0.0);
  EXPECT_EQ(out.value()[1], 2.0);
}

TEST(Backward, SumOfSquaresGradient) {
  Tape t;
  Var w = t.leaf(Tensor::vec({1, 2}), true);
  Var loss = pdfd::sum(pdfd::mul(w, w));
  t.backward(loss);
  Tensor g = t.grad(w);
  EXPECT_DOUBLE_EQ(g[0], 2.0);
  EXPECT_DOUBLE_EQ(g[1], 4.0);
}

TEST(Backward, MeanGradientIsUniform) {
  Tape t;
  Var w = t.leaf(Tensor::vec({3, -1, 2, 5}), true);
  t.backward(pdfd::mean(w));
  Tensor g = t.grad(w);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(g[i], 0.25);
}

TEST(Backward, CrossEntropyAtUniformLogits) {
  Tape t;
  Var logits = t.leaf(Tensor::matrix(1, 2, {0, 0}), true);
  Tensor onehot = Tensor::matrix(1, 2, {1, 0});
  t.backward(pdfd::cross_entropy_with_logits(logits, onehot));
  Tensor g = t.grad(logits);
  EXPECT_NEAR(g[0], -0.5, 1e-12);
  EXPECT_NEAR(g[1], 0.5, 1e-12);
}

TEST(Backward, SharedLeafAccumulatesAcrossUses) {
  Tensor w = Tensor::vec({1, 2, 3});
  Tape t;
  Var v = t.leaf_for(&w);
  EXPECT_EQ(t.leaf_for(&w).id, v.id);
  Var loss = pdfd::add(pdfd::sum(v), pdfd::sum(v));
  t.backward(loss);
  Tensor g = t.grad(v);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g[i], 2.0);
}

TEST(GradCheck, SumOfSquares) {
  auto f = [](Tape& t, Var x) { return pdfd::sum(pdfd::square(x)); };
  EXPECT_LT(pdfd::grad_check(f, Tensor::vec({1, 2, 3}), 1e-5), 1e-6);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
  auto f = [](Tape& t, Var x) {
    (void)x;
    return t.constant_scalar(4.25);
  };
  EXPECT_EQ(pdfd::grad_check(f, Tensor::vec({1, -2}), 1e-4), 0.0);
}

TEST(GradCheck, EveryPrimitiveAtSeededPoints) {
  constexpr double kEps = 1e-5;
  constexpr double kTol = 1e-5;
  constexpr int kPoints = 10;
  RngStream rng(42, "primitive-grad-points");

  struct Case {
    const char* name;
    Shape shape;
    std::function<Var(Tape&, Var)> f;
    bool positive = false;   // sample strictly positive points
    bool away_from_kink = false;
  };

  const Tensor m34 = random_tensor(rng, {3, 4});
  const Tensor w34 = random_tensor(rng, {3, 4});
  const Tensor w43 = random_tensor(rng, {4, 3});
  const Tensor w33 = random_tensor(rng, {3, 3});
  const Tensor w31 = random_tensor(rng, {3, 1});
  const Tensor w13 = random_tensor(rng, {1, 3});
  const Tensor w3 = random_tensor(rng, {3});
  const Tensor w36 = random_tensor(rng, {3, 6});
  const Tensor w32 = random_tensor(rng, {3, 2});
  const Tensor bn_gamma = Tensor::vec({1.3, 0.7, 1.1});
  const Tensor bn_beta = Tensor::vec({0.2, -0.4, 0.05});
  const Tensor bn_x = random_tensor(rng, {4, 3});
  const Tensor w14 = random_tensor(rng, {1, 4});
  const Tensor w64 = random_tensor(rng, {6, 4});
  const Tensor w24 = random_tensor(rng, {2, 4});

  std::vector<Case> cases;
  cases.push_back({"matmul-lhs", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, t.matmul(x, t.constant(w43)), w33); }});
  cases.push_back({"matmul-rhs", {4, 3},
                   [&](Tape& t, Var x) { return weighted_sum(t, t.matmul(t.constant(m34), x), w33); }});
  cases.push_back({"add", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::add(x, t.constant(m34)), w34); }});
  cases.push_back({"sub", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::sub(t.constant(m34), x), w34); }});
  cases.push_back({"mul", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::mul(x, t.constant(m34)), w34); }});
  cases.push_back({"scale", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::scale(x, -1.7), w34); }});
  cases.push_back({"relu", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::relu(x), w34); },
                   false, true});
  cases.push_back({"exp", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::exp(x), w34); }});
  cases.push_back({"log", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::log(x), w34); }, true});
  cases.push_back({"sqrt", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::sqrt(x), w34); }, true});
  cases.push_back({"square", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::square(x), w34); }});
  cases.push_back({"mean-full", {3, 4}, [&](Tape& t, Var x) { return pdfd::mean(x); }});
  cases.push_back({"mean-axis0", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::mean(x, 0), w14); }});
  cases.push_back({"mean-axis1", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::mean(x, 1), w31); }});
  cases.push_back({"sum-full", {3, 4}, [&](Tape& t, Var x) { return pdfd::sum(x); }});
  cases.push_back({"sum-axis0", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::sum(x, 0), w14); }});
  cases.push_back({"sum-axis1", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::sum(x, 1), w31); }});
  cases.push_back({"softmax-rows", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::softmax_rows(x), w34); }});
  cases.push_back({"concat-axis0", {3, 4}, [&](Tape& t, Var x) {
                     Var other = t.constant(m34);
                     return weighted_sum(t, t.concat({x, other}, 0), w64);
                   }});
  cases.push_back({"concat-axis1", {3, 2}, [&](Tape& t, Var x) {
                     Var other = t.constant(w34);
                     return weighted_sum(t, t.concat({x, other}, 1), w36);
                   }});
  cases.push_back({"slice-rows", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::slice(x, 0, 1, 3), w24); }});
  cases.push_back({"slice-cols", {3, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::slice(x, 1, 0, 2), w32); }});
  cases.push_back({"broadcast-row", {1, 4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::broadcast_to(x, {3, 4}), w34); }});
  cases.push_back({"broadcast-col", {3, 1},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::broadcast_to(x, {3, 4}), w34); }});
  cases.push_back({"broadcast-vec", {4},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::broadcast_to(x, {3, 4}), w34); }});
  cases.push_back({"broadcast-scalar", {1},
                   [&](Tape& t, Var x) { return weighted_sum(t, pdfd::broadcast_to(x, {3, 4}), w34); }});
  cases.push_back({"batchnorm-x", {4, 3}, [&](Tape& t, Var x) {
                     Var out = t.batchnorm(x, t.constant(bn_gamma), t.constant(bn_beta));
                     return weighted_sum(t, out, w43);
                   }});
  cases.push_back({"batchnorm-gamma", {3}, [&](Tape& t, Var g) {
                     Var out = t.batchnorm(t.constant(bn_x), g, t.constant(bn_beta));
                     return weighted_sum(t, out, w43);
                   }});
  cases.push_back({"batchnorm-beta", {3}, [&](Tape& t, Var b) {
                     Var out = t.batchnorm(t.constant(bn_x), t.constant(bn_gamma), b);
                     return weighted_sum(t, out, w43);
                   }});

  for (const Case& c : cases) {
    for (int p = 0; p < kPoints; ++p) {
      Tensor point = random_tensor(rng, c.shape);
      for (double& v : point.data()) {
        if (c.positive) v = 0.5 + std::abs(v);
        if (c.away_from_kink && std::abs(v) < 0.1) v = v < 0 ? v - 0.1 : v + 0.1;
      }
      const double err = pdfd::grad_check(c.f, point, kEps);
      EXPECT_LT(err, kTol) << c.name << " point " << p;
    }
  }
}

TEST(Backward, LinearityOfGradients) {
  RngStream rng(17, "linearity");
  const Tensor point = random_tensor(rng, {2, 3});
  const Tensor mix = random_tensor(rng, {2, 3});
  const double a = 1.75, b = -0.35;

  auto build_l1 = [&](Tape& t, Var x) { return pdfd::sum(pdfd::square(x)); };
  auto build_l2 = [&](Tape& t, Var x) { return weighted_sum(t, pdfd::exp(x), mix); };

  Tape t1;
  Var x1 = t1.leaf(point, true);
  t1.backward(build_l1(t1, x1));
  Tensor g1 = t1.grad(x1);

  Tape t2;
  Var x2 = t2.leaf(point, true);
  t2.backward(build_l2(t2, x2));
  Tensor g2 = t2.grad(x2);

  Tape t3;
  Var x3 = t3.leaf(point, true);
  Var combo = pdfd::add(pdfd::scale(build_l1(t3, x3), a), pdfd::scale(build_l2(t3, x3), b));
  t3.backward(combo);
  Tensor gc = t3.grad(x3);

  for (std::size_t i = 0; i < point.numel(); ++i) {
    EXPECT_NEAR(gc[i], a * g1[i] + b * g2[i], 1e-12);
  }
}

TEST(Backward, DeterministicBitIdenticalReplay) {
  RngStream rng(23, "determinism");
  const Tensor point = random_tensor(rng, {4, 4});
  const Tensor w = random_tensor(rng, {4, 4});

  auto run = [&](Tensor* out_val, Tensor* out_grad) {
    Tape t;
    Var x = t.leaf(point, true);
    Var h = pdfd::relu(t.matmul(x, t.constant(w)));
    Var loss = pdfd::mean(pdfd::square(h));
    *out_val = loss.value();
    t.backward(loss);
    *out_grad = t.grad(x);
  };

  Tensor v1, g1, v2, g2;
  run(&v1, &g1);
  run(&v2, &g2);
  ASSERT_EQ(g1.numel(), g2.numel());
  EXPECT_EQ(std::memcmp(v1.data().data(), v2.data().data(), sizeof(double)), 0);
  EXPECT_EQ(std::memcmp(g1.data().data(), g2.data().data(),
                        g1.numel() * sizeof(double)), 0);
}

TEST(Errors, ShapeMismatchThrows) {
  Tape t;
  Var a = t.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  Var b = t.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  EXPECT_THROW(t.matmul(a, b), pdfd::ShapeError);
  EXPECT_THROW(t.add(a, t.constant(Tensor::vec({1, 2}))), pdfd::ShapeError);
  EXPECT_THROW(t.slice(a, 0, 1, 5), pdfd::ShapeError);
  EXPECT_THROW(t.broadcast_to(a, Shape{2, 4}), pdfd::ShapeError);
}

TEST(Errors, DomainErrorsOnNonPositiveLogSqrt) {
  Tape t;
  EXPECT_THROW(t.log(t.constant(Tensor::vec({1.0, 0.0}))), pdfd::DomainError);
  EXPECT_THROW(t.log(t.constant(Tensor::vec({-2.0}))), pdfd::DomainError);
  EXPECT_THROW(t.sqrt(t.constant(Tensor::vec({-1.0}))), pdfd::DomainError);
  EXPECT_THROW(t.sqrt(t.constant(Tensor::vec({0.0}))), pdfd::DomainError);
}

TEST(Errors, UsageErrors) {
  Tape t;
  Var w = t.leaf(Tensor::vec({1, 2}), true);
  EXPECT_THROW(t.backward(w), pdfd::UsageError);  // non-scalar loss

  Var loss = pdfd::sum(w);
  t.backward(loss);
  EXPECT_THROW(t.backward(loss), pdfd::UsageError);  // second sweep

  t.reset();
  Tape other;
  Var foreign = other.leaf(Tensor::vec({1}), true);
  EXPECT_THROW(t.relu(foreign), pdfd::UsageError);
  EXPECT_THROW(t.backward(foreign), pdfd::UsageError);

  auto f = [](Tape& tt, Var x) { return pdfd::sum(x); };
  EXPECT_THROW(pdfd::grad_check(f, Tensor::vec({1}), 0.0), pdfd::UsageError);
  EXPECT_THROW(pdfd::grad_check(f, Tensor::vec({1}), 0.5), pdfd::UsageError);

  std::vector<Var> inputs{w};
  EXPECT_THROW(pdfd::apply_primitive(t, "transpose", inputs), pdfd::UsageError);
}

TEST(Errors, ResetAllowsFreshSweep) {
  Tape t;
  Var w = t.leaf(Tensor::vec({1, 2}), true);
  t.backward(pdfd::sum(w));
  t.reset();
  Var w2 = t.leaf(Tensor::vec({3, 4}), true);
  t.backward(pdfd::sum(pdfd::square(w2)));
  EXPECT_DOUBLE_EQ(t.grad(w2)[0], 6.0);
}

TEST(ApplyPrimitive, StringDispatchMatchesMethods) {
  RngStream rng(31, "apply-primitive");
  const Tensor a = random_tensor(rng, {2, 3});
  const Tensor b = random_tensor(rng, {3, 2});

  Tape t;
  Var va = t.constant(a);
  Var vb = t.constant(b);
  std::vector<Var> two{va, vb};
  EXPECT_THROW(pdfd::apply_primitive(t, "relu", two), pdfd::UsageError);

  Var direct = t.matmul(va, vb);
  Var dispatched = pdfd::apply_primitive(t, "matmul", two);
  EXPECT_TRUE(pdfd::approx_equal(direct.value(), dispatched.value(), 0.0));

  PrimitiveArgs args;
  args.axis = 1;
  std::vector<Var> one{va};
  EXPECT_TRUE(pdfd::approx_equal(pdfd::apply_primitive(t, "mean", one, args).value(),
                                 t.mean(va, 1).value(), 0.0));

  args = PrimitiveArgs{};
  args.target = Shape{4, 3};
  std::vector<Var> vecin{t.constant(Tensor::vec({1, 2, 3}))};
  EXPECT_TRUE(pdfd::approx_equal(pdfd::apply_primitive(t, "broadcast", vecin, args).value(),
                                 t.broadcast_to(vecin[0], {4, 3}).value(), 0.0));
}

TEST(CustomOp, CorrectVjpPassesCheck) {
  auto cube = [](Tape& t, Var x) {
    Tensor out = x.value();
    for (double& v : out.data()) v = v * v * v;
    Var y = t.custom("cube", {x}, std::move(out),
                     [](const Tensor& g, const std::vector<Tensor>& in, const Tensor&) {
                       Tensor dx = in[0];
                       for (std::size_t i = 0; i < dx.numel(); ++i) {
                         dx[i] = g[i] * 3.0 * in[0][i] * in[0][i];
                       }
                       return std::vector<Tensor>{dx};
                     });
    return pdfd::sum(y);
  };
  EXPECT_LT(pdfd::grad_check(cube, Tensor::vec({0.5, -1.25, 2.0}), 1e-5), 1e-6);
}

TEST(CustomOp, FaultInjectedVjpIsCaught) {
  auto bad_cube = [](Tape& t, Var x) {
    Tensor out = x.value();
    for (double& v : out.data()) v = v * v * v;
    Var y = t.custom("bad-cube", {x}, std::move(out),
                     [](const Tensor& g, const std::vector<Tensor>& in, const Tensor&) {
                       Tensor dx = in[0];
                       for (std::size_t i = 0; i < dx.numel(); ++i) {
                         dx[i] = g[i] * 2.0 * in[0][i];  // wrong rule
                       }
                       return std::vector<Tensor>{dx};
                     });
    return pdfd::sum(y);
  };
  EXPECT_GT(pdfd::grad_check(bad_cube, Tensor::vec({0.5, -1.25, 2.0}), 1e-5), 1e-2);
}

TEST(Helpers, SigmoidMatchesClosedForm) {
  RngStream rng(41, "sigmoid");
  Tape t;
  Tensor x = random_tensor(rng, {6, 1});
  Var s = pdfd::sigmoid_columns(t.constant(x));
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(s.value()[i], 1.0 / (1.0 + std::exp(-x[i])), 1e-12);
  }
}

TEST(Helpers, ClampMinActsAsMax) {
  Tape t;
  Var x = t.constant(Tensor::vec({-3.0, 1e-20, 0.5}));
  Var c = pdfd::clamp_min(x, 1e-12);
  EXPECT_DOUBLE_EQ(c.value()[0], 1e-12);
  EXPECT_DOUBLE_EQ(c.value()[1], 1e-12);
  EXPECT_DOUBLE_EQ(c.value()[2], 0.5);
}

TEST(Helpers, CrossEntropyGradStaysStableForExtremeLogits) {
  Tape t;
  Var logits = t.leaf(Tensor::matrix(1, 3, {1000.0, 0.0, -1000.0}), true);
  Tensor onehot = Tensor::matrix(1, 3, {0, 1, 0});
  Var loss = pdfd::cross_entropy_with_logits(logits, onehot);
  EXPECT_NEAR(loss.value()[0], 1000.0, 1e-9);
  t.backward(loss);
  Tensor g = t.grad(logits);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(std::isfinite(g[i]));
  EXPECT_NEAR(g[0], 1.0, 1e-9);
  EXPECT_NEAR(g[1], -1.0, 1e-9);
}

}  // namespace
