#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "stgdn/autodiff.hpp"
#include "test_util.hpp"

using namespace stgdn;

namespace {

// Scalar loss sum(w o op(params)) with a fixed random weighting, so every
// output coordinate contributes a distinct adjoint.
using OpFn = std::function<Var(Graph&, const std::vector<Var>&)>;

double op_grad_error(const std::vector<Tensor>& inputs, const OpFn& op, std::uint64_t seed = 3) {
  ParamSet params;
  for (std::size_t i = 0; i < inputs.size(); ++i) params.add("x" + std::to_string(i), inputs[i]);
  Tensor weights;
  auto f = [&](const ParamSet& p, ParamSet* grads) {
    Graph g;
    Bindings b(g, p);
    std::vector<Var> xs;
    for (std::size_t i = 0; i < p.size(); ++i) xs.push_back(b[p.name(i)]);
    Var y = op(g, xs);
    if (weights.size() == 0) weights = testing_util::random_tensor(y.shape(), seed, -1.0, 1.0);
    Var loss = sum(mul_elem(y, g.constant(weights)));
    if (grads) {
      g.backward(loss);
      *grads = b.gradients(g, p);
    }
    return loss.value().item();
  };
  return grad_check(f, params, 1e-6).max_rel_error;
}

Tensor rnd(Shape s, std::uint64_t seed) { return testing_util::random_tensor(std::move(s), seed, -1.0, 1.0); }

}  // namespace

TEST(Tensor, RejectsNonFiniteInCheckedMode) {
  EXPECT_THROW(Tensor({2}, {1.0, std::nan("")}), NumericalError);
  EXPECT_THROW(Tensor({2}, std::vector<double>{1.0}), ValidationError);
}

TEST(Autodiff, MatmulIdentity) {
  Graph g;
  const Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  Var y = matmul(g.constant(Tensor::identity(2)), g.constant(m));
  EXPECT_EQ(y.value(), m);
}

TEST(Autodiff, ConcatAxis0) {
  Graph g;
  Var y = concat(g.constant(Tensor({1}, {1.0})), g.constant(Tensor({1}, {2.0})), 0);
  EXPECT_EQ(y.value(), Tensor({2}, {1.0, 2.0}));
}

TEST(Autodiff, Mean) {
  Graph g;
  EXPECT_DOUBLE_EQ(mean(g.constant(Tensor({3}, {1, 2, 3}))).value().item(), 2.0);
}

TEST(Autodiff, ShapeMismatchNamesBothShapes) {
  Graph g;
  try {
    matmul(g.constant(Tensor({2, 3})), g.constant(Tensor({2, 3})));
    FAIL() << "expected a shape error";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2 x 3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(g.constant(Tensor({2})), g.constant(Tensor({3}))), ValidationError);
}

TEST(Autodiff, SoftmaxExamples) {
  Graph g;
  const Tensor u = softmax_rows(g.constant(Tensor::matrix(1, 3, {1, 1, 1}))).value();
  for (double x : u.values()) EXPECT_NEAR(x, 1.0 / 3.0, 1e-15);
  const Tensor s = softmax_rows(g.constant(Tensor::matrix(1, 2, {0.0, std::log(2.0)}))).value();
  EXPECT_NEAR(s[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(s[1], 2.0 / 3.0, 1e-15);
  const Tensor big = softmax_rows(g.constant(Tensor::matrix(1, 2, {1000.0, 0.0}))).value();
  EXPECT_NEAR(big[0], 1.0, 1e-15);
  EXPECT_GE(big[1], 0.0);
  EXPECT_LT(big[1], 1e-300);
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
  Graph g;
  const Tensor x = testing_util::random_tensor({20, 7}, 5, -30.0, 30.0);
  const Tensor y = softmax_rows(g.constant(x)).value();
  for (std::size_t r = 0; r < 20; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      EXPECT_GT(y.at(r, c), 0.0 - 1e-300);
      EXPECT_LE(y.at(r, c), 1.0);
      s += y.at(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Autodiff, LeakyReluExamples) {
  Graph g;
  Var x = g.leaf(Tensor({2}, {-1.0, 3.0}));
  Var y = leaky_relu(x, 0.2);
  EXPECT_DOUBLE_EQ(y.value()[0], -0.2);
  EXPECT_DOUBLE_EQ(y.value()[1], 3.0);
  g.backward(sum(y));
  EXPECT_DOUBLE_EQ(g.grad(x)[0], 0.2);
  EXPECT_DOUBLE_EQ(g.grad(x)[1], 1.0);

  Graph g0;
  Var z = g0.leaf(Tensor({1}, {0.0}));
  g0.backward(sum(leaky_relu(z, 0.2)));
  EXPECT_DOUBLE_EQ(g0.grad(z)[0], 1.0);
}

TEST(Autodiff, BackwardExamples) {
  {
    // loss = mean(W x) for a 1x1 W: dW = mean(x).
    Graph g;
    Var w = g.leaf(Tensor::matrix(1, 1, {0.7}));
    Var x = g.constant(Tensor::matrix(1, 4, {1, 2, 3, 6}));
    g.backward(mean(matmul(w, x)));
    EXPECT_DOUBLE_EQ(g.grad(w).item(), 3.0);
  }
  {
    Graph g;
    Var w = g.leaf(Tensor({1}, {1.5}));
    Var x = g.leaf(Tensor({1}, {2.0}));
    g.backward(sum(scale(x, 4.0)));
    EXPECT_DOUBLE_EQ(g.grad(w).item(), 0.0);
  }
  {
    Graph g;
    Var x = g.leaf(Tensor({1}, {3.0}));
    g.backward(sum(mul_elem(x, x)));
    EXPECT_DOUBLE_EQ(g.grad(x).item(), 6.0);
  }
}

TEST(Autodiff, NonScalarLossRejected) {
  Graph g;
  Var x = g.leaf(Tensor({2}, {1.0, 2.0}));
  EXPECT_THROW(g.backward(scale(x, 2.0)), ValidationError);
}

TEST(Autodiff, BackwardIsDeterministic) {
  auto run = [] {
    Graph g;
    Var a = g.leaf(rnd({4, 5}, 1));
    Var b = g.leaf(rnd({5, 3}, 2));
    Var y = softmax_rows(leaky_relu(matmul(a, b), 0.2));
    g.backward(sum(mul_elem(y, y)));
    return std::make_pair(g.grad(a), g.grad(b));
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, QuadraticIsNearExact) {
  ParamSet p;
  p.add("x", rnd({3, 2}, 9));
  const Tensor a = rnd({3, 2}, 10);
  auto f = [&](const ParamSet& ps, ParamSet* grads) {
    Graph g;
    Bindings b(g, ps);
    Var d = sub(b["x"], g.constant(a));
    Var loss = sum(mul_elem(d, d));
    if (grads) {
      g.backward(loss);
      *grads = b.gradients(g, ps);
    }
    return loss.value().item();
  };
  EXPECT_LT(grad_check(f, p, 1e-4).max_rel_error, 1e-9);
}

TEST(GradCheck, EpsOutOfRange) {
  ParamSet p;
  p.add("x", Tensor({1}, {1.0}));
  auto f = [](const ParamSet& ps, ParamSet*) { return ps.at(0)[0]; };
  EXPECT_THROW(grad_check(f, p, 1.0), ValidationError);
  EXPECT_THROW(grad_check(f, p, 1e-9), ValidationError);
}

TEST(GradCheck, EveryOperation) {
  const double tol = 1e-5;
  EXPECT_LT(op_grad_error({rnd({3, 4}, 1), rnd({4, 2}, 2)}, [](Graph&, auto& x) { return matmul(x[0], x[1]); }), tol);
  EXPECT_LT(op_grad_error({rnd({2, 3, 4}, 1), rnd({4, 2}, 2)}, [](Graph&, auto& x) { return matmul(x[0], x[1]); }),
            tol);
  EXPECT_LT(op_grad_error({rnd({2, 3, 4}, 3), rnd({2, 4, 5}, 4)}, [](Graph&, auto& x) { return bmm(x[0], x[1]); }), tol);
  EXPECT_LT(op_grad_error({rnd({3, 4}, 5)}, [](Graph&, auto& x) { return transpose(x[0]); }), tol);
  EXPECT_LT(op_grad_error({rnd({2, 3, 4}, 5)}, [](Graph&, auto& x) { return transpose(x[0]); }), tol);
  EXPECT_LT(op_grad_error({rnd({3, 4}, 6), rnd({3, 4}, 7)}, [](Graph&, auto& x) { return add(x[0], x[1]); }), tol);
  EXPECT_LT(op_grad_error({rnd({3, 4}, 6), rnd({3, 4}, 7)}, [](Graph&, auto& x) { return sub(x[0], x[1]); }), tol);
  EXPECT_LT(op_grad_error({rnd({3, 4}, 6), rnd({3, 4}, 7)}, [](Graph&, auto& x) { return mul_elem(x[0], x[1]); }),
            tol);
  EXPECT_LT(op_grad_error({rnd({3, 4}, 8)}, [](Graph&, auto& x) { return scale(x[0], -2.5); }), tol);
  EXPECT_LT(op_grad_error({rnd({3, 4}, 8), rnd({1, 4}, 9)}, [](Graph&, auto& x) { return add_row_bias(x[0], x[1]); }),
            tol);
  EXPECT_LT(op_grad_error({rnd({3, 4}, 10), rnd({3, 2}, 11)}, [](Graph&, auto& x) { return concat(x[0], x[1], 1); }),
            tol);
  EXPECT_LT(op_grad_error({rnd({3, 4}, 10), rnd({2, 4}, 11)}, [](Graph&, auto& x) { return concat(x[0], x[1], 0); }),
            tol);
  EXPECT_LT(op_grad_error({rnd({3, 4}, 12)}, [](Graph&, auto& x) { return sum(x[0]); }), tol);
  EXPECT_LT(op_grad_error({rnd({3, 4}, 12)}, [](Graph&, auto& x) { return mean(x[0]); }), tol);
  EXPECT_LT(op_grad_error({rnd({3, 5}, 13)}, [](Graph&, auto& x) { return softmax_rows(x[0]); }), tol);
  EXPECT_LT(op_grad_error({rnd({2, 3, 5}, 13)}, [](Graph&, auto& x) { return softmax_rows(x[0]); }), tol);
  // Keep values away from the kink.
  Tensor away = rnd({3, 4}, 14);
  for (double& v : away.values()) v += v >= 0 ? 0.1 : -0.1;
  EXPECT_LT(op_grad_error({away}, [](Graph&, auto& x) { return leaky_relu(x[0], 0.2); }), tol);
  EXPECT_LT(op_grad_error({rnd({3, 4}, 15)}, [](Graph&, auto& x) { return tanh(x[0]); }), tol);
  EXPECT_LT(op_grad_error({rnd({4, 3}, 16)}, [](Graph&, auto& x) { return gather_rows(x[0], {3, 0, 3, 1}); }), tol);
  EXPECT_LT(op_grad_error({rnd({1, 3}, 17)}, [](Graph&, auto& x) { return repeat_rows(x[0], 4); }), tol);
  EXPECT_LT(op_grad_error({rnd({2, 6}, 18)}, [](Graph&, auto& x) { return reshape(x[0], {3, 2, 2}); }), tol);
}

TEST(ParamSet, RejectsDuplicatesAndUnknownNames) {
  ParamSet p;
  p.add("a", Tensor({1}));
  EXPECT_THROW(p.add("a", Tensor({1})), ValidationError);
  EXPECT_THROW(p.get("b"), ValidationError);
}
