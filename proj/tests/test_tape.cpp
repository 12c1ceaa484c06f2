// Reverse-mode autodiff: finite-difference validation of every op, gradient
// routing (stop-gradient, straight-through), accumulation semantics, and the
// non-finite guard.
#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "qseg/rng.hpp"
#include "qseg/tape.hpp"

using namespace qseg;

namespace {

constexpr double kH = 1e-5;
constexpr double kTolLinear = 1e-7;
constexpr double kTolGeneral = 1e-4;

void fill_uniform(Mat& m, Rng& rng, double lo, double hi) {
  for (double& x : m.v) x = rng.uniform(lo, hi);
}

// Fixed random coefficients turn a matrix output into a scalar while staying
// linear, so index mix-ups in a backward rule cannot cancel out.
Node dot_with(Tape& t, Node x, const Mat& r) {
  return t.sum_all(t.mul(x, t.input(r)));
}

Mat coeffs(Rng& rng, int rows, int cols) {
  Mat r(rows, cols);
  fill_uniform(r, rng, 0.5, 1.5);
  return r;
}

}  // namespace

TEST(TapeForward, ElementwiseValues) {
  Tape t;
  Node a = t.input(Mat(1, 1, 2.0));
  Node b = t.input(Mat(1, 1, 3.0));
  EXPECT_DOUBLE_EQ(t.val(t.add(a, b)).at(0, 0), 5.0);
  EXPECT_DOUBLE_EQ(t.val(t.sub(a, b)).at(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(t.val(t.mul(a, b)).at(0, 0), 6.0);
  EXPECT_DOUBLE_EQ(t.val(t.div(a, b)).at(0, 0), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(t.val(t.affine(a, 10.0, 1.0)).at(0, 0), 21.0);
  EXPECT_DOUBLE_EQ(t.val(t.relu(t.input(Mat(1, 1, -2.0)))).at(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(t.val(t.sigmoid(t.input(Mat(1, 1, 0.0)))).at(0, 0), 0.5);
  EXPECT_NEAR(t.val(t.softplus(t.input(Mat(1, 1, 0.0)))).at(0, 0), std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(t.val(t.abs(t.input(Mat(1, 1, -4.0)))).at(0, 0), 4.0);
}

TEST(TapeForward, StableSigmoidAndSoftplusAtExtremes) {
  Tape t;
  EXPECT_DOUBLE_EQ(t.val(t.sigmoid(t.input(Mat(1, 1, 800.0)))).at(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(t.val(t.sigmoid(t.input(Mat(1, 1, -800.0)))).at(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(t.val(t.softplus(t.input(Mat(1, 1, 800.0)))).at(0, 0), 800.0);
  EXPECT_DOUBLE_EQ(t.val(t.softplus(t.input(Mat(1, 1, -800.0)))).at(0, 0), 0.0);
}

TEST(TapeForward, SoftmaxRowsSumToOne) {
  Rng rng(11);
  Tape t;
  Mat x(5, 7);
  fill_uniform(x, rng, -30.0, 30.0);
  const Mat y = t.val(t.softmax_rows(t.input(x)));
  for (int r = 0; r < 5; ++r) {
    double s = 0.0;
    for (int c = 0; c < 7; ++c) {
      s += y.at(r, c);
      EXPECT_GE(y.at(r, c), 0.0);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  const Mat ly = t.val(t.log_softmax_rows(t.input(x)));
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 7; ++c) EXPECT_NEAR(std::exp(ly.at(r, c)), y.at(r, c), 1e-12);
}

TEST(TapeForward, LayerNormRowsNormalizes) {
  Rng rng(12);
  Tape t;
  Mat x(4, 9);
  fill_uniform(x, rng, -3.0, 5.0);
  const Mat y = t.val(t.layer_norm_rows(t.input(x)));
  for (int r = 0; r < 4; ++r) {
    double mean = 0.0, var = 0.0;
    for (int c = 0; c < 9; ++c) mean += y.at(r, c);
    mean /= 9;
    for (int c = 0; c < 9; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean);
    var /= 9;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-4);  // eps shifts the variance slightly below 1
  }
}

TEST(TapeGrad, LinearOps) {
  Rng rng(21);
  ParameterStore ps;
  Parameter& p = ps.create("p", 3, 4);
  fill_uniform(p.value, rng, -1.0, 1.0);
  Mat other(3, 4);
  fill_uniform(other, rng, 0.2, 1.2);
  Mat brow(1, 4);
  fill_uniform(brow, rng, 0.2, 1.2);
  Mat w(4, 5);
  fill_uniform(w, rng, -0.5, 0.5);
  Mat wl(2, 3);
  fill_uniform(wl, rng, -0.5, 0.5);
  const Mat r34 = coeffs(rng, 3, 4), r35 = coeffs(rng, 3, 5), r43 = coeffs(rng, 4, 3),
            r24 = coeffs(rng, 2, 4), r31 = coeffs(rng, 3, 1), r64 = coeffs(rng, 6, 4),
            r44 = coeffs(rng, 4, 4);

  const auto check = [&](const char* what, const std::function<Node(Tape&)>& build) {
    EXPECT_LT(finite_diff_check(build, p, kH), kTolLinear) << what;
  };
  check("add", [&](Tape& t) { return dot_with(t, t.add(t.param(p), t.input(other)), r34); });
  check("add bcast", [&](Tape& t) { return dot_with(t, t.add(t.param(p), t.input(brow)), r34); });
  check("sub", [&](Tape& t) { return dot_with(t, t.sub(t.input(other), t.param(p)), r34); });
  check("mul const", [&](Tape& t) { return dot_with(t, t.mul(t.param(p), t.input(other)), r34); });
  check("mul bcast", [&](Tape& t) { return dot_with(t, t.mul(t.param(p), t.input(brow)), r34); });
  check("affine", [&](Tape& t) { return dot_with(t, t.affine(t.param(p), -2.5, 0.7), r34); });
  check("matmul lhs", [&](Tape& t) { return dot_with(t, t.matmul(t.param(p), t.input(w)), r35); });
  check("matmul rhs", [&](Tape& t) { return dot_with(t, t.matmul(t.input(wl), t.param(p)), r24); });
  check("transpose", [&](Tape& t) { return dot_with(t, t.transpose(t.param(p)), r43); });
  check("gather", [&](Tape& t) {
    return dot_with(t, t.gather_rows(t.param(p), {2, 0, 2, 1}), r44);
  });
  check("row_sum", [&](Tape& t) { return dot_with(t, t.row_sum(t.param(p)), r31); });
  check("sum_all", [&](Tape& t) { return t.sum_all(t.mul(t.param(p), t.input(r34))); });
  check("mean_all", [&](Tape& t) { return t.mean_all(t.mul(t.param(p), t.input(r34))); });
  check("concat top", [&](Tape& t) {
    return dot_with(t, t.concat_rows(t.param(p), t.input(Mat(3, 4, 0.5))), r64);
  });
  check("concat bottom", [&](Tape& t) {
    return dot_with(t, t.concat_rows(t.input(Mat(3, 4, 0.5)), t.param(p)), r64);
  });
  check("pool", [&](Tape& t) {
    Partition part;
    part.count = 2;
    part.assign = {0, 1, 0};
    return dot_with(t, t.pool_rows(t.param(p), part), r24);
  });
  check("scatter", [&](Tape& t) {
    Mat wgt(2, 2);
    wgt.at(0, 0) = 0.3;
    wgt.at(0, 1) = 0.7;
    wgt.at(1, 0) = 1.0;
    wgt.at(1, 1) = -0.5;
    return dot_with(t, t.scatter_weighted_sum(t.param(p), wgt, {0, 2, 1, 1}), r24);
  });
}

TEST(TapeGrad, NonlinearOps) {
  Rng rng(22);
  ParameterStore ps;
  Parameter& p = ps.create("p", 3, 4);
  // generic values, kept away from relu/abs kinks
  for (double& x : p.value.v) {
    x = rng.uniform(0.2, 1.4) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  }
  Mat other(3, 4);
  fill_uniform(other, rng, 0.5, 1.5);
  const Mat r34 = coeffs(rng, 3, 4), r33 = coeffs(rng, 3, 3);

  const auto check = [&](const char* what, const std::function<Node(Tape&)>& build) {
    EXPECT_LT(finite_diff_check(build, p, kH), kTolGeneral) << what;
  };
  check("mul self", [&](Tape& t) { return dot_with(t, t.mul(t.param(p), t.param(p)), r34); });
  check("div lhs", [&](Tape& t) { return dot_with(t, t.div(t.param(p), t.input(other)), r34); });
  check("div rhs", [&](Tape& t) { return dot_with(t, t.div(t.input(other), t.param(p)), r34); });
  check("relu", [&](Tape& t) { return dot_with(t, t.relu(t.param(p)), r34); });
  check("sigmoid", [&](Tape& t) { return dot_with(t, t.sigmoid(t.param(p)), r34); });
  check("softplus", [&](Tape& t) { return dot_with(t, t.softplus(t.param(p)), r34); });
  check("sin", [&](Tape& t) { return dot_with(t, t.sin(t.param(p)), r34); });
  check("cos", [&](Tape& t) { return dot_with(t, t.cos(t.param(p)), r34); });
  check("abs", [&](Tape& t) { return dot_with(t, t.abs(t.param(p)), r34); });
  check("softmax", [&](Tape& t) { return dot_with(t, t.softmax_rows(t.param(p)), r34); });
  check("log_softmax", [&](Tape& t) { return dot_with(t, t.log_softmax_rows(t.param(p)), r34); });
  check("layer_norm", [&](Tape& t) { return dot_with(t, t.layer_norm_rows(t.param(p)), r34); });
  check("matmul square", [&](Tape& t) {
    return dot_with(t, t.matmul(t.param(p), t.transpose(t.param(p))), r33);
  });
}

TEST(TapeGrad, StopGradientBlocks) {
  ParameterStore ps;
  Parameter& p = ps.create("p", 2, 2);
  p.value.at(0, 0) = 1.0;
  p.value.at(1, 1) = 2.0;
  Tape t;
  Node loss = t.sum_all(t.stop_gradient(t.mul(t.param(p), t.param(p))));
  t.backward(loss);
  for (double g : p.grad.v) EXPECT_DOUBLE_EQ(g, 0.0);
}

TEST(TapeGrad, StraightThroughRouting) {
  Rng rng(23);
  ParameterStore ps;
  Parameter& hard_p = ps.create("hard", 2, 3);
  Parameter& soft_p = ps.create("soft", 2, 3);
  fill_uniform(hard_p.value, rng, -1.0, 1.0);
  fill_uniform(soft_p.value, rng, -1.0, 1.0);
  const Mat r = coeffs(rng, 2, 3);

  Tape t;
  Node st = t.straight_through(t.param(hard_p), t.param(soft_p));
  // forward equals hard bitwise
  EXPECT_EQ(t.val(st).v, hard_p.value.v);
  t.backward(dot_with(t, st, r));
  for (double g : hard_p.grad.v) EXPECT_DOUBLE_EQ(g, 0.0);
  for (size_t k = 0; k < r.size(); ++k) EXPECT_DOUBLE_EQ(soft_p.grad.v[k], r.v[k]);

  // and the finite-difference view: loss as a function of soft matches the
  // frozen-offset surrogate hard = soft + (hard0 - soft0)
  const Mat offset = [&] {
    Mat m(2, 3);
    for (size_t k = 0; k < m.size(); ++k) m.v[k] = hard_p.value.v[k] - soft_p.value.v[k];
    return m;
  }();
  const double err = finite_diff_check(
      [&](Tape& tt) {
        Node soft = tt.param(soft_p);
        Node hard = tt.add(soft, tt.input(offset));
        return dot_with(tt, tt.straight_through(hard, soft), r);
      },
      soft_p, kH);
  EXPECT_LT(err, kTolLinear);
}

TEST(TapeGrad, BackwardTwiceDoublesParamGrads) {
  ParameterStore ps;
  Parameter& p = ps.create("p", 2, 2);
  p.value.at(0, 0) = 0.3;
  p.value.at(0, 1) = -0.7;
  p.value.at(1, 0) = 1.1;
  p.value.at(1, 1) = 0.2;
  Tape t;
  Node loss = t.sum_all(t.mul(t.param(p), t.param(p)));
  t.backward(loss);
  const Mat g1 = p.grad;
  t.backward(loss);
  for (size_t k = 0; k < g1.size(); ++k) EXPECT_DOUBLE_EQ(p.grad.v[k], 2.0 * g1.v[k]);
}

TEST(TapeGrad, NodeGradForInputs) {
  Tape t;
  Node x = t.input(Mat(1, 3, 2.0));
  Node loss = t.sum_all(t.mul(x, x));
  t.backward(loss);
  for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(t.node_grad(x).at(0, c), 4.0);
}

TEST(TapeGrad, ParamNodeIsCachedPerTape) {
  ParameterStore ps;
  Parameter& p = ps.create("p", 1, 1);
  p.value.at(0, 0) = 3.0;
  Tape t;
  Node a = t.param(p);
  Node b = t.param(p);
  EXPECT_EQ(a.id, b.id);
}

TEST(TapeErrors, ShapeMismatchesThrow) {
  Tape t;
  Node a = t.input(Mat(2, 3, 1.0));
  Node b = t.input(Mat(3, 2, 1.0));
  EXPECT_THROW(t.add(a, b), std::invalid_argument);
  EXPECT_THROW(t.matmul(a, a), std::invalid_argument);
  EXPECT_THROW(t.concat_rows(a, b), std::invalid_argument);
  EXPECT_THROW(t.backward(a), std::invalid_argument);
  EXPECT_THROW(t.gather_rows(a, {5}), std::invalid_argument);

  // division by zero trips the finiteness guard rather than a shape check
  Tape g;
  g.check_finite = true;
  Node c = g.input(Mat(2, 3, 1.0));
  EXPECT_THROW(g.div(c, g.input(Mat(2, 3, 0.0))), std::runtime_error);
}

TEST(TapeErrors, NonFiniteGuardNamesNode) {
  Tape t;
  t.check_finite = true;
  Node a = t.input(Mat(1, 1, 1e308));
  try {
    t.add(a, a);  // overflows to inf
    FAIL() << "expected a throw";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("node"), std::string::npos) << e.what();
  }
}

TEST(TapeGrad, BroadcastRowGradientAccumulates) {
  // gradient of sum(X + r) w.r.t. the 1xC row r is the column-wise row count
  ParameterStore ps;
  Parameter& row = ps.create("row", 1, 3);
  row.value.at(0, 1) = 0.5;
  Tape t;
  Node loss = t.sum_all(t.add(t.input(Mat(4, 3, 1.0)), t.param(row)));
  t.backward(loss);
  for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(row.grad.at(0, c), 4.0);
}
