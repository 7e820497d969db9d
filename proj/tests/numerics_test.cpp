#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "streamduct/autodiff.hpp"
#include "streamduct/grad_check.hpp"
#include "streamduct/joint.hpp"
#include "streamduct/tensor.hpp"
#include "streamduct/transducer_loss.hpp"

namespace sd = streamduct;

namespace {

sd::Tensor random_tensor(sd::Shape shape, sd::Rng& rng, double scale = 1.0) {
  sd::Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

// Sum of the op's output weighted by fixed random coefficients, so every
// output element carries gradient.
sd::Var weighted_sum(sd::Var y, const sd::Tensor& w) { return sd::sum(sd::mul(y, y.graph()->constant(w))); }

double check_op(const std::function<sd::Var(const std::vector<sd::Var>&)>& op, const std::vector<sd::Tensor>& point,
                std::uint64_t seed) {
  sd::Rng rng(seed);
  sd::Tensor w;
  {
    sd::Graph g(false);
    std::vector<sd::Var> vars;
    for (const auto& t : point) vars.push_back(g.constant(t));
    w = random_tensor(op(vars).value().shape(), rng);
  }
  const auto rep = sd::grad_check([&](sd::Graph&, const std::vector<sd::Var>& x) { return weighted_sum(op(x), w); },
                                  point);
  EXPECT_TRUE(rep.ok) << rep.diagnostic;
  return rep.max_relative_error;
}

}  // namespace

TEST(Tensor, RejectsEmptyAndZeroExtents) {
  EXPECT_THROW(sd::Tensor(sd::Shape{}), sd::InvalidArgument);
  EXPECT_THROW(sd::Tensor(sd::Shape{2, 0}), sd::InvalidArgument);
  EXPECT_THROW(sd::Tensor({2, 2}, std::vector<double>{1, 2, 3}), sd::InvalidArgument);
}

TEST(Tensor, ElementCountIsProductOfExtents) {
  const sd::Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 12u);
}

TEST(Softmax, SymmetricPair) {
  const auto p = sd::softmax(std::vector<double>{0.0, 0.0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, LogTwo) {
  const auto p = sd::softmax(std::vector<double>{0.0, std::log(2.0)});
  EXPECT_NEAR(p[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 2.0 / 3.0, 1e-15);
}

TEST(Softmax, MatchesExtendedPrecisionFormula) {
  sd::Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(5);
    for (double& x : v) x = 3.0 * rng.normal();
    long double z = 0.0L;
    for (double x : v) z += std::exp(static_cast<long double>(x));
    const auto p = sd::softmax(v);
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      EXPECT_NEAR(p[i], static_cast<double>(std::exp(static_cast<long double>(v[i])) / z), 1e-12);
      total += p[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Softmax, ShiftInvariant) {
  const std::vector<double> v{0.3, -1.2, 2.5, 0.0};
  std::vector<double> w = v;
  for (double& x : w) x += 17.25;
  const auto a = sd::softmax(v), b = sd::softmax(w);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
}

TEST(Softmax, RejectsNonFiniteAndEmpty) {
  EXPECT_THROW(sd::softmax(std::vector<double>{0.0, NAN}), sd::InvalidArgument);
  EXPECT_THROW(sd::softmax(std::vector<double>{INFINITY}), sd::InvalidArgument);
  EXPECT_THROW(sd::softmax(std::vector<double>{}), sd::InvalidArgument);
}

TEST(SeededInit, Zeros) {
  sd::Rng rng(1);
  const sd::Tensor t = sd::seeded_init({2, 2}, sd::InitScheme::kZeros, rng);
  for (double v : t.data()) EXPECT_EQ(v, 0.0);
}

TEST(SeededInit, UniformScaledBound) {
  sd::Rng rng(1);
  const sd::Tensor t = sd::seeded_init({3, 3}, sd::InitScheme::kUniformScaled, rng);
  for (double v : t.data()) EXPECT_LE(std::abs(v), 1.0);
}

TEST(SeededInit, SameSeedSameTensor) {
  sd::Rng a(99), b(99);
  EXPECT_EQ(sd::seeded_init({4, 5}, sd::InitScheme::kUniformScaled, a),
            sd::seeded_init({4, 5}, sd::InitScheme::kUniformScaled, b));
}

TEST(SeededInit, ZeroExtentRejected) {
  sd::Rng rng(1);
  EXPECT_THROW(sd::seeded_init({0, 3}, sd::InitScheme::kZeros, rng), sd::InvalidArgument);
}

TEST(Rng, SameSeedSameSequence) {
  sd::Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(a.next_u64(), b.next_u64());
    EXPECT_EQ(a.normal(), b.normal());
    EXPECT_EQ(a.below(7), b.below(7));
  }
}

TEST(GradCheck, Quadratic) {
  const auto rep = sd::grad_check([](sd::Graph&, const std::vector<sd::Var>& x) { return sd::sum(sd::mul(x[0], x[0])); },
                                  {sd::Tensor::row({1.0, 2.0})});
  ASSERT_TRUE(rep.ok);
  EXPECT_LE(rep.max_relative_error, 1e-9);
  sd::Graph g(true);
  sd::Var x = g.leaf(sd::Tensor::row({1.0, 2.0}));
  g.backward(sd::sum(sd::mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(GradCheck, TwoByOneLattice) {
  sd::Rng rng(5);
  const sd::Tensor logits = random_tensor({2 * 2, 3}, rng);
  const auto rep = sd::grad_check(
      [](sd::Graph&, const std::vector<sd::Var>& x) {
        return sd::transducer_nll(sd::log_softmax_rows(x[0]), 2, sd::TokenSequence{1});
      },
      {logits});
  ASSERT_TRUE(rep.ok);
  EXPECT_LE(rep.max_relative_error, 1e-6);
}

TEST(GradCheck, AttentionPoolingComponent) {
  sd::Rng rng(6);
  const sd::JointConfig cfg{sd::JointVariant::kAttention, sd::Activation::kTanh, 3, 2, 4, 5};
  sd::JointParams p = sd::init_joint(cfg, rng);
  p.pool_proj = random_tensor(p.pool_proj.shape(), rng);
  std::vector<sd::Tensor> point{random_tensor({1, 3}, rng), random_tensor({1, 2}, rng)};
  sd::JointParams::visit(p, "", [&](const std::string&, const sd::Tensor& t) { point.push_back(t); });
  const auto rep = sd::grad_check(
      [cfg](sd::Graph&, const std::vector<sd::Var>& x) {
        sd::JointWeights<sd::Var> w;
        w.cfg = cfg;
        std::size_t i = 2;
        sd::JointWeights<sd::Var>::visit(w, "", [&](const std::string&, sd::Var& v) { v = x[i++]; });
        return sd::slice_cols(sd::joint_logits(w, x[0], x[1]), 2, 1);
      },
      point);
  ASSERT_TRUE(rep.ok);
  EXPECT_LE(rep.max_relative_error, 1e-6);
}

TEST(GradCheck, NonFiniteValueIsReportedNotThrown) {
  const auto rep = sd::grad_check(
      [](sd::Graph&, const std::vector<sd::Var>& x) { return sd::sum(sd::scale(x[0], INFINITY)); },
      {sd::Tensor::row({1.0})});
  EXPECT_FALSE(rep.ok);
  EXPECT_FALSE(rep.diagnostic.empty());
}

TEST(GradCheck, RejectsStepOutsideRange) {
  auto f = [](sd::Graph&, const std::vector<sd::Var>& x) { return sd::sum(x[0]); };
  EXPECT_THROW(sd::grad_check(f, {sd::Tensor::row({1.0})}, 1e-3), sd::InvalidArgument);
  EXPECT_THROW(sd::grad_check(f, {sd::Tensor::row({1.0})}, 1e-9), sd::InvalidArgument);
}

// Every differentiable op against central differences.
TEST(OpGradients, AllOpsWithinTolerance) {
  sd::Rng rng(21);
  const auto A = random_tensor({3, 4}, rng), B = random_tensor({4, 2}, rng), C = random_tensor({3, 4}, rng);
  const auto D = random_tensor({5, 4}, rng), row = random_tensor({1, 4}, rng);
  const double tol = 1e-4;
  using V = std::vector<sd::Var>;
  EXPECT_LE(check_op([](const V& x) { return sd::matmul(x[0], x[1]); }, {A, B}, 1), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::matmul_nt(x[0], x[1]); }, {A, D}, 2), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::mul(x[0], x[1]); }, {A, C}, 3), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::add(x[0], x[1]); }, {A, C}, 4), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::sub(x[0], x[1]); }, {A, C}, 5), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::add_bias(x[0], x[1]); }, {A, row}, 6), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::row_dot(x[0], x[1]); }, {A, C}, 7), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::tanh(x[0]); }, {A}, 8), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::relu(x[0]); }, {A}, 9), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::sigmoid(x[0]); }, {A}, 10), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::softmax_rows(x[0]); }, {A}, 11), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::log_softmax_rows(x[0]); }, {A}, 12), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::layer_norm_rows(x[0], x[1], x[2]); },
                     {A, random_tensor({1, 4}, rng), random_tensor({1, 4}, rng)}, 13),
            tol);
  EXPECT_LE(check_op([](const V& x) { return sd::embedding(x[0], {2, 0, 2}); }, {D}, 14), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::transpose(x[0]); }, {A}, 15), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::slice_cols(x[0], 1, 2); }, {A}, 16), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::slice_rows(x[0], 1, 2); }, {A}, 17), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::concat_cols({x[0], x[1]}); }, {A, C}, 18), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::concat_rows({x[0], x[1]}); }, {A, D}, 19), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::frame_stack(x[0], 3, 2, 1); }, {D}, 20), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::pair_sum(x[0], x[1]); }, {A, D}, 21), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::outer(x[0], x[1]); },
                     {random_tensor({3, 1}, rng), random_tensor({4, 1}, rng)}, 22),
            tol);
  auto mask = std::make_shared<std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 1, 0, 0, 1, 0, 1, 1, 0, 1, 1, 1});
  EXPECT_LE(check_op([mask](const V& x) { return sd::masked_softmax_rows(x[0], mask); }, {A}, 23), tol);
  EXPECT_LE(check_op([](const V& x) { return sd::scale(x[0], -2.5); }, {A}, 24), tol);
}

TEST(OpValues, SoftmaxRowsNormalized) {
  sd::Rng rng(8);
  sd::Graph g(false);
  const sd::Tensor y = sd::softmax_rows(g.constant(random_tensor({6, 9}, rng, 5.0))).value();
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (double v : y.row_span(r)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(OpValues, MaskedEntriesAreExactlyZero) {
  sd::Graph g(false);
  auto mask = std::make_shared<std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 1, 1});
  const sd::Tensor y = sd::masked_softmax_rows(g.constant(sd::Tensor({2, 2}, {3.0, 100.0, 1.0, 1.0})), mask).value();
  EXPECT_EQ(y(0, 0), 1.0);
  EXPECT_EQ(y(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(y(1, 0), 0.5);
}

TEST(OpValues, FrameStackLength) {
  sd::Graph g(false);
  EXPECT_EQ(sd::frame_stack(g.constant(sd::Tensor::matrix(16, 2)), 3, 2, 1).rows(), 8u);
  EXPECT_EQ(sd::frame_stack(g.constant(sd::Tensor::matrix(9, 2)), 3, 2, 1).rows(), 4u);
}

TEST(Determinism, RepeatedEvaluationBitIdentical) {
  auto run = [] {
    sd::Rng rng(77);
    sd::Graph g(true);
    sd::Var a = g.leaf(random_tensor({8, 8}, rng));
    sd::Var b = g.leaf(random_tensor({8, 8}, rng));
    sd::Var y = sd::sum(sd::tanh(sd::matmul(a, b)));
    g.backward(y);
    return std::make_pair(y.value(), a.grad());
  };
  EXPECT_EQ(run(), run());
}
