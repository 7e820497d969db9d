#include <cmath>

#include <gtest/gtest.h>

#include "streamduct/grad_check.hpp"
#include "streamduct/joint.hpp"

namespace sd = streamduct;
using LD = long double;

namespace {

using Vec = std::vector<LD>;

Vec row_times(const Vec& h, const sd::Tensor& m) {
  Vec out(m.cols(), 0.0L);
  for (std::size_t k = 0; k < m.cols(); ++k)
    for (std::size_t i = 0; i < h.size(); ++i) out[k] += h[i] * static_cast<LD>(m(i, k));
  return out;
}

LD act(LD x, sd::Activation f) { return f == sd::Activation::kTanh ? std::tanh(x) : std::max(x, 0.0L); }

Vec softmax(const Vec& v) {
  LD z = 0.0L;
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) z += (out[i] = std::exp(v[i]));
  for (LD& x : out) x /= z;
  return out;
}

LD dot(const Vec& a, const Vec& b) {
  LD s = 0.0L;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Pooling scalar written out per variant.
LD pooled(const sd::JointParams& p, const Vec& h, bool enc) {
  const auto f = p.cfg.activation;
  switch (p.cfg.variant) {
    case sd::JointVariant::kBilinear:
      return act(row_times(h, enc ? p.enc_pool : p.pred_pool)[0], f);
    case sd::JointVariant::kAttention:
      return act(dot(softmax(row_times(h, enc ? p.enc_pool : p.pred_pool)), h), f);
    case sd::JointVariant::kQkvAttention: {
      const Vec q = row_times(h, enc ? p.enc_q : p.pred_q), k = row_times(h, enc ? p.enc_k : p.pred_k);
      Vec qk(q.size());
      for (std::size_t i = 0; i < q.size(); ++i) qk[i] = q[i] * k[i];
      return act(dot(softmax(qk), row_times(h, enc ? p.enc_v : p.pred_v)), f);
    }
    case sd::JointVariant::kLinear:
      break;
  }
  return 0.0L;
}

Vec oracle(const sd::JointParams& p, const Vec& he, const Vec& hp) {
  const Vec a = row_times(he, p.enc_proj), b = row_times(hp, p.pred_proj);
  Vec pre(a.size());
  const LD v = p.cfg.variant == sd::JointVariant::kLinear ? 0.0L : pooled(p, he, true) * pooled(p, hp, false);
  for (std::size_t j = 0; j < pre.size(); ++j) {
    pre[j] = act(a[j] + b[j] + static_cast<LD>(p.bias(0, j)) + v * static_cast<LD>(p.pool_proj.size() ? p.pool_proj(0, j) : 0.0),
                 p.cfg.activation);
  }
  Vec z = row_times(pre, p.out);
  for (std::size_t k = 0; k < z.size(); ++k) z[k] += static_cast<LD>(p.out_bias(0, k));
  return z;
}

sd::JointParams random_params(sd::JointConfig cfg, sd::Rng& rng) {
  sd::JointParams p = sd::zero_joint(cfg);
  sd::JointParams::visit(p, "", [&](const std::string&, sd::Tensor& t) {
    for (double& v : t.values()) v = rng.normal();
  });
  return p;
}

std::vector<double> random_vec(std::size_t n, sd::Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

sd::JointParams ones(sd::JointConfig cfg) {
  sd::JointParams p = sd::zero_joint(cfg);
  sd::JointParams::visit(p, "", [&](const std::string& name, sd::Tensor& t) {
    if (name != "bias" && name != "out_bias") t.fill(1.0);
  });
  return p;
}

constexpr sd::JointVariant kAll[] = {sd::JointVariant::kLinear, sd::JointVariant::kBilinear,
                                     sd::JointVariant::kAttention, sd::JointVariant::kQkvAttention};

}  // namespace

TEST(JointLinear, ZeroWeightsGiveZeroLogits) {
  const auto p = sd::zero_joint({sd::JointVariant::kLinear, sd::Activation::kTanh, 3, 2, 4, 5});
  for (double z : sd::joint_linear(std::vector<double>{1, 2, 3}, std::vector<double>{4, 5}, p)) EXPECT_EQ(z, 0.0);
}

TEST(JointLinear, ScalarUnitWeights) {
  const auto p = ones({sd::JointVariant::kLinear, sd::Activation::kTanh, 1, 1, 1, 1});
  const auto z = sd::joint_linear(std::vector<double>{0.5}, std::vector<double>{0.5}, p);
  EXPECT_NEAR(z[0], 0.76159, 5e-6);
  EXPECT_DOUBLE_EQ(z[0], std::tanh(1.0));
}

TEST(JointLinear, ReluPiecewiseLinearity) {
  sd::Rng rng(1);
  auto p = random_params({sd::JointVariant::kLinear, sd::Activation::kRelu, 3, 2, 4, 5}, rng);
  // Positive projections and inputs keep every pre-activation above zero.
  for (auto* t : {&p.enc_proj, &p.pred_proj})
    for (double& v : t->values()) v = std::abs(v);
  p.bias.fill(0.1);
  const std::vector<double> he{0.3, 0.7, 1.1}, hp{0.4, 0.9}, ze{0, 0, 0}, zp{0, 0};
  const auto a = sd::joint_linear(he, zp, p), b = sd::joint_linear(ze, hp, p), c = sd::joint_linear(ze, zp, p),
             d = sd::joint_linear(he, hp, p);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(a[k] + b[k] - c[k], d[k], 1e-12);
}

TEST(JointLinear, MatchesOracle) {
  sd::Rng rng(2);
  const auto p = random_params({sd::JointVariant::kLinear, sd::Activation::kTanh, 3, 2, 4, 5}, rng);
  const auto he = random_vec(3, rng), hp = random_vec(2, rng);
  const auto z = sd::joint_linear(he, hp, p);
  const auto want = oracle(p, {he.begin(), he.end()}, {hp.begin(), hp.end()});
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(z[k], static_cast<double>(want[k]), 1e-10);
}

TEST(JointAttention, SingleElementSoftmaxIsIdentityWeight) {
  sd::Rng rng(3);
  auto p = random_params({sd::JointVariant::kAttention, sd::Activation::kTanh, 1, 1, 2, 3}, rng);
  const double he = 0.8, hp = -0.3;
  const auto z = sd::joint_attention(std::vector<double>{he}, std::vector<double>{hp}, p);
  // v_enc = tanh(he), v_pred = tanh(hp) regardless of the attention matrices.
  auto q = p;
  q.cfg.variant = sd::JointVariant::kBilinear;
  q.enc_pool = sd::Tensor({1, 1}, {1.0});
  q.pred_pool = sd::Tensor({1, 1}, {1.0});
  const auto want = sd::joint_bilinear(std::vector<double>{he}, std::vector<double>{hp}, q);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(z[k], want[k], 1e-15);
}

TEST(JointAttention, MatchesOracleBothActivations) {
  sd::Rng rng(4);
  for (auto f : {sd::Activation::kTanh, sd::Activation::kRelu}) {
    for (int trial = 0; trial < 10; ++trial) {
      const auto p = random_params({sd::JointVariant::kAttention, f, 3, 2, 4, 5}, rng);
      const auto he = random_vec(3, rng), hp = random_vec(2, rng);
      const auto z = sd::joint_attention(he, hp, p);
      const auto want = oracle(p, {he.begin(), he.end()}, {hp.begin(), hp.end()});
      for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(z[k], static_cast<double>(want[k]), 1e-10);
    }
  }
}

TEST(JointQkv, ZeroQueryKeyAveragesValues) {
  sd::Rng rng(5);
  auto p = random_params({sd::JointVariant::kQkvAttention, sd::Activation::kTanh, 3, 2, 4, 5}, rng);
  p.enc_q.fill(0.0);
  p.enc_k.fill(0.0);
  p.pred_q.fill(0.0);
  p.pred_k.fill(0.0);
  const auto he = random_vec(3, rng), hp = random_vec(2, rng);
  const Vec ve = row_times({he.begin(), he.end()}, p.enc_v), vp = row_times({hp.begin(), hp.end()}, p.pred_v);
  const LD pool = std::tanh((ve[0] + ve[1] + ve[2]) / 3.0L) * std::tanh((vp[0] + vp[1]) / 2.0L);
  auto lin = p;
  lin.cfg.variant = sd::JointVariant::kLinear;
  for (std::size_t j = 0; j < 4; ++j) lin.bias(0, j) += static_cast<double>(pool) * p.pool_proj(0, j);
  const auto z = sd::joint_qkv_attention(he, hp, p), want = sd::joint_linear(he, hp, lin);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(z[k], want[k], 1e-12);
}

TEST(JointQkv, IdentityWeightsReduceToSelfWeighting) {
  sd::Rng rng(6);
  auto p = random_params({sd::JointVariant::kQkvAttention, sd::Activation::kTanh, 3, 3, 4, 5}, rng);
  for (auto* m : {&p.enc_q, &p.enc_k, &p.enc_v, &p.pred_q, &p.pred_k, &p.pred_v}) {
    m->fill(0.0);
    for (std::size_t i = 0; i < 3; ++i) (*m)(i, i) = 1.0;
  }
  const auto he = random_vec(3, rng), hp = random_vec(3, rng);
  auto self = [](const std::vector<double>& h) {
    Vec sq(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) sq[i] = static_cast<LD>(h[i]) * h[i];
    return std::tanh(dot(softmax(sq), Vec(h.begin(), h.end())));
  };
  auto lin = p;
  lin.cfg.variant = sd::JointVariant::kLinear;
  for (std::size_t j = 0; j < 4; ++j) lin.bias(0, j) += static_cast<double>(self(he) * self(hp)) * p.pool_proj(0, j);
  const auto z = sd::joint_qkv_attention(he, hp, p), want = sd::joint_linear(he, hp, lin);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(z[k], want[k], 1e-12);
}

TEST(JointQkv, MatchesOracle) {
  sd::Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_params({sd::JointVariant::kQkvAttention, sd::Activation::kTanh, 3, 2, 4, 5}, rng);
    const auto he = random_vec(3, rng), hp = random_vec(2, rng);
    const auto z = sd::joint_qkv_attention(he, hp, p);
    const auto want = oracle(p, {he.begin(), he.end()}, {hp.begin(), hp.end()});
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(z[k], static_cast<double>(want[k]), 1e-10);
  }
}

TEST(JointBilinear, ZeroPoolVectorsReduceToLinear) {
  sd::Rng rng(8);
  const auto p = random_params({sd::JointVariant::kBilinear, sd::Activation::kTanh, 3, 2, 4, 5}, rng);
  auto q = p;
  q.enc_pool.fill(0.0);
  q.pred_pool.fill(0.0);
  auto lin = p;
  lin.cfg.variant = sd::JointVariant::kLinear;
  const auto he = random_vec(3, rng), hp = random_vec(2, rng);
  EXPECT_EQ(sd::joint_bilinear(he, hp, q), sd::joint_linear(he, hp, lin));
}

TEST(JointBilinear, EncoderScalar) {
  auto p = sd::zero_joint({sd::JointVariant::kBilinear, sd::Activation::kTanh, 2, 1, 1, 1});
  p.enc_pool = sd::Tensor({2, 1}, {1.0, 1.0});
  p.pred_pool = sd::Tensor({1, 1}, {1.0});
  p.pool_proj.fill(1.0);
  p.out.fill(1.0);
  // Only the pooling path is live, so z = tanh(v_enc * v_pred).
  const double hp = 2.0;
  const auto z = sd::joint_bilinear(std::vector<double>{0.2, 0.3}, std::vector<double>{hp}, p);
  const double v_enc = std::atanh(z[0]) / std::tanh(hp);
  EXPECT_NEAR(v_enc, 0.46212, 5e-6);
  EXPECT_NEAR(v_enc, std::tanh(0.5), 1e-12);
}

TEST(JointBilinear, MatchesOracle) {
  sd::Rng rng(9);
  const auto p = random_params({sd::JointVariant::kBilinear, sd::Activation::kRelu, 3, 2, 4, 5}, rng);
  const auto he = random_vec(3, rng), hp = random_vec(2, rng);
  const auto z = sd::joint_bilinear(he, hp, p);
  const auto want = oracle(p, {he.begin(), he.end()}, {hp.begin(), hp.end()});
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(z[k], static_cast<double>(want[k]), 1e-10);
}

TEST(Joint, WrongVariantOrShapeRejected) {
  const auto p = sd::zero_joint({sd::JointVariant::kLinear, sd::Activation::kTanh, 3, 2, 4, 5});
  EXPECT_THROW(sd::joint_attention(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2}, p), sd::InvalidArgument);
  EXPECT_THROW(sd::joint_linear(std::vector<double>{1, 2}, std::vector<double>{1, 2}, p), sd::InvalidArgument);
  EXPECT_THROW(sd::joint_linear(std::vector<double>{1, 2, 3}, std::vector<double>{1}, p), sd::InvalidArgument);
}

TEST(ParamCount, ClosedForms) {
  EXPECT_EQ(sd::param_count(sd::JointVariant::kBilinear, 320, 1024, 512), 1856u);
  EXPECT_EQ(sd::param_count(sd::JointVariant::kAttention, 64, 64, 64), 8256u);
  EXPECT_EQ(sd::param_count(sd::JointVariant::kQkvAttention, 64, 64, 64), 24640u);
  EXPECT_EQ(sd::param_count(sd::JointVariant::kLinear, 64, 64, 64), 0u);
  EXPECT_THROW(sd::param_count(sd::JointVariant::kAttention, 0, 64, 64), sd::InvalidArgument);
}

TEST(ParamCount, MatchesAllocatedTensors) {
  for (auto v : kAll) {
    auto count = [](const sd::JointParams& p) {
      std::size_t n = 0;
      sd::JointParams::visit(p, "", [&](const std::string&, const sd::Tensor& t) { n += t.size(); });
      return n;
    };
    const auto lin = sd::zero_joint({sd::JointVariant::kLinear, sd::Activation::kTanh, 6, 5, 7, 4});
    const auto p = sd::zero_joint({v, sd::Activation::kTanh, 6, 5, 7, 4});
    EXPECT_EQ(count(p) - count(lin), sd::param_count(v, 6, 5, 7)) << sd::variant_name(v);
  }
}

TEST(Joint, DegeneracyBitIdentical) {
  sd::Rng rng(10);
  for (auto f : {sd::Activation::kTanh, sd::Activation::kRelu}) {
    const auto base = random_params({sd::JointVariant::kLinear, f, 3, 2, 4, 5}, rng);
    const auto he = random_vec(3, rng), hp = random_vec(2, rng);
    for (auto v : {sd::JointVariant::kBilinear, sd::JointVariant::kAttention, sd::JointVariant::kQkvAttention}) {
      auto p = random_params({v, f, 3, 2, 4, 5}, rng);
      p.enc_proj = base.enc_proj;
      p.pred_proj = base.pred_proj;
      p.bias = base.bias;
      p.out = base.out;
      p.out_bias = base.out_bias;
      p.pool_proj.fill(0.0);
      EXPECT_EQ(sd::joint_logits(he, hp, p), sd::joint_linear(he, hp, base)) << sd::variant_name(v);
    }
  }
}

TEST(Joint, GridLogitsMatchPerPair) {
  sd::Rng rng(11);
  for (auto v : kAll) {
    const auto p = random_params({v, sd::Activation::kTanh, 3, 2, 4, 5}, rng);
    sd::Tensor he({4, 3}), hp({3, 2});
    for (double& x : he.values()) x = rng.normal();
    for (double& x : hp.values()) x = rng.normal();
    sd::Graph g(false);
    const sd::Tensor grid = sd::joint_logits(sd::bind(g, p, false), g.constant(he), g.constant(hp)).value();
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t u = 0; u < 3; ++u) {
        const auto z = sd::joint_logits(he.row_span(t), hp.row_span(u), p);
        for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(grid(t * 3 + u, k), z[k], 1e-14);
      }
  }
}

TEST(Joint, LogSoftmaxNormalizedEverywhere) {
  sd::Rng rng(12);
  for (auto v : kAll) {
    const auto p = random_params({v, sd::Activation::kRelu, 3, 2, 4, 6}, rng);
    sd::Tensor he({5, 3}), hp({4, 2});
    for (double& x : he.values()) x = 3.0 * rng.normal();
    for (double& x : hp.values()) x = 3.0 * rng.normal();
    sd::Graph g(false);
    const sd::Tensor lp =
        sd::log_softmax_rows(sd::joint_logits(sd::bind(g, p, false), g.constant(he), g.constant(hp))).value();
    for (std::size_t r = 0; r < lp.rows(); ++r) {
      double z = 0.0;
      for (double x : lp.row_span(r)) z += std::exp(x);
      EXPECT_NEAR(std::log(z), 0.0, 1e-6);
    }
  }
}

TEST(Joint, AllVariantsPassGradCheck) {
  sd::Rng rng(13);
  for (auto v : kAll) {
    for (auto f : {sd::Activation::kTanh, sd::Activation::kRelu}) {
      const sd::JointConfig cfg{v, f, 3, 2, 4, 5};
      const auto p = random_params(cfg, rng);
      std::vector<sd::Tensor> point{sd::Tensor({2, 3}), sd::Tensor({3, 2})};
      for (auto& t : point)
        for (double& x : t.values()) x = rng.normal();
      sd::JointParams::visit(p, "", [&](const std::string&, const sd::Tensor& t) { point.push_back(t); });
      const auto rep = sd::grad_check(
          [cfg](sd::Graph&, const std::vector<sd::Var>& x) {
            sd::JointWeights<sd::Var> w;
            w.cfg = cfg;
            std::size_t i = 2;
            sd::JointWeights<sd::Var>::visit(w, "", [&](const std::string&, sd::Var& s) { s = x[i++]; });
            return sd::sum(sd::joint_logits(w, x[0], x[1]));
          },
          point);
      ASSERT_TRUE(rep.ok) << rep.diagnostic;
      EXPECT_LE(rep.max_relative_error, 1e-4) << sd::variant_name(v) << "/" << sd::activation_name(f);
    }
  }
}
