#include <cmath>

#include <gtest/gtest.h>

#include "streamduct/grad_check.hpp"
#include "streamduct/predictor.hpp"

namespace sd = streamduct;

namespace {

sd::PredictorConfig small() { return {5, 2, 3}; }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Plain-loop LSTM step for one layer, written out against the gate layout
// i f g o.
std::pair<std::vector<double>, std::vector<double>> lstm_oracle(const sd::LstmLayerWeights<sd::Tensor>& l,
                                                                const std::vector<double>& x,
                                                                const std::vector<double>& h,
                                                                const std::vector<double>& c) {
  const std::size_t d = h.size();
  std::vector<double> z(4 * d);
  for (std::size_t k = 0; k < 4 * d; ++k) {
    z[k] = l.bias(0, k);
    for (std::size_t i = 0; i < x.size(); ++i) z[k] += x[i] * l.input(i, k);
    for (std::size_t i = 0; i < d; ++i) z[k] += h[i] * l.hidden(i, k);
  }
  std::vector<double> c2(d), h2(d);
  for (std::size_t j = 0; j < d; ++j) {
    c2[j] = sigmoid(z[d + j]) * c[j] + sigmoid(z[j]) * std::tanh(z[2 * d + j]);
    h2[j] = sigmoid(z[3 * d + j]) * std::tanh(c2[j]);
  }
  return {h2, c2};
}

}  // namespace

TEST(PredictorState, InitIsZeros) {
  const auto s = sd::init_state({40, 1, 4});
  ASSERT_EQ(s.hidden.size(), 1u);
  for (double v : s.hidden[0].data()) EXPECT_EQ(v, 0.0);
  for (double v : s.cell[0].data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(s.hidden[0].size(), 4u);
  const auto t = sd::init_state({40, 1, 4});
  EXPECT_EQ(s.hidden, t.hidden);
  EXPECT_EQ(s.cell, t.cell);
}

TEST(PredictStep, ZeroWeightsGiveZeroOutput) {
  sd::Rng rng(1);
  auto w = sd::init_predictor(small(), rng);
  sd::PredictorWeights<sd::Tensor>::visit(w, "", [](const std::string&, sd::Tensor& t) { t.fill(0.0); });
  const auto [h, s] = sd::predict_step(w, 2, sd::init_state(small()));
  for (double v : h.data()) EXPECT_EQ(v, 0.0);
  for (const auto& c : s.cell)
    for (double v : c.data()) EXPECT_EQ(v, 0.0);
}

TEST(PredictStep, MatchesLoopOracle) {
  sd::Rng rng(2);
  auto w = sd::init_predictor(small(), rng);
  for (auto& l : w.layers)
    for (double& v : l.bias.values()) v = 0.3 * rng.normal();
  auto state = sd::init_state(small());
  std::vector<std::vector<double>> h(2, std::vector<double>(3, 0.0)), c = h;
  for (sd::TokenId tok : {sd::kStartToken, 4, 0, 4}) {
    const std::size_t row = tok == sd::kStartToken ? 5 : static_cast<std::size_t>(tok);
    std::vector<double> x(w.embedding.row_span(row).begin(), w.embedding.row_span(row).end());
    for (std::size_t i = 0; i < 2; ++i) {
      std::tie(h[i], c[i]) = lstm_oracle(w.layers[i], x, h[i], c[i]);
      x = h[i];
    }
    auto [out, next] = sd::predict_step(w, tok, state);
    state = next;
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out(0, j), x[j], 1e-12);
  }
}

TEST(PredictStep, SteppingEqualsUnroll) {
  sd::Rng rng(3);
  const auto w = sd::init_predictor(small(), rng);
  const sd::TokenSequence labels{3, 1, 4};
  sd::Graph g(false);
  const sd::Tensor rolled = sd::unroll(sd::bind(g, w, false), labels).value();
  ASSERT_EQ(rolled.rows(), 4u);
  auto state = sd::init_state(small());
  sd::TokenId prev = sd::kStartToken;
  for (std::size_t u = 0; u <= labels.size(); ++u) {
    auto [h, next] = sd::predict_step(w, prev, state);
    state = next;
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(h(0, j), rolled(u, j)) << "u=" << u;
    if (u < labels.size()) prev = labels[u];
  }
}

TEST(PredictStep, OutputsBoundedByOne) {
  sd::Rng rng(4);
  auto w = sd::init_predictor({5, 1, 6}, rng);
  sd::PredictorWeights<sd::Tensor>::visit(w, "", [&](const std::string&, sd::Tensor& t) {
    for (double& v : t.values()) v = 4.0 * rng.normal();
  });
  auto state = sd::init_state(w.cfg);
  for (int step = 0; step < 20; ++step) {
    auto [h, next] = sd::predict_step(w, static_cast<sd::TokenId>(rng.below(5)), state);
    state = next;
    for (double v : h.data()) {
      EXPECT_GT(v, -1.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(PredictStep, OutOfVocabularyRejected) {
  sd::Rng rng(5);
  const auto w = sd::init_predictor(small(), rng);
  EXPECT_THROW(sd::predict_step(w, 5, sd::init_state(small())), sd::InvalidArgument);
  EXPECT_THROW(sd::predict_step(w, -2, sd::init_state(small())), sd::InvalidArgument);
}

TEST(PredictorGradients, ThreeStepUnroll) {
  sd::Rng rng(6);
  const auto w = sd::init_predictor(small(), rng);
  std::vector<sd::Tensor> point;
  sd::PredictorWeights<sd::Tensor>::visit(w, "", [&](const std::string&, const sd::Tensor& t) { point.push_back(t); });
  sd::Tensor coef({4, 3});
  for (double& v : coef.values()) v = rng.normal();
  const auto rep = sd::grad_check(
      [&](sd::Graph& g, const std::vector<sd::Var>& x) {
        sd::PredictorWeights<sd::Var> bw;
        bw.cfg = w.cfg;
        bw.layers.resize(w.layers.size());
        std::size_t i = 0;
        sd::PredictorWeights<sd::Var>::visit(bw, "", [&](const std::string&, sd::Var& v) { v = x[i++]; });
        return sd::sum(sd::mul(sd::unroll(bw, {2, 0, 3}), g.constant(coef)));
      },
      point);
  ASSERT_TRUE(rep.ok) << rep.diagnostic;
  EXPECT_LE(rep.max_relative_error, 1e-4);
}
