#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "streamduct/autodiff.hpp"
#include "streamduct/synthdata.hpp"
#include "streamduct/tensor.hpp"

namespace streamduct {

struct PredictorConfig {
  std::size_t vocab = 40;  // non-blank target tokens; id `vocab` is START
  std::size_t layers = 1;
  std::size_t width = 64;  // hidden size and embedding size
};

/// Sentinel for the empty output history; has its own embedding row.
inline constexpr TokenId kStartToken = -1;

template <class W>
struct LstmLayerWeights {
  W input;   // in x 4*width, gate order i f g o
  W hidden;  // width x 4*width
  W bias;    // 1 x 4*width
};

template <class W>
struct PredictorWeights {
  PredictorConfig cfg;
  W embedding;  // (vocab + 1) x width
  std::vector<LstmLayerWeights<W>> layers;

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "embedding", self.embedding);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      const std::string p = prefix + "lstm" + std::to_string(i) + "/";
      f(p + "input", self.layers[i].input);
      f(p + "hidden", self.layers[i].hidden);
      f(p + "bias", self.layers[i].bias);
    }
  }
};

/// Per-layer hidden and cell vectors (each 1 x width).
template <class W>
struct BasicPredictorState {
  std::vector<W> hidden;
  std::vector<W> cell;
};

using PredictorState = BasicPredictorState<Tensor>;

inline PredictorState init_state(const PredictorConfig& cfg) {
  PredictorState s;
  s.hidden.assign(cfg.layers, Tensor::matrix(1, cfg.width));
  s.cell.assign(cfg.layers, Tensor::matrix(1, cfg.width));
  return s;
}

inline PredictorWeights<Tensor> init_predictor(const PredictorConfig& cfg, Rng& rng) {
  if (cfg.vocab == 0 || cfg.layers == 0 || cfg.width == 0) throw InvalidArgument("predictor dimensions must be positive");
  PredictorWeights<Tensor> w;
  w.cfg = cfg;
  w.embedding = seeded_init({cfg.vocab + 1, cfg.width}, InitScheme::kUniformScaled, rng);
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    LstmLayerWeights<Tensor> l;
    l.input = seeded_init({cfg.width, 4 * cfg.width}, InitScheme::kUniformScaled, rng);
    l.hidden = seeded_init({cfg.width, 4 * cfg.width}, InitScheme::kUniformScaled, rng);
    l.bias = Tensor::matrix(1, 4 * cfg.width);
    w.layers.push_back(std::move(l));
  }
  return w;
}

inline PredictorWeights<Var> bind(Graph& g, const PredictorWeights<Tensor>& src, bool trainable,
                                  std::vector<Var>* bound = nullptr) {
  PredictorWeights<Var> out;
  out.cfg = src.cfg;
  out.layers.resize(src.layers.size());
  std::vector<const Tensor*> tensors;
  PredictorWeights<Tensor>::visit(src, "", [&](const std::string&, const Tensor& t) { tensors.push_back(&t); });
  std::size_t i = 0;
  PredictorWeights<Var>::visit(out, "", [&](const std::string&, Var& v) {
    v = g.bind(*tensors[i++], trainable);
    if (bound) bound->push_back(v);
  });
  return out;
}

inline std::size_t embedding_row(const PredictorConfig& cfg, TokenId token) {
  if (token == kStartToken) return cfg.vocab;
  if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab) {
    throw InvalidArgument("predictor token " + std::to_string(token) + " outside vocabulary of " +
                          std::to_string(cfg.vocab));
  }
  return static_cast<std::size_t>(token);
}

inline BasicPredictorState<Var> bind_state(Graph& g, const PredictorState& s) {
  BasicPredictorState<Var> out;
  for (const Tensor& h : s.hidden) out.hidden.push_back(g.constant(h));
  for (const Tensor& c : s.cell) out.cell.push_back(g.constant(c));
  return out;
}

inline BasicPredictorState<Var> zero_state(Graph& g, const PredictorConfig& cfg) {
  return bind_state(g, init_state(cfg));
}

/// One LSTM step over the embedding of `token`. Returns the top layer's
/// hidden vector (1 x width) and the next state.
inline std::pair<Var, BasicPredictorState<Var>> predict_step(const PredictorWeights<Var>& w, TokenId token,
                                                             const BasicPredictorState<Var>& state) {
  const std::size_t d = w.cfg.width;
  Var x = embedding(w.embedding, {embedding_row(w.cfg, token)});
  BasicPredictorState<Var> next;
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const auto& l = w.layers[i];
    Var gates = add_bias(add(matmul(x, l.input), matmul(state.hidden[i], l.hidden)), l.bias);
    Var in = sigmoid(slice_cols(gates, 0, d));
    Var forget = sigmoid(slice_cols(gates, d, d));
    Var cand = tanh(slice_cols(gates, 2 * d, d));
    Var out = sigmoid(slice_cols(gates, 3 * d, d));
    Var c = add(mul(forget, state.cell[i]), mul(in, cand));
    Var h = mul(out, tanh(c));
    next.hidden.push_back(h);
    next.cell.push_back(c);
    x = h;
  }
  return {x, std::move(next)};
}

/// Predictor outputs for histories START, y1, ..., yU: (U+1) x width, row u
/// conditioned on the first u labels.
inline Var unroll(const PredictorWeights<Var>& w, const TokenSequence& labels) {
  Graph& g = *w.embedding.graph();
  BasicPredictorState<Var> state = zero_state(g, w.cfg);
  std::vector<Var> rows;
  auto [h, s] = predict_step(w, kStartToken, state);
  rows.push_back(h);
  state = std::move(s);
  for (TokenId y : labels) {
    auto [h2, s2] = predict_step(w, y, state);
    rows.push_back(h2);
    state = std::move(s2);
  }
  return rows.size() == 1 ? rows[0] : concat_rows(rows);
}

/// Value-level step for decoding: returns (h_pred, next state).
inline std::pair<Tensor, PredictorState> predict_step(const PredictorWeights<Tensor>& w, TokenId token,
                                                      const PredictorState& state) {
  Graph g(false);
  const PredictorWeights<Var> bw = bind(g, w, false);
  auto [h, next] = predict_step(bw, token, bind_state(g, state));
  PredictorState out;
  for (const Var& v : next.hidden) out.hidden.push_back(v.value());
  for (const Var& v : next.cell) out.cell.push_back(v.value());
  return {h.value(), std::move(out)};
}

}  // namespace streamduct
