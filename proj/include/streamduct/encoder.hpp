#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "streamduct/autodiff.hpp"
#include "streamduct/errors.hpp"
#include "streamduct/synthdata.hpp"
#include "streamduct/tensor.hpp"

namespace streamduct {

/// Chunked streaming attention. Frame t (0-based) sees frame s iff
/// chunk(s) is in [chunk(t) - left_chunks, chunk(t)], chunk(i) = i / chunk_size.
struct MaskConfig {
  std::size_t chunk_size = 4;
  std::size_t left_chunks = 2;
};

struct EncoderConfig {
  static constexpr std::size_t kSubsampleFactor = 4;

  std::size_t feature_dim = 16;
  std::size_t layers = 2;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t ffn = 128;
};

using ChunkMask = std::shared_ptr<const std::vector<std::uint8_t>>;

/// T x T row-major visibility matrix, 1 = may attend.
inline ChunkMask build_chunk_mask(std::size_t frames, const MaskConfig& cfg) {
  if (cfg.chunk_size == 0) throw InvalidArgument("chunk size must be at least 1");
  if (frames == 0) throw InvalidArgument("mask needs at least one frame");
  auto mask = std::make_shared<std::vector<std::uint8_t>>(frames * frames, 0);
  for (std::size_t t = 0; t < frames; ++t) {
    const std::size_t ct = t / cfg.chunk_size;
    const std::size_t lo = ct >= cfg.left_chunks ? ct - cfg.left_chunks : 0;
    for (std::size_t s = 0; s < frames; ++s) {
      const std::size_t cs = s / cfg.chunk_size;
      (*mask)[t * frames + s] = (cs >= lo && cs <= ct) ? 1 : 0;
    }
  }
  return mask;
}

/// Inclusive, 1-based frame range that can influence output frame t.
struct ReceptionField {
  std::size_t left = 0;
  std::size_t right = 0;
  friend bool operator==(const ReceptionField&, const ReceptionField&) = default;
};

/// Receptive field of 1-based position t after `layers` masked blocks. The
/// right edge is the end of t's chunk (clipped to `frames`); the left edge
/// moves back layers * left_chunks chunks.
inline ReceptionField reception_field(std::size_t layers, std::size_t chunk_size, std::size_t left_chunks,
                                      std::size_t t, std::size_t frames) {
  if (chunk_size == 0) throw InvalidArgument("chunk size must be at least 1");
  if (t == 0 || t > frames) {
    throw InvalidArgument("frame " + std::to_string(t) + " outside [1, " + std::to_string(frames) + "]");
  }
  const std::size_t chunk = (t - 1) / chunk_size;
  const std::size_t start = chunk * chunk_size + 1;
  const std::size_t end = std::min(frames, (chunk + 1) * chunk_size);
  const std::size_t reach = layers * left_chunks * chunk_size;
  return {start > reach ? start - reach : 1, end};
}

/// Number of encoder frames produced from `input_frames` feature frames.
inline std::size_t subsampled_length(std::size_t input_frames) {
  return input_frames / EncoderConfig::kSubsampleFactor;
}

template <class W>
struct EncoderLayerWeights {
  W ln1_gain, ln1_bias;
  W wq, bq, wk, bk, wv, bv, wo, bo;
  W ln2_gain, ln2_bias;
  W ff1, ff1_bias, ff2, ff2_bias;
};

template <class W>
struct EncoderWeights {
  EncoderConfig cfg;
  W conv1, conv1_bias, conv2, conv2_bias;
  std::vector<EncoderLayerWeights<W>> layers;
  W final_gain, final_bias;

  /// Calls f(name, member) for every tensor in a fixed order.
  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f("encoder/subsample/conv1/weight", self.conv1);
    f("encoder/subsample/conv1/bias", self.conv1_bias);
    f("encoder/subsample/conv2/weight", self.conv2);
    f("encoder/subsample/conv2/bias", self.conv2_bias);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "encoder/layer" + std::to_string(i) + "/";
      f(p + "norm1/gain", l.ln1_gain);
      f(p + "norm1/bias", l.ln1_bias);
      f(p + "attn/wq", l.wq);
      f(p + "attn/bq", l.bq);
      f(p + "attn/wk", l.wk);
      f(p + "attn/bk", l.bk);
      f(p + "attn/wv", l.wv);
      f(p + "attn/bv", l.bv);
      f(p + "attn/wo", l.wo);
      f(p + "attn/bo", l.bo);
      f(p + "norm2/gain", l.ln2_gain);
      f(p + "norm2/bias", l.ln2_bias);
      f(p + "ffn/w1", l.ff1);
      f(p + "ffn/b1", l.ff1_bias);
      f(p + "ffn/w2", l.ff2);
      f(p + "ffn/b2", l.ff2_bias);
    }
    f("encoder/final_norm/gain", self.final_gain);
    f("encoder/final_norm/bias", self.final_bias);
  }
};

inline void validate(const EncoderConfig& cfg) {
  if (cfg.layers == 0 || cfg.d_model == 0 || cfg.heads == 0 || cfg.ffn == 0 || cfg.feature_dim == 0) {
    throw InvalidArgument("encoder dimensions must be positive");
  }
  if (cfg.d_model % cfg.heads != 0) throw InvalidArgument("d_model must be divisible by heads");
}

inline EncoderWeights<Tensor> init_encoder(const EncoderConfig& cfg, Rng& rng) {
  validate(cfg);
  const std::size_t d = cfg.d_model;
  auto mat = [&](std::size_t r, std::size_t c) { return seeded_init({r, c}, InitScheme::kUniformScaled, rng); };
  auto zeros = [](std::size_t n) { return Tensor::matrix(1, n); };
  auto ones = [](std::size_t n) { return Tensor::matrix(1, n, 1.0); };
  EncoderWeights<Tensor> w;
  w.cfg = cfg;
  w.conv1 = mat(3 * cfg.feature_dim, d);
  w.conv1_bias = zeros(d);
  w.conv2 = mat(3 * d, d);
  w.conv2_bias = zeros(d);
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    EncoderLayerWeights<Tensor> l;
    l.ln1_gain = ones(d);
    l.ln1_bias = zeros(d);
    l.wq = mat(d, d);
    l.bq = zeros(d);
    l.wk = mat(d, d);
    l.bk = zeros(d);
    l.wv = mat(d, d);
    l.bv = zeros(d);
    l.wo = mat(d, d);
    l.bo = zeros(d);
    l.ln2_gain = ones(d);
    l.ln2_bias = zeros(d);
    l.ff1 = mat(d, cfg.ffn);
    l.ff1_bias = zeros(cfg.ffn);
    l.ff2 = mat(cfg.ffn, d);
    l.ff2_bias = zeros(d);
    w.layers.push_back(std::move(l));
  }
  w.final_gain = ones(d);
  w.final_bias = zeros(d);
  return w;
}

/// Bind every encoder tensor into `g`. Bound Vars are appended to `bound` in
/// visit order when it is non-null.
inline EncoderWeights<Var> bind(Graph& g, const EncoderWeights<Tensor>& src, bool trainable,
                                std::vector<Var>* bound = nullptr) {
  EncoderWeights<Var> out;
  out.cfg = src.cfg;
  out.layers.resize(src.layers.size());
  std::vector<const Tensor*> tensors;
  EncoderWeights<Tensor>::visit(src, [&](const std::string&, const Tensor& t) { tensors.push_back(&t); });
  std::size_t i = 0;
  EncoderWeights<Var>::visit(out, [&](const std::string&, Var& v) {
    v = g.bind(*tensors[i++], trainable);
    if (bound) bound->push_back(v);
  });
  return out;
}

/// Sinusoidal absolute positions, frames x d.
inline Tensor positional_encoding(std::size_t frames, std::size_t d) {
  Tensor pe = Tensor::matrix(frames, d);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      pe(t, i) = (i % 2 == 0) ? std::sin(static_cast<double>(t) * freq) : std::cos(static_cast<double>(t) * freq);
    }
  }
  return pe;
}

/// Two causal stride-2 convolutions (kernel 3, one frame of left padding),
/// each followed by relu. Output frame j reads raw frames up to 4j + 3.
inline Var subsample(const EncoderWeights<Var>& w, Var features) {
  if (features.rows() < EncoderConfig::kSubsampleFactor) {
    throw InvalidArgument("subsampling needs at least " + std::to_string(EncoderConfig::kSubsampleFactor) +
                          " input frames, got " + std::to_string(features.rows()));
  }
  if (features.cols() != w.cfg.feature_dim) {
    throw InvalidArgument("feature dimension " + std::to_string(features.cols()) + " != configured " +
                          std::to_string(w.cfg.feature_dim));
  }
  Var h = relu(add_bias(matmul(frame_stack(features, 3, 2, 1), w.conv1), w.conv1_bias));
  return relu(add_bias(matmul(frame_stack(h, 3, 2, 1), w.conv2), w.conv2_bias));
}

namespace detail {

inline void require_finite(Var v, const std::string& where) {
  if (!v.value().all_finite()) throw NumericalError(where, "non-finite activation in " + where);
}

inline Var self_attention(const EncoderLayerWeights<Var>& l, Var x, std::size_t heads, const ChunkMask& mask) {
  const std::size_t d = x.cols(), dk = d / heads;
  Var q = add_bias(matmul(x, l.wq), l.bq);
  Var k = add_bias(matmul(x, l.wk), l.bk);
  Var v = add_bias(matmul(x, l.wv), l.bv);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Var> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * dk, dk);
    Var kh = slice_cols(k, h * dk, dk);
    Var vh = slice_cols(v, h * dk, dk);
    Var p = masked_softmax_rows(scale(matmul_nt(qh, kh), inv), mask);
    outs.push_back(matmul(p, vh));
  }
  Var cat = heads == 1 ? outs[0] : concat_cols(outs);
  return add_bias(matmul(cat, l.wo), l.bo);
}

}  // namespace detail

/// Transformer blocks over already-subsampled frames (T x d_model): sinusoidal
/// positions, then per block pre-norm masked self-attention and pre-norm relu
/// feedforward, each with a residual; a final layer norm closes the stack.
inline Var encode_frames(const EncoderWeights<Var>& w, Var x, const MaskConfig& mask_cfg) {
  const std::size_t T = x.rows();
  Graph& g = *x.graph();
  const ChunkMask mask = build_chunk_mask(T, mask_cfg);
  Var h = add(x, g.constant(positional_encoding(T, w.cfg.d_model)));
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const auto& l = w.layers[i];
    h = add(h, detail::self_attention(l, layer_norm_rows(h, l.ln1_gain, l.ln1_bias), w.cfg.heads, mask));
    Var ff = layer_norm_rows(h, l.ln2_gain, l.ln2_bias);
    ff = add_bias(matmul(relu(add_bias(matmul(ff, l.ff1), l.ff1_bias)), l.ff2), l.ff2_bias);
    h = add(h, ff);
    detail::require_finite(h, "encoder layer " + std::to_string(i));
  }
  return layer_norm_rows(h, w.final_gain, w.final_bias);
}

/// Full encoder: features (T_in x feature_dim) -> states (T_in/4 x d_model).
inline Var encode(const EncoderWeights<Var>& w, Var features, const MaskConfig& mask_cfg) {
  Var x = subsample(w, features);
  detail::require_finite(x, "encoder subsampling");
  return encode_frames(w, x, mask_cfg);
}

/// Inference convenience on plain tensors.
inline Tensor encode(const EncoderWeights<Tensor>& w, const Tensor& features, const MaskConfig& mask_cfg) {
  Graph g(false);
  const EncoderWeights<Var> bw = bind(g, w, false);
  return encode(bw, g.constant(features), mask_cfg).value();
}

}  // namespace streamduct
