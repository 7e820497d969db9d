#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "streamduct/autodiff.hpp"
#include "streamduct/errors.hpp"
#include "streamduct/tensor.hpp"

namespace streamduct {

/// LINEAR fuses by addition only. The pooled variants add a rank-one term
/// proj * (v_enc * v_pred) whose scalars come from:
///   BILINEAR   v = f(w . h)
///   ATTN       v = f(softmax(h W) . h)
///   QKV_ATTN   v = f(softmax(h Wq * h Wk) . (h Wv))
enum class JointVariant { kLinear, kBilinear, kAttention, kQkvAttention };

inline std::string_view variant_name(JointVariant v) {
  switch (v) {
    case JointVariant::kLinear: return "linear";
    case JointVariant::kBilinear: return "bilinear";
    case JointVariant::kAttention: return "attn";
    case JointVariant::kQkvAttention: return "qkv";
  }
  return "?";
}

inline JointVariant parse_variant(std::string_view name) {
  if (name == "linear") return JointVariant::kLinear;
  if (name == "bilinear") return JointVariant::kBilinear;
  if (name == "attn") return JointVariant::kAttention;
  if (name == "qkv") return JointVariant::kQkvAttention;
  throw InvalidArgument("unknown joint variant '" + std::string(name) + "'");
}

inline std::string_view activation_name(Activation f) { return f == Activation::kTanh ? "tanh" : "relu"; }

inline Activation parse_activation(std::string_view name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "relu") return Activation::kRelu;
  throw InvalidArgument("unknown activation '" + std::string(name) + "'");
}

struct JointConfig {
  JointVariant variant = JointVariant::kLinear;
  Activation activation = Activation::kTanh;
  std::size_t d_enc = 64;
  std::size_t d_pred = 64;
  std::size_t d_joint = 64;
  std::size_t d_out = 41;  // vocabulary + blank
};

/// Extra parameters of a pooled variant over LINEAR. Pooling matrices carry
/// no biases.
inline std::size_t param_count(JointVariant variant, std::size_t d_enc, std::size_t d_pred, std::size_t d_joint) {
  if (d_enc == 0 || d_pred == 0 || d_joint == 0) throw InvalidArgument("param_count: dimensions must be positive");
  switch (variant) {
    case JointVariant::kLinear: return 0;
    case JointVariant::kBilinear: return d_enc + d_pred + d_joint;
    case JointVariant::kAttention: return d_enc * d_enc + d_pred * d_pred + d_joint;
    case JointVariant::kQkvAttention: return 3 * d_enc * d_enc + 3 * d_pred * d_pred + d_joint;
  }
  throw InvalidArgument("param_count: unknown variant");
}

template <class W>
struct JointWeights {
  JointConfig cfg;
  // Shared by all variants.
  W enc_proj;   // d_enc x d_joint
  W pred_proj;  // d_pred x d_joint
  W bias;       // 1 x d_joint
  W out;        // d_joint x d_out
  W out_bias;   // 1 x d_out
  // BILINEAR: d x 1 vectors. ATTN: d x d attention matrices.
  W enc_pool, pred_pool;
  // QKV_ATTN.
  W enc_q, enc_k, enc_v, pred_q, pred_k, pred_v;
  // All pooled variants: 1 x d_joint.
  W pool_proj;

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "enc_proj", self.enc_proj);
    f(prefix + "pred_proj", self.pred_proj);
    f(prefix + "bias", self.bias);
    f(prefix + "out", self.out);
    f(prefix + "out_bias", self.out_bias);
    switch (self.cfg.variant) {
      case JointVariant::kLinear:
        return;
      case JointVariant::kBilinear:
      case JointVariant::kAttention:
        f(prefix + "enc_pool", self.enc_pool);
        f(prefix + "pred_pool", self.pred_pool);
        break;
      case JointVariant::kQkvAttention:
        f(prefix + "enc_q", self.enc_q);
        f(prefix + "enc_k", self.enc_k);
        f(prefix + "enc_v", self.enc_v);
        f(prefix + "pred_q", self.pred_q);
        f(prefix + "pred_k", self.pred_k);
        f(prefix + "pred_v", self.pred_v);
        break;
    }
    f(prefix + "pool_proj", self.pool_proj);
  }
};

using JointParams = JointWeights<Tensor>;

/// All tensors at their shapes, filled with zeros.
inline JointParams zero_joint(const JointConfig& cfg) {
  if (cfg.d_enc == 0 || cfg.d_pred == 0 || cfg.d_joint == 0 || cfg.d_out == 0) {
    throw InvalidArgument("joint dimensions must be positive");
  }
  JointParams p;
  p.cfg = cfg;
  p.enc_proj = Tensor::matrix(cfg.d_enc, cfg.d_joint);
  p.pred_proj = Tensor::matrix(cfg.d_pred, cfg.d_joint);
  p.bias = Tensor::matrix(1, cfg.d_joint);
  p.out = Tensor::matrix(cfg.d_joint, cfg.d_out);
  p.out_bias = Tensor::matrix(1, cfg.d_out);
  switch (cfg.variant) {
    case JointVariant::kLinear:
      return p;
    case JointVariant::kBilinear:
      p.enc_pool = Tensor::matrix(cfg.d_enc, 1);
      p.pred_pool = Tensor::matrix(cfg.d_pred, 1);
      break;
    case JointVariant::kAttention:
      p.enc_pool = Tensor::matrix(cfg.d_enc, cfg.d_enc);
      p.pred_pool = Tensor::matrix(cfg.d_pred, cfg.d_pred);
      break;
    case JointVariant::kQkvAttention:
      p.enc_q = p.enc_k = p.enc_v = Tensor::matrix(cfg.d_enc, cfg.d_enc);
      p.pred_q = p.pred_k = p.pred_v = Tensor::matrix(cfg.d_pred, cfg.d_pred);
      break;
  }
  p.pool_proj = Tensor::matrix(1, cfg.d_joint);
  return p;
}

/// Uniform-scaled weights, zero biases.
inline JointParams init_joint(const JointConfig& cfg, Rng& rng) {
  JointParams p = zero_joint(cfg);
  JointParams::visit(p, "", [&](const std::string& name, Tensor& t) {
    if (name == "bias" || name == "out_bias") return;
    t = seeded_init(t.shape(), InitScheme::kUniformScaled, rng);
  });
  return p;
}

inline JointWeights<Var> bind(Graph& g, const JointParams& src, bool trainable, std::vector<Var>* bound = nullptr) {
  JointWeights<Var> out;
  out.cfg = src.cfg;
  std::vector<const Tensor*> tensors;
  JointParams::visit(src, "", [&](const std::string&, const Tensor& t) { tensors.push_back(&t); });
  std::size_t i = 0;
  JointWeights<Var>::visit(out, "", [&](const std::string&, Var& v) {
    v = g.bind(*tensors[i++], trainable);
    if (bound) bound->push_back(v);
  });
  return out;
}

namespace detail {

// Pooling scalar per row of h (rows x 1).
inline Var pool_scalar(JointVariant variant, Activation f, Var h, Var pool, Var q, Var k, Var v) {
  switch (variant) {
    case JointVariant::kBilinear:
      return activation(matmul(h, pool), f);
    case JointVariant::kAttention:
      return activation(row_dot(softmax_rows(matmul(h, pool)), h), f);
    case JointVariant::kQkvAttention:
      return activation(row_dot(softmax_rows(mul(matmul(h, q), matmul(h, k))), matmul(h, v)), f);
    case JointVariant::kLinear:
      break;
  }
  throw InvalidArgument("pool_scalar: LINEAR has no pooling term");
}

}  // namespace detail

/// Joint logits over a grid: h_enc (T x d_enc), h_pred (U x d_pred) ->
/// (T*U) x d_out, row t*U + u for the pair (t, u). Costs O(d_enc^2 + d_pred^2)
/// per frame/label and O(d_joint * d_out) per cell.
inline Var joint_logits(const JointWeights<Var>& w, Var h_enc, Var h_pred) {
  const JointConfig& c = w.cfg;
  if (h_enc.cols() != c.d_enc) {
    throw InvalidArgument("joint: encoder vector has " + std::to_string(h_enc.cols()) + " entries, expected " +
                          std::to_string(c.d_enc));
  }
  if (h_pred.cols() != c.d_pred) {
    throw InvalidArgument("joint: predictor vector has " + std::to_string(h_pred.cols()) + " entries, expected " +
                          std::to_string(c.d_pred));
  }
  Var pre = pair_sum(add_bias(matmul(h_enc, w.enc_proj), w.bias), matmul(h_pred, w.pred_proj));
  if (c.variant != JointVariant::kLinear) {
    Var v_enc = detail::pool_scalar(c.variant, c.activation, h_enc, w.enc_pool, w.enc_q, w.enc_k, w.enc_v);
    Var v_pred = detail::pool_scalar(c.variant, c.activation, h_pred, w.pred_pool, w.pred_q, w.pred_k, w.pred_v);
    pre = add(pre, matmul(outer(v_enc, v_pred), w.pool_proj));
  }
  return add_bias(matmul(activation(pre, c.activation), w.out), w.out_bias);
}

/// Logits for a single (h_enc, h_pred) pair, any variant.
inline std::vector<double> joint_logits(std::span<const double> h_enc, std::span<const double> h_pred,
                                        const JointParams& params) {
  Graph g(false);
  const JointWeights<Var> w = bind(g, params, false);
  Var e = g.constant(Tensor::row({h_enc.begin(), h_enc.end()}));
  Var p = g.constant(Tensor::row({h_pred.begin(), h_pred.end()}));
  return joint_logits(w, e, p).value().values();
}

namespace detail {
inline void require_variant(const JointParams& p, JointVariant v) {
  if (p.cfg.variant != v) {
    throw InvalidArgument("joint parameters are " + std::string(variant_name(p.cfg.variant)) + ", expected " +
                          std::string(variant_name(v)));
  }
}
}  // namespace detail

/// z = W_out f(W_e h_enc + W_p h_pred + b) + b_out
inline std::vector<double> joint_linear(std::span<const double> h_enc, std::span<const double> h_pred,
                                        const JointParams& params) {
  detail::require_variant(params, JointVariant::kLinear);
  return joint_logits(h_enc, h_pred, params);
}

inline std::vector<double> joint_bilinear(std::span<const double> h_enc, std::span<const double> h_pred,
                                          const JointParams& params) {
  detail::require_variant(params, JointVariant::kBilinear);
  return joint_logits(h_enc, h_pred, params);
}

inline std::vector<double> joint_attention(std::span<const double> h_enc, std::span<const double> h_pred,
                                           const JointParams& params) {
  detail::require_variant(params, JointVariant::kAttention);
  return joint_logits(h_enc, h_pred, params);
}

inline std::vector<double> joint_qkv_attention(std::span<const double> h_enc, std::span<const double> h_pred,
                                               const JointParams& params) {
  detail::require_variant(params, JointVariant::kQkvAttention);
  return joint_logits(h_enc, h_pred, params);
}

}  // namespace streamduct
