#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "streamduct/config.hpp"
#include "streamduct/decoder.hpp"
#include "streamduct/encoder.hpp"
#include "streamduct/joint.hpp"
#include "streamduct/predictor.hpp"
#include "streamduct/transducer_loss.hpp"

namespace streamduct {

/// Per-language prediction and joint networks over a shared encoder.
struct LanguageBranch {
  Language language = Language::kMono;
  PredictorWeights<Tensor> predictor;
  JointParams joint;
};

/// 8-bit affine code of one tensor: value = scale * code + min.
struct QuantizedTensor {
  Shape shape;
  std::vector<std::uint8_t> codes;
  double scale = 0.0;
  double min = 0.0;

  Tensor dequantize() const {
    Tensor t(shape);
    for (std::size_t i = 0; i < codes.size(); ++i) t[i] = scale * static_cast<double>(codes[i]) + min;
    return t;
  }

  friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

/// scale = (max - min) / 255 and code = round((v - min) / scale). A constant
/// tensor gets scale 0 and all-zero codes.
inline QuantizedTensor quantize(const Tensor& t) {
  QuantizedTensor q;
  q.shape = t.shape();
  const auto& v = t.data();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  q.min = *lo;
  q.scale = (*hi - *lo) / 255.0;
  q.codes.resize(v.size(), 0);
  if (q.scale > 0.0) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double c = std::round((v[i] - q.min) / q.scale);
      q.codes[i] = static_cast<std::uint8_t>(std::clamp(c, 0.0, 255.0));
    }
  }
  return q;
}

struct Model {
  TrainConfig config;
  EncoderWeights<Tensor> encoder;
  std::vector<LanguageBranch> branches;
  /// Encoder tensors stored as 8-bit codes, by name. The matching encoder
  /// weights hold the dequantized values.
  std::map<std::string, QuantizedTensor> quantized;

  /// f(name, tensor): encoder first, then each branch's predictor and joint.
  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    EncoderWeights<Tensor>::visit(self.encoder, f);
    for (auto& b : self.branches) {
      const std::string p = "branch/" + std::string(language_name(b.language)) + "/";
      PredictorWeights<Tensor>::visit(b.predictor, p + "predictor/", f);
      JointParams::visit(b.joint, p + "joint/", f);
    }
  }

  std::size_t branch_index(Language lang) const {
    for (std::size_t i = 0; i < branches.size(); ++i)
      if (branches[i].language == lang) return i;
    throw InvalidArgument("model has no branch for " + std::string(language_name(lang)));
  }
  const LanguageBranch& branch(Language lang) const { return branches[branch_index(lang)]; }

  std::vector<Language> languages() const {
    std::vector<Language> out;
    for (const auto& b : branches) out.push_back(b.language);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit(*this, [&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }
};

inline std::string join_languages(const std::vector<Language>& langs) {
  std::string out;
  for (std::size_t i = 0; i < langs.size(); ++i) out += (i ? "," : "") + std::string(language_name(langs[i]));
  return out;
}

inline std::vector<Language> parse_languages(std::string_view text) {
  std::vector<Language> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = std::min(text.find(',', start), text.size());
    out.push_back(parse_language(text.substr(start, comma - start)));
    start = comma + 1;
  }
  return out;
}

inline void round_all_to_f32(Model& m) {
  Model::visit(m, [](const std::string&, Tensor& t) { round_to_f32(t); });
}

/// Fresh branch weights for `lang`, drawn from their own stream.
inline LanguageBranch init_branch(const TrainConfig& cfg, Language lang, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xB0 + static_cast<std::uint64_t>(lang)));
  LanguageBranch b;
  b.language = lang;
  b.predictor = init_predictor(cfg.predictor(), rng);
  b.joint = init_joint(cfg.joint_config(), rng);
  return b;
}

/// Combine an encoder with branches. One branch is a bilingual model.
inline Model assemble(const TrainConfig& cfg, EncoderWeights<Tensor> encoder, std::vector<LanguageBranch> branches) {
  if (branches.empty()) throw InvalidArgument("a model needs at least one branch");
  std::set<Language> seen;
  for (const auto& b : branches) {
    if (!seen.insert(b.language).second) {
      throw InvalidArgument("duplicate branch language " + std::string(language_name(b.language)));
    }
  }
  Model m;
  m.config = cfg;
  m.encoder = std::move(encoder);
  m.branches = std::move(branches);
  round_all_to_f32(m);
  return m;
}

/// Randomly initialized model, deterministic in cfg.seed.
inline Model init_model(const TrainConfig& cfg, const std::vector<Language>& langs) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, 0xE1C));
  EncoderWeights<Tensor> enc = init_encoder(cfg.encoder(), rng);
  std::vector<LanguageBranch> branches;
  for (Language l : langs) branches.push_back(init_branch(cfg, l, cfg.seed));
  return assemble(cfg, std::move(enc), std::move(branches));
}

/// Encoder states for one utterance, T x d_model.
inline Tensor encode(const Model& m, const Tensor& features) { return encode(m.encoder, features, m.config.mask()); }

/// Graph-level log-probability lattice rows ((T*(U+1)) x (V+1)) for a bound
/// branch over bound encoder states.
inline Var branch_log_probs(const PredictorWeights<Var>& pred, const JointWeights<Var>& joint, Var enc,
                            const TokenSequence& labels) {
  return log_softmax_rows(joint_logits(joint, enc, unroll(pred, labels)));
}

/// Normalized lattice of branch `lang` given precomputed encoder states.
inline JointLattice branch_lattice(const Model& m, Language lang, const Tensor& enc_states,
                                   const TokenSequence& labels) {
  const LanguageBranch& b = m.branch(lang);
  Graph g(false);
  Var enc = g.constant(enc_states);
  Var lp = branch_log_probs(bind(g, b.predictor, false), bind(g, b.joint, false), enc, labels);
  return JointLattice(enc_states.rows(), labels.size() + 1, lp.value());
}

/// Decoding view of one branch over fixed encoder states.
class BranchScorer {
 public:
  BranchScorer(const LanguageBranch& branch, const Tensor& enc_states)
      : branch_(branch), enc_(enc_states), state_(init_state(branch.predictor.cfg)) {
    advance(kStartToken);
  }

  std::size_t num_frames() const { return enc_.rows(); }

  std::vector<double> logits(std::size_t t) const {
    return joint_logits(enc_.row_span(t), h_pred_.row_span(0), branch_.joint);
  }

  void advance(TokenId y) {
    auto [h, next] = predict_step(branch_.predictor, y, state_);
    h_pred_ = std::move(h);
    state_ = std::move(next);
  }

 private:
  const LanguageBranch& branch_;
  const Tensor& enc_;
  PredictorState state_;
  Tensor h_pred_;
};

/// Greedy decode of one utterance; max_output_len = 0 leaves output uncapped.
inline Hypothesis decode(const Model& m, Language lang, const Tensor& features, std::size_t max_output_len = 0) {
  const Tensor enc = encode(m, features);
  BranchScorer scorer(m.branch(lang), enc);
  DecodeLimits limits;
  limits.max_output_len = max_output_len;
  return greedy_stream_decode(scorer, limits, m.config.frame_ms());
}

/// Decodes every example, capping output at 4x its source length.
inline std::vector<Hypothesis> decode_dataset(const Model& m, Language lang, const std::vector<ParallelExample>& data) {
  const SynthTask task(m.config.task());
  std::vector<Hypothesis> out;
  out.reserve(data.size());
  for (const ParallelExample& ex : data) {
    out.push_back(decode(m, lang, task.features(ex).frames, 4 * ex.source.size()));
  }
  return out;
}

}  // namespace streamduct
