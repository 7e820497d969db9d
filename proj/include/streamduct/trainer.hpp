#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "streamduct/checkpoint.hpp"
#include "streamduct/config.hpp"
#include "streamduct/metrics.hpp"
#include "streamduct/model.hpp"
#include "streamduct/synthdata.hpp"

namespace streamduct {

/// Branch used at 0-based step s when branch 0 gets a share r of the
/// batches: branch 0 iff ceil((s+1) r) - ceil(s r) == 1. r = 0.5 gives
/// 0, 1, 0, 1, ...
inline std::size_t alternation_branch(std::size_t step, double ratio, std::size_t branches) {
  if (branches <= 1) return 0;
  const double s = static_cast<double>(step);
  const bool first = std::ceil((s + 1.0) * ratio) - std::ceil(s * ratio) == 1.0;
  return first ? 0 : 1;
}

struct TrainStep {
  std::size_t step = 0;
  Language language = Language::kMono;
  double loss = 0.0;              // mean NLL per utterance
  double grad_norm = 0.0;         // before clipping
  double encoder_grad_norm = 0.0;
};

struct EvalSnapshot {
  std::size_t step = 0;
  Language language = Language::kMono;
  double accuracy = 0.0;
  double bleu = 0.0;
};

struct TrainLog {
  std::vector<TrainStep> steps;
  std::vector<EvalSnapshot> evals;
  double wall_seconds = 0.0;
};

struct TrainResult {
  Model model;
  TrainLog log;
  bool diverged = false;
  std::string diagnostic;
};

struct TrainOptions {
  /// Encoder initialization donor (a checkpoint path).
  std::optional<std::string> init_encoder;
  /// Held-out sets per branch, scored every eval_every steps (0 = never).
  std::vector<std::vector<ParallelExample>> eval_sets;
  std::size_t eval_every = 0;
  /// Progress lines every log_every steps when non-null.
  std::ostream* progress = nullptr;
  std::size_t log_every = 100;
};

namespace detail {

struct AdamSlot {
  Tensor m, v;
  std::size_t t = 0;
};

class Adam {
 public:
  explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}

  void update(std::size_t slot, Tensor& param, const Tensor& grad, double lr, double clip_scale) {
    if (slots_.size() <= slot) slots_.resize(slot + 1);
    AdamSlot& s = slots_[slot];
    if (s.m.empty()) {
      s.m = Tensor(param.shape());
      s.v = Tensor(param.shape());
    }
    ++s.t;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.t));
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double g = grad[i] * clip_scale;
      s.m[i] = b1 * s.m[i] + (1.0 - b1) * g;
      s.v[i] = b2 * s.v[i] + (1.0 - b2) * g * g;
      param[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + cfg_.adam_eps);
    }
    round_to_f32(param);
  }

 private:
  TrainConfig cfg_;
  std::vector<AdamSlot> slots_;
};

// Cycles through a dataset in per-epoch shuffled order.
class BatchSampler {
 public:
  BatchSampler(std::size_t size, std::uint64_t seed) : order_(size), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng_.shuffle(order_);
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (cursor_ == order_.size()) {
        rng_.shuffle(order_);
        cursor_ = 0;
      }
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t cursor_ = 0;
};

inline double squared_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return s;
}

}  // namespace detail

/// Mean transducer NLL of branch `b` over a batch, recorded on `g`.
/// `enc_vars` receives the encoder parameters bound for training.
struct BatchGraph {
  Var loss;
  std::vector<Var> encoder_params;
  std::vector<Var> branch_params;
};

inline BatchGraph build_batch_loss(Graph& g, const Model& m, std::size_t b, const std::vector<const Tensor*>& features,
                                   const std::vector<const TokenSequence*>& targets) {
  BatchGraph out;
  const EncoderWeights<Var> enc = bind(g, m.encoder, true, &out.encoder_params);
  const PredictorWeights<Var> pred = bind(g, m.branches[b].predictor, true, &out.branch_params);
  const JointWeights<Var> joint = bind(g, m.branches[b].joint, true, &out.branch_params);
  std::vector<Var> losses;
  for (std::size_t i = 0; i < features.size(); ++i) {
    Var states = encode(enc, g.constant(*features[i]), m.config.mask());
    Var lp = branch_log_probs(pred, joint, states, *targets[i]);
    losses.push_back(transducer_nll(lp, states.rows(), *targets[i]));
  }
  Var total = losses.size() == 1 ? losses[0] : sum(concat_rows(losses));
  out.loss = scale(total, 1.0 / static_cast<double>(losses.size()));
  return out;
}

inline EvalRow evaluate_model(const Model& m, Language lang, const std::vector<ParallelExample>& data,
                              const std::string& label = "") {
  std::vector<TokenSequence> refs;
  for (const auto& ex : data) refs.push_back(ex.target);
  return evaluate(label.empty() ? std::string(language_name(lang)) : label, decode_dataset(m, lang, data), refs);
}

/// Train on one dataset per branch; branch i takes the language of
/// datasets[i]. With two datasets the batches alternate per cfg.mix_ratio.
inline TrainResult train(const TrainConfig& cfg, const std::vector<std::vector<ParallelExample>>& datasets,
                         const TrainOptions& opts = {}) {
  cfg.validate();
  if (datasets.empty() || datasets.size() > 2) throw InvalidArgument("train takes one or two datasets");
  std::vector<Language> langs;
  for (const auto& d : datasets) {
    if (d.empty()) throw InvalidArgument("training dataset is empty");
    langs.push_back(d.front().language);
    for (const auto& ex : d) {
      if (ex.language != d.front().language) throw InvalidArgument("dataset mixes languages");
    }
  }
  const auto start = std::chrono::steady_clock::now();

  TrainResult result;
  result.model = init_model(cfg, langs);
  Model& model = result.model;
  if (opts.init_encoder) model = load_encoder_only(*opts.init_encoder, std::move(model));

  const SynthTask task(cfg.task());
  std::vector<std::vector<Tensor>> features(datasets.size());
  std::vector<detail::BatchSampler> samplers;
  for (std::size_t b = 0; b < datasets.size(); ++b) {
    for (const auto& ex : datasets[b]) features[b].push_back(task.features(ex).frames);
    samplers.emplace_back(datasets[b].size(), mix_seed(cfg.seed, 0x5A3F + b));
  }

  // Adam slots follow Model::visit order: encoder first, then each branch.
  std::size_t encoder_tensors = 0;
  EncoderWeights<Tensor>::visit(model.encoder, [&](const std::string&, const Tensor&) { ++encoder_tensors; });
  std::vector<std::size_t> branch_offset;
  std::size_t slots = encoder_tensors;
  for (const auto& br : model.branches) {
    branch_offset.push_back(slots);
    PredictorWeights<Tensor>::visit(br.predictor, "", [&](const std::string&, const Tensor&) { ++slots; });
    JointParams::visit(br.joint, "", [&](const std::string&, const Tensor&) { ++slots; });
  }
  detail::Adam adam(cfg);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::size_t b = alternation_branch(step, cfg.mix_ratio, datasets.size());
    std::vector<const Tensor*> feats;
    std::vector<const TokenSequence*> targets;
    for (std::size_t i : samplers[b].next(cfg.batch_size)) {
      feats.push_back(&features[b][i]);
      targets.push_back(&datasets[b][i].target);
    }

    TrainStep rec;
    rec.step = step;
    rec.language = langs[b];
    std::vector<Tensor> enc_grads, branch_grads;
    try {
      Graph g(true);
      BatchGraph bg = build_batch_loss(g, model, b, feats, targets);
      rec.loss = bg.loss.value()[0];
      if (!std::isfinite(rec.loss)) throw NumericalError("loss", "non-finite loss");
      g.backward(bg.loss);
      auto take = [&](const std::vector<Var>& vars, std::vector<Tensor>& out, double& sq) {
        for (const Var& v : vars) {
          Tensor gr = v.grad().empty() ? Tensor(v.value().shape()) : v.grad();
          if (!gr.all_finite()) throw NumericalError("gradient", "non-finite gradient");
          sq += detail::squared_norm(gr);
          out.push_back(std::move(gr));
        }
      };
      double enc_sq = 0.0, br_sq = 0.0;
      take(bg.encoder_params, enc_grads, enc_sq);
      take(bg.branch_params, branch_grads, br_sq);
      rec.encoder_grad_norm = std::sqrt(enc_sq);
      rec.grad_norm = std::sqrt(enc_sq + br_sq);
    } catch (const NumericalError& e) {
      result.diverged = true;
      result.diagnostic = "step " + std::to_string(step) + " (" + std::string(language_name(langs[b])) +
                          "): " + e.what() + "; keeping the parameters from the previous step";
      break;
    }

    const double clip = rec.grad_norm > cfg.grad_clip ? cfg.grad_clip / rec.grad_norm : 1.0;
    double lr = cfg.learning_rate;
    if (cfg.warmup_steps > 0) {
      lr *= std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps));
    }
    const EncoderWeights<Tensor> enc_before = model.encoder;
    const LanguageBranch branch_before = model.branches[b];
    bool finite = true;
    std::size_t k = 0;
    EncoderWeights<Tensor>::visit(model.encoder, [&](const std::string&, Tensor& t) {
      adam.update(k, t, enc_grads[k], lr, clip);
      finite = finite && t.all_finite();
      ++k;
    });
    std::size_t j = 0;
    auto upd = [&](const std::string&, Tensor& t) {
      adam.update(branch_offset[b] + j, t, branch_grads[j], lr, clip);
      finite = finite && t.all_finite();
      ++j;
    };
    PredictorWeights<Tensor>::visit(model.branches[b].predictor, "", upd);
    JointParams::visit(model.branches[b].joint, "", upd);
    if (!finite) {
      model.encoder = enc_before;
      model.branches[b] = branch_before;
      result.diverged = true;
      result.diagnostic = "step " + std::to_string(step) + " (" + std::string(language_name(langs[b])) +
                          "): update produced non-finite parameters; keeping the parameters from before it";
      break;
    }
    result.log.steps.push_back(rec);

    if (opts.progress && opts.log_every > 0 && (step + 1) % opts.log_every == 0) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      *opts.progress << "step " << step + 1 << " " << language_name(langs[b]) << " loss " << rec.loss << " |g| "
                     << rec.grad_norm << " " << secs << "s" << std::endl;
    }
    if (opts.eval_every > 0 && (step + 1) % opts.eval_every == 0) {
      for (std::size_t e = 0; e < opts.eval_sets.size() && e < langs.size(); ++e) {
        const EvalRow row = evaluate_model(model, langs[e], opts.eval_sets[e]);
        result.log.evals.push_back({step + 1, langs[e], row.accuracy, row.bleu});
        if (opts.progress) {
          *opts.progress << "  eval " << language_name(langs[e]) << " acc " << row.accuracy << " BLEU " << row.bleu
                         << std::endl;
        }
      }
    }
  }
  result.log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace streamduct
