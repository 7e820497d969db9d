#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "streamduct/decoder.hpp"
#include "streamduct/encoder.hpp"
#include "streamduct/grad_check.hpp"
#include "streamduct/joint.hpp"
#include "streamduct/metrics.hpp"
#include "streamduct/transducer_loss.hpp"

namespace streamduct {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Forward-backward against explicit path enumeration on random lattices
/// with T <= 4, U <= 3, V <= 5.
inline CheckResult check_loss_oracle(std::size_t instances = 200, std::uint64_t seed = 7) {
  CheckResult r{"loss oracle", true, ""};
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < instances; ++i) {
    const std::size_t T = 1 + rng.below(4), U = rng.below(4), V = 1 + rng.below(5);
    TokenSequence labels(U);
    for (TokenId& y : labels) y = static_cast<TokenId>(rng.below(V));
    const JointLattice lat = JointLattice::random(T, U + 1, V + 1, rng, 2.0);
    const double dp = transducer_nll(lat, labels);
    const double bf = brute_force_nll(lat, labels).nll;
    worst = std::max(worst, std::abs(dp - bf));
  }
  r.passed = worst <= 1e-10;
  std::ostringstream os;
  os << instances << " instances, max |dp - enumeration| = " << worst;
  r.detail = os.str();
  return r;
}

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

}  // namespace detail

/// Central-difference checks for every joint variant and activation, and
/// for the transducer loss through log-softmax.
inline CheckResult check_gradients(double tolerance = 1e-4, std::uint64_t seed = 11) {
  CheckResult r{"gradients", true, ""};
  Rng rng(seed);
  std::ostringstream os;
  double worst = 0.0;
  const std::size_t T = 3, U = 2, de = 3, dp = 4;
  const TokenSequence labels = {1, 0};
  for (JointVariant v : {JointVariant::kLinear, JointVariant::kBilinear, JointVariant::kAttention,
                         JointVariant::kQkvAttention}) {
    for (Activation act : {Activation::kTanh, Activation::kRelu}) {
      const JointConfig cfg{v, act, de, dp, 5, 3};
      JointParams p = init_joint(cfg, rng);
      p.bias = detail::random_tensor(p.bias.shape(), rng, 0.3);
      p.out_bias = detail::random_tensor(p.out_bias.shape(), rng, 0.3);
      if (v != JointVariant::kLinear) p.pool_proj = detail::random_tensor(p.pool_proj.shape(), rng);
      std::vector<Tensor> point{detail::random_tensor({T, de}, rng), detail::random_tensor({U + 1, dp}, rng)};
      JointParams::visit(p, "", [&](const std::string&, const Tensor& t) { point.push_back(t); });
      const GraphFunction f = [cfg, labels, T](Graph&, const std::vector<Var>& x) {
        JointWeights<Var> w;
        w.cfg = cfg;
        std::size_t i = 2;
        JointWeights<Var>::visit(w, "", [&](const std::string&, Var& slot) { slot = x[i++]; });
        return transducer_nll(log_softmax_rows(joint_logits(w, x[0], x[1])), T, labels);
      };
      const GradCheckReport rep = grad_check(f, point);
      if (!rep.ok) {
        r.passed = false;
        os << variant_name(v) << "/" << activation_name(act) << ": " << rep.diagnostic << "; ";
      }
      worst = std::max(worst, rep.max_relative_error);
      if (rep.max_relative_error > tolerance) {
        r.passed = false;
        os << variant_name(v) << "/" << activation_name(act) << " error " << rep.max_relative_error << "; ";
      }
    }
  }
  // Loss alone, on raw logits.
  const GraphFunction loss = [](Graph&, const std::vector<Var>& x) {
    return transducer_nll(log_softmax_rows(x[0]), 3, TokenSequence{2, 0, 1});
  };
  const GradCheckReport rep = grad_check(loss, {detail::random_tensor({3 * 4, 4}, rng)});
  worst = std::max(worst, rep.max_relative_error);
  if (!rep.ok || rep.max_relative_error > tolerance) {
    r.passed = false;
    os << "transducer loss error " << rep.max_relative_error << "; ";
  }
  os << "max relative error " << worst;
  r.detail = os.str();
  return r;
}

/// Pooled variants with a zero pooling projection must reproduce LINEAR
/// exactly when they share its base weights.
inline CheckResult check_degeneracy(std::uint64_t seed = 13) {
  CheckResult r{"degeneracy", true, ""};
  Rng rng(seed);
  const std::size_t de = 6, dp = 5, dj = 7, dout = 4;
  for (Activation act : {Activation::kTanh, Activation::kRelu}) {
    const JointParams base = init_joint({JointVariant::kLinear, act, de, dp, dj, dout}, rng);
    const Tensor he = detail::random_tensor({4, de}, rng), hp = detail::random_tensor({3, dp}, rng);
    auto run = [&](const JointParams& p) {
      Graph g(false);
      return joint_logits(bind(g, p, false), g.constant(he), g.constant(hp)).value();
    };
    const Tensor want = run(base);
    for (JointVariant v : {JointVariant::kBilinear, JointVariant::kAttention, JointVariant::kQkvAttention}) {
      JointParams p = init_joint({v, act, de, dp, dj, dout}, rng);
      p.enc_proj = base.enc_proj;
      p.pred_proj = base.pred_proj;
      p.bias = base.bias;
      p.out = base.out;
      p.out_bias = base.out_bias;
      p.pool_proj.fill(0.0);
      if (!(run(p) == want)) {
        r.passed = false;
        r.detail += std::string(variant_name(v)) + "/" + std::string(activation_name(act)) + " differs; ";
      }
    }
  }
  if (r.passed) r.detail = "bilinear, attn, qkv equal linear for tanh and relu";
  return r;
}

/// Perturb each input frame of a randomly initialized encoder stack and
/// compare which outputs move against reception_field.
inline CheckResult check_mask_causality(std::size_t chunk, std::size_t left, std::size_t layers,
                                        std::size_t frames = 12, std::uint64_t seed = 17) {
  std::ostringstream name;
  name << "mask C=" << chunk << " B=" << left << " L=" << layers;
  CheckResult r{name.str(), true, ""};
  Rng rng(mix_seed(seed, chunk * 100 + left * 10 + layers));
  EncoderConfig cfg;
  cfg.feature_dim = 4;
  cfg.layers = layers;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.ffn = 16;
  const EncoderWeights<Tensor> w = init_encoder(cfg, rng);
  const MaskConfig mask{chunk, left};
  const Tensor x = detail::random_tensor({frames, cfg.d_model}, rng);
  auto run = [&](const Tensor& in) {
    Graph g(false);
    return encode_frames(bind(g, w, false), g.constant(in), mask).value();
  };
  const Tensor base = run(x);
  std::size_t violations = 0;
  for (std::size_t s = 1; s <= frames; ++s) {
    Tensor moved = x;
    for (std::size_t j = 0; j < cfg.d_model; ++j) moved(s - 1, j) += 0.5 + rng.uniform();
    const Tensor out = run(moved);
    for (std::size_t t = 1; t <= frames; ++t) {
      const ReceptionField f = reception_field(layers, chunk, left, t, frames);
      bool same = true;
      for (std::size_t j = 0; j < cfg.d_model; ++j) same = same && out(t - 1, j) == base(t - 1, j);
      const bool inside = s >= f.left && s <= f.right;
      if (inside == same) {
        ++violations;
        if (violations <= 3) {
          r.detail += "t=" + std::to_string(t) + " s=" + std::to_string(s) + (inside ? " inside but unchanged; " : " outside but changed; ");
        }
      }
    }
  }
  r.passed = violations == 0;
  if (r.passed) r.detail = std::to_string(frames * frames) + " (t, s) pairs match the analytic field";
  return r;
}

/// All 27 configurations C in {1,2,4}, B in {0,1,2}, L in {1,2,3}, plus the
/// worked case L=3, C=3, B=1, t=10 -> [1, 12].
inline std::vector<CheckResult> check_mask_suite() {
  std::vector<CheckResult> out;
  for (std::size_t c : {1, 2, 4})
    for (std::size_t b : {0, 1, 2})
      for (std::size_t l : {1, 2, 3}) out.push_back(check_mask_causality(c, b, l));
  const ReceptionField f = reception_field(3, 3, 1, 10, 12);
  out.push_back({"reception field L=3 C=3 B=1 t=10", f == ReceptionField{1, 12},
                 "[" + std::to_string(f.left) + ", " + std::to_string(f.right) + "]"});
  return out;
}

inline CheckResult check_latency_fixtures() {
  CheckResult r{"latency fixtures", true, ""};
  const ReadWritePath wait3 = wait_k_path(3, 6, 6);
  const ReadWritePath diag = wait_k_path(1, 5, 5);
  const ReadWritePath full = wait_k_path(kWaitInfinity, 6, 6);
  std::ostringstream os;
  os.precision(6);
  os << "wait-3 AP " << ap(wait3) << " AL " << al(wait3) << " DAL " << dal(wait3) << "; diagonal AL " << al(diag)
     << " DAL " << dal(diag) << "; full AP " << ap(full);
  r.detail = os.str();
  r.passed = std::abs(ap(wait3) - 30.0 / 36.0) <= 1e-4 && al(wait3) == 3.0 && dal(wait3) == 3.0 &&
             al(diag) == 1.0 && dal(diag) == 1.0 && ap(full) == 1.0;
  return r;
}

/// The oracle, gradient, degeneracy, mask and metric suites.
inline std::vector<CheckResult> run_selftest() {
  std::vector<CheckResult> out{check_loss_oracle(), check_gradients(), check_degeneracy()};
  for (auto& m : check_mask_suite()) out.push_back(std::move(m));
  out.push_back(check_latency_fixtures());
  return out;
}

inline bool report(std::ostream& os, const std::vector<CheckResult>& results) {
  bool all = true;
  for (const auto& r : results) {
    os << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    all = all && r.passed;
  }
  return all;
}

}  // namespace streamduct
