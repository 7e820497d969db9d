#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "streamduct/autodiff.hpp"
#include "streamduct/errors.hpp"
#include "streamduct/synthdata.hpp"
#include "streamduct/tensor.hpp"

namespace streamduct {

/// Normalized log-probabilities over the alignment grid. Cell (t, u) is the
/// distribution after t+1 encoder frames and u emitted labels; the last
/// class is blank.
class JointLattice {
 public:
  JointLattice(std::size_t frames, std::size_t label_positions, std::size_t classes)
      : logp_({frames, label_positions, classes}) {}

  /// Wrap a (frames * label_positions) x classes matrix of log-probabilities.
  JointLattice(std::size_t frames, std::size_t label_positions, const Tensor& rows)
      : logp_(rows.reshaped({frames, label_positions, rows.cols()})) {}

  std::size_t frames() const { return logp_.shape()[0]; }
  std::size_t label_positions() const { return logp_.shape()[1]; }
  std::size_t classes() const { return logp_.shape()[2]; }
  TokenId blank() const { return static_cast<TokenId>(classes() - 1); }

  double& at(std::size_t t, std::size_t u, std::size_t k) {
    return logp_[(t * label_positions() + u) * classes() + k];
  }
  double at(std::size_t t, std::size_t u, std::size_t k) const {
    return logp_[(t * label_positions() + u) * classes() + k];
  }

  const Tensor& tensor() const { return logp_; }
  Tensor& tensor() { return logp_; }

  /// Fill every cell with log-softmax of random N(0, scale^2) logits.
  static JointLattice random(std::size_t frames, std::size_t label_positions, std::size_t classes, Rng& rng,
                             double scale = 1.0) {
    JointLattice lat(frames, label_positions, classes);
    std::vector<double> z(classes);
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t u = 0; u < label_positions; ++u) {
        for (double& v : z) v = scale * rng.normal();
        const std::vector<double> p = softmax(z);
        for (std::size_t k = 0; k < classes; ++k) lat.at(t, u, k) = std::log(p[k]);
      }
    return lat;
  }

  static JointLattice uniform(std::size_t frames, std::size_t label_positions, std::size_t classes) {
    JointLattice lat(frames, label_positions, classes);
    lat.logp_.fill(-std::log(static_cast<double>(classes)));
    return lat;
  }

 private:
  Tensor logp_;
};

namespace detail {

inline void check_lattice_labels(std::size_t T, std::size_t U1, std::size_t classes, const TokenSequence& labels) {
  if (T == 0) throw InvalidArgument("transducer loss needs at least one frame");
  if (labels.size() + 1 != U1) {
    throw InvalidArgument("lattice has " + std::to_string(U1) + " label positions but " +
                          std::to_string(labels.size()) + " labels were given");
  }
  for (TokenId y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw InvalidArgument("label " + std::to_string(y) + " outside vocabulary");
    }
    if (static_cast<std::size_t>(y) == classes - 1) throw InvalidArgument("label equals the blank symbol");
  }
}

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Forward/backward variables over raw lattice rows. logp is (T*U1) x K.
struct LatticeDp {
  std::size_t T, U1, K;
  std::vector<double> alpha, beta;
  double log_likelihood;

  LatticeDp(const double* logp, std::size_t T_, std::size_t U1_, std::size_t K_, const TokenSequence& labels)
      : T(T_), U1(U1_), K(K_), alpha(T_ * U1_, kNegInf), beta(T_ * U1_, kNegInf) {
    const std::size_t blank = K - 1;
    auto lp = [&](std::size_t t, std::size_t u, std::size_t k) { return logp[(t * U1 + u) * K + k]; };
    const std::size_t U = U1 - 1;
    alpha[0] = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t u = 0; u <= U; ++u) {
        if (t == 0 && u == 0) continue;
        double a = kNegInf;
        if (t > 0) a = alpha[(t - 1) * U1 + u] + lp(t - 1, u, blank);
        if (u > 0) a = logaddexp(a, alpha[t * U1 + u - 1] + lp(t, u - 1, static_cast<std::size_t>(labels[u - 1])));
        alpha[t * U1 + u] = a;
      }
    }
    beta[(T - 1) * U1 + U] = lp(T - 1, U, blank);
    for (std::size_t t = T; t-- > 0;) {
      for (std::size_t u = U + 1; u-- > 0;) {
        if (t == T - 1 && u == U) continue;
        double b = kNegInf;
        if (t + 1 < T) b = beta[(t + 1) * U1 + u] + lp(t, u, blank);
        if (u < U) b = logaddexp(b, beta[t * U1 + u + 1] + lp(t, u, static_cast<std::size_t>(labels[u])));
        beta[t * U1 + u] = b;
      }
    }
    log_likelihood = alpha[(T - 1) * U1 + U] + lp(T - 1, U, blank);
  }

  // d(-log P)/d logp, accumulated (scaled by `seed`) into grad rows.
  void accumulate_gradient(const double* logp, const TokenSequence& labels, double seed, double* grad) const {
    const std::size_t blank = K - 1, U = U1 - 1;
    auto lp = [&](std::size_t t, std::size_t u, std::size_t k) { return logp[(t * U1 + u) * K + k]; };
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t u = 0; u <= U; ++u) {
        const double a = alpha[t * U1 + u];
        if (a == kNegInf) continue;
        double* g = grad + (t * U1 + u) * K;
        if (t + 1 < T) {
          g[blank] -= seed * std::exp(a + lp(t, u, blank) + beta[(t + 1) * U1 + u] - log_likelihood);
        } else if (u == U) {
          g[blank] -= seed * std::exp(a + lp(t, u, blank) - log_likelihood);
        }
        if (u < U) {
          const std::size_t y = static_cast<std::size_t>(labels[u]);
          g[y] -= seed * std::exp(a + lp(t, u, y) + beta[t * U1 + u + 1] - log_likelihood);
        }
      }
    }
  }
};

}  // namespace detail

/// Negative log-likelihood of `labels` summed over every monotonic alignment:
///   alpha(t,u) = logaddexp(alpha(t-1,u) + blank(t-1,u), alpha(t,u-1) + y_u(t,u-1))
///   loss = -(alpha(T-1,U) + blank(T-1,U))
inline double transducer_nll(const JointLattice& lattice, const TokenSequence& labels) {
  detail::check_lattice_labels(lattice.frames(), lattice.label_positions(), lattice.classes(), labels);
  const detail::LatticeDp dp(lattice.tensor().data().data(), lattice.frames(), lattice.label_positions(),
                             lattice.classes(), labels);
  return -dp.log_likelihood;
}

/// Gradient of transducer_nll with respect to every lattice entry.
inline Tensor nll_gradients(const JointLattice& lattice, const TokenSequence& labels) {
  detail::check_lattice_labels(lattice.frames(), lattice.label_positions(), lattice.classes(), labels);
  const double* lp = lattice.tensor().data().data();
  const detail::LatticeDp dp(lp, lattice.frames(), lattice.label_positions(), lattice.classes(), labels);
  Tensor grad(lattice.tensor().shape());
  dp.accumulate_gradient(lp, labels, 1.0, grad.data().data());
  return grad;
}

struct BruteForceResult {
  double nll = 0.0;
  std::size_t paths = 0;
};

/// Oracle: enumerate every alignment path explicitly. Refuses T + U > 14.
inline BruteForceResult brute_force_nll(const JointLattice& lattice, const TokenSequence& labels) {
  const std::size_t T = lattice.frames(), U1 = lattice.label_positions(), U = U1 - 1;
  detail::check_lattice_labels(T, U1, lattice.classes(), labels);
  if (T + U > 14) throw InvalidArgument("brute_force_nll: instance too large (T + U > 14)");
  const std::size_t blank = lattice.classes() - 1;
  BruteForceResult r;
  double total = detail::kNegInf;
  // Depth-first over (t, u): blank moves right, label moves up; the path ends
  // with the blank emitted at (T-1, U).
  struct Frame {
    std::size_t t, u;
    double score;
  };
  std::vector<Frame> todo{{0, 0, 0.0}};
  while (!todo.empty()) {
    const Frame f = todo.back();
    todo.pop_back();
    if (f.t == T - 1 && f.u == U) {
      total = logaddexp(total, f.score + lattice.at(f.t, f.u, blank));
      ++r.paths;
      continue;
    }
    if (f.t + 1 < T) todo.push_back({f.t + 1, f.u, f.score + lattice.at(f.t, f.u, blank)});
    if (f.u < U) {
      todo.push_back({f.t, f.u + 1, f.score + lattice.at(f.t, f.u, static_cast<std::size_t>(labels[f.u]))});
    }
  }
  r.nll = -total;
  return r;
}

/// Graph op: logp is (T*U1) x K log-probabilities (rows t*U1 + u).
inline Var transducer_nll(Var logp, std::size_t frames, const TokenSequence& labels) {
  const std::size_t U1 = labels.size() + 1;
  const Tensor& lp = logp.value();
  if (lp.rows() != frames * U1) {
    throw InvalidArgument("transducer_nll: lattice rows " + std::to_string(lp.rows()) + " != T*(U+1) = " +
                          std::to_string(frames * U1));
  }
  detail::check_lattice_labels(frames, U1, lp.cols(), labels);
  auto dp = std::make_shared<detail::LatticeDp>(lp.data().data(), frames, U1, lp.cols(), labels);
  const double loss = -dp->log_likelihood;
  return logp.graph()->record(Tensor::scalar(loss), {logp}, [logp, dp, labels](Graph& g, std::size_t self) {
    dp->accumulate_gradient(logp.value().data().data(), labels, g.grad(self)[0], g.grad(logp).data().data());
  });
}

}  // namespace streamduct
