#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "streamduct/decoder.hpp"
#include "streamduct/errors.hpp"
#include "streamduct/synthdata.hpp"

namespace streamduct {

namespace detail {
inline void require_path(const ReadWritePath& p, const char* metric) {
  if (p.delays.empty()) throw UndefinedMetric(std::string(metric) + " is undefined for an empty output");
  if (p.source_frames == 0) throw UndefinedMetric(std::string(metric) + " is undefined for an empty source");
}
}  // namespace detail

/// Average proportion: (1 / (T U)) sum_u d(u).
inline double ap(const ReadWritePath& p) {
  detail::require_path(p, "AP");
  double s = 0.0;
  for (std::size_t d : p.delays) s += static_cast<double>(d);
  return s / (static_cast<double>(p.source_frames) * static_cast<double>(p.delays.size()));
}

/// Average lagging in frames, summed up to the first write at d(u) = T.
inline double al(const ReadWritePath& p) {
  detail::require_path(p, "AL");
  const double T = static_cast<double>(p.source_frames);
  const std::size_t U = p.delays.size();
  const double rate = T / static_cast<double>(U);  // 1 / gamma
  std::size_t tau = U;
  for (std::size_t u = 0; u < U; ++u) {
    if (p.delays[u] == p.source_frames) {
      tau = u + 1;
      break;
    }
  }
  double s = 0.0;
  for (std::size_t u = 0; u < tau; ++u) s += static_cast<double>(p.delays[u]) - static_cast<double>(u) * rate;
  return s / static_cast<double>(tau);
}

/// Differentiable average lagging: delays clamped to grow by at least 1/gamma.
inline double dal(const ReadWritePath& p) {
  detail::require_path(p, "DAL");
  const std::size_t U = p.delays.size();
  const double rate = static_cast<double>(p.source_frames) / static_cast<double>(U);
  double prev = 0.0, s = 0.0;
  for (std::size_t u = 0; u < U; ++u) {
    double d = static_cast<double>(p.delays[u]);
    if (u > 0) d = std::max(d, prev + rate);
    s += d - static_cast<double>(u) * rate;
    prev = d;
  }
  return s / static_cast<double>(U);
}

namespace detail {
inline void require_corpus(std::size_t hyps, std::size_t refs, const char* metric) {
  if (hyps != refs) {
    throw InvalidArgument(std::string(metric) + ": " + std::to_string(hyps) + " hypotheses vs " +
                          std::to_string(refs) + " references");
  }
  if (hyps == 0) throw UndefinedMetric(std::string(metric) + " is undefined for an empty corpus");
}

inline std::map<std::vector<TokenId>, std::size_t> ngram_counts(const TokenSequence& s, std::size_t n) {
  std::map<std::vector<TokenId>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[TokenSequence(s.begin() + i, s.begin() + i + n)];
  return counts;
}
}  // namespace detail

/// Corpus BLEU-4 on token ids, no smoothing. Returns a score in [0, 100].
inline double bleu(const std::vector<TokenSequence>& hyps, const std::vector<TokenSequence>& refs) {
  detail::require_corpus(hyps.size(), refs.size(), "BLEU");
  constexpr std::size_t kOrder = 4;
  double matches[kOrder] = {}, totals[kOrder] = {};
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    hyp_len += static_cast<double>(hyps[i].size());
    ref_len += static_cast<double>(refs[i].size());
    for (std::size_t n = 1; n <= kOrder; ++n) {
      const auto h = detail::ngram_counts(hyps[i], n);
      const auto r = detail::ngram_counts(refs[i], n);
      for (const auto& [gram, c] : h) {
        totals[n - 1] += static_cast<double>(c);
        const auto it = r.find(gram);
        if (it != r.end()) matches[n - 1] += static_cast<double>(std::min(c, it->second));
      }
    }
  }
  if (hyp_len == 0.0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 0; n < kOrder; ++n) {
    if (matches[n] == 0.0) return 0.0;
    log_p += std::log(matches[n] / totals[n]);
  }
  const double bp = std::exp(std::min(0.0, 1.0 - ref_len / hyp_len));
  return 100.0 * bp * std::exp(log_p / kOrder);
}

/// Per pair: matching positions / max(len); averaged over pairs. Two empty
/// sequences count as a full match.
inline double token_accuracy(const std::vector<TokenSequence>& hyps, const std::vector<TokenSequence>& refs) {
  detail::require_corpus(hyps.size(), refs.size(), "token accuracy");
  double total = 0.0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const std::size_t n = std::max(hyps[i].size(), refs[i].size());
    if (n == 0) {
      total += 1.0;
      continue;
    }
    std::size_t hit = 0;
    for (std::size_t k = 0; k < std::min(hyps[i].size(), refs[i].size()); ++k) hit += hyps[i][k] == refs[i][k];
    total += static_cast<double>(hit) / static_cast<double>(n);
  }
  return total / static_cast<double>(hyps.size());
}

struct LatencyReport {
  double ap = 0.0;
  double al_frames = 0.0;
  double dal_frames = 0.0;
  double frame_ms = 40.0;
  std::size_t scored = 0;   // utterances with at least one output token
  std::size_t skipped = 0;  // empty outputs, where the metrics are undefined

  double al_ms() const { return al_frames * frame_ms; }
  double dal_ms() const { return dal_frames * frame_ms; }
};

/// Corpus means of AP, AL and DAL over non-empty paths; NaN when every path
/// is empty.
inline LatencyReport latency(const std::vector<ReadWritePath>& paths) {
  LatencyReport r;
  if (!paths.empty()) r.frame_ms = paths.front().frame_ms;
  for (const ReadWritePath& p : paths) {
    if (p.delays.empty()) {
      ++r.skipped;
      continue;
    }
    r.ap += ap(p);
    r.al_frames += al(p);
    r.dal_frames += dal(p);
    ++r.scored;
  }
  if (r.scored == 0) {
    r.ap = r.al_frames = r.dal_frames = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  const double n = static_cast<double>(r.scored);
  r.ap /= n;
  r.al_frames /= n;
  r.dal_frames /= n;
  return r;
}

struct EvalRow {
  std::string label;
  double bleu = 0.0;
  double accuracy = 0.0;
  LatencyReport latency;
};

inline EvalRow evaluate(const std::string& label, const std::vector<Hypothesis>& hyps,
                        const std::vector<TokenSequence>& refs) {
  EvalRow row;
  row.label = label;
  std::vector<TokenSequence> tokens;
  std::vector<ReadWritePath> paths;
  for (const Hypothesis& h : hyps) {
    tokens.push_back(h.tokens);
    paths.push_back(h.path);
  }
  row.bleu = bleu(tokens, refs);
  row.accuracy = token_accuracy(tokens, refs);
  row.latency = latency(paths);
  return row;
}

inline std::string format_report(const std::vector<EvalRow>& rows) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-10s %7s %7s %7s %11s %9s %12s %10s\n", "lang", "BLEU", "acc", "AP", "AL(frames)",
                "AL(ms)", "DAL(frames)", "DAL(ms)");
  out += buf;
  for (const EvalRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%-10s %7.2f %7.4f %7.4f %11.2f %9.1f %12.2f %10.1f\n", r.label.c_str(), r.bleu,
                  r.accuracy, r.latency.ap, r.latency.al_frames, r.latency.al_ms(), r.latency.dal_frames,
                  r.latency.dal_ms());
    out += buf;
  }
  return out;
}

}  // namespace streamduct
