#pragma once

#include <concepts>
#include <cstddef>
#include <fstream>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "streamduct/errors.hpp"
#include "streamduct/synthdata.hpp"

namespace streamduct {

/// Read/write trace of one utterance. delays[u-1] = d(u), the number of
/// encoder frames consumed when token u was written (1-based frames).
struct ReadWritePath {
  std::vector<std::size_t> delays;
  std::size_t source_frames = 0;
  double frame_ms = 40.0;  // frame_duration_ms * subsample factor

  std::size_t size() const { return delays.size(); }

  /// Nondecreasing, within [1, source_frames].
  bool valid() const {
    for (std::size_t i = 0; i < delays.size(); ++i) {
      if (delays[i] < 1 || delays[i] > source_frames) return false;
      if (i > 0 && delays[i] < delays[i - 1]) return false;
    }
    return true;
  }

  friend bool operator==(const ReadWritePath&, const ReadWritePath&) = default;
};

struct Hypothesis {
  TokenSequence tokens;
  ReadWritePath path;
  bool truncated = false;  // a frame ran out of symbol budget, or max_output_len was hit

  friend bool operator==(const Hypothesis&, const Hypothesis&) = default;
};

struct DecodeLimits {
  std::size_t max_symbols_per_frame = 10;
  std::size_t max_output_len = 0;  // 0: no cap
};

/// Source of joint scores for greedy decoding. logits(t) scores frame t
/// (0-based) against the current predictor state; the last entry is blank.
/// advance(y) feeds a written token to the predictor.
template <class S>
concept TransducerScorer = requires(S& s, std::size_t t, TokenId y) {
  { s.num_frames() } -> std::convertible_to<std::size_t>;
  { s.logits(t) } -> std::convertible_to<std::vector<double>>;
  s.advance(y);
};

/// Greedy streaming decode. At each step the argmax symbol is written if it
/// is non-blank and the frame still has symbol budget; otherwise one more
/// frame is read. Ties resolve to blank. Decoding stops early once
/// max_output_len tokens are written.
template <TransducerScorer S>
Hypothesis greedy_stream_decode(S& scorer, const DecodeLimits& limits = {}, double frame_ms = 40.0) {
  Hypothesis hyp;
  const std::size_t T = scorer.num_frames();
  hyp.path.source_frames = T;
  hyp.path.frame_ms = frame_ms;
  std::size_t emitted_here = 0;
  for (std::size_t t = 1; t <= T;) {
    const std::vector<double> z = scorer.logits(t - 1);
    if (z.empty()) throw InvalidArgument("scorer returned no logits");
    const std::size_t blank = z.size() - 1;
    std::size_t best = blank;
    for (std::size_t k = 0; k < blank; ++k)
      if (z[k] > z[best]) best = k;
    if (best != blank && emitted_here >= limits.max_symbols_per_frame) hyp.truncated = true;
    if (best != blank && emitted_here < limits.max_symbols_per_frame) {
      hyp.tokens.push_back(static_cast<TokenId>(best));
      hyp.path.delays.push_back(t);
      scorer.advance(static_cast<TokenId>(best));
      ++emitted_here;
      if (limits.max_output_len != 0 && hyp.tokens.size() >= limits.max_output_len) {
        hyp.truncated = true;
        break;
      }
      continue;
    }
    ++t;
    emitted_here = 0;
  }
  return hyp;
}

inline constexpr std::size_t kWaitInfinity = std::numeric_limits<std::size_t>::max();

/// Fixed wait-k policy: d(u) = min(k + u - 1, T). k = kWaitInfinity reads the
/// whole source first.
inline ReadWritePath wait_k_path(std::size_t k, std::size_t T, std::size_t U, double frame_ms = 40.0) {
  if (k == 0 || T == 0 || U == 0) throw InvalidArgument("wait_k_path needs k, T, U >= 1");
  ReadWritePath p;
  p.source_frames = T;
  p.frame_ms = frame_ms;
  for (std::size_t u = 1; u <= U; ++u) {
    p.delays.push_back(k == kWaitInfinity ? T : std::min(T, k + u - 1));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Hypothesis files: `<tokens>\t<delays>\t<T>` per utterance.

inline void write_hypotheses(std::ostream& os, const std::vector<Hypothesis>& hyps) {
  for (const Hypothesis& h : hyps) {
    os << join_tokens(h.tokens) << '\t';
    for (std::size_t i = 0; i < h.path.delays.size(); ++i) os << (i ? " " : "") << h.path.delays[i];
    os << '\t' << h.path.source_frames << '\n';
  }
}

inline std::vector<Hypothesis> read_hypotheses(std::istream& is, double frame_ms = 40.0) {
  std::vector<Hypothesis> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto fields = split_tabs(line);
    if (fields.size() != 3) throw ParseError(lineno, "expected 3 tab-separated fields");
    Hypothesis h;
    h.tokens = parse_tokens(fields[0], lineno);
    for (TokenId d : parse_tokens(fields[1], lineno)) h.path.delays.push_back(static_cast<std::size_t>(d));
    const TokenSequence T = parse_tokens(fields[2], lineno);
    if (T.size() != 1) throw ParseError(lineno, "expected a single frame count");
    h.path.source_frames = static_cast<std::size_t>(T[0]);
    h.path.frame_ms = frame_ms;
    if (h.tokens.size() != h.path.delays.size()) throw ParseError(lineno, "token and delay counts differ");
    if (!h.path.valid()) throw ParseError(lineno, "delays must be nondecreasing within [1, T]");
    out.push_back(std::move(h));
  }
  return out;
}

inline void write_hypotheses(const std::vector<Hypothesis>& hyps, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InvalidArgument("cannot open '" + path + "' for writing");
  write_hypotheses(os, hyps);
}

inline std::vector<Hypothesis> read_hypotheses(const std::string& path, double frame_ms = 40.0) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidArgument("cannot open hypothesis file '" + path + "'");
  return read_hypotheses(is, frame_ms);
}

}  // namespace streamduct
