#pragma once

#include <cstdint>
#include <fstream>
#include <iosfwd>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "streamduct/errors.hpp"
#include "streamduct/tensor.hpp"

namespace streamduct {

using TokenId = int;
using TokenSequence = std::vector<TokenId>;

/// Target-language rule set of the synthetic task.
enum class Language { kMono, kReorder };

inline std::string_view language_name(Language lang) {
  return lang == Language::kMono ? "MONO" : "REORDER";
}

inline Language parse_language(std::string_view name) {
  if (name == "MONO") return Language::kMono;
  if (name == "REORDER") return Language::kReorder;
  throw InvalidArgument("unknown language '" + std::string(name) + "' (expected MONO or REORDER)");
}

struct TaskConfig {
  std::size_t source_vocab = 40;
  std::size_t target_vocab = 40;
  std::size_t feature_dim = 16;
  std::size_t frames_per_token = 8;
  double noise = 0.1;
  std::size_t min_length = 5;
  std::size_t max_length = 20;
  std::size_t reorder_window = 3;
  std::uint64_t task_seed = 20220901;
};

/// Input frames for one utterance, frames x feature_dim.
struct FeatureSequence {
  Tensor frames;
  double frame_duration_ms = 10.0;

  std::size_t num_frames() const { return frames.rows(); }
};

struct ParallelExample {
  std::uint64_t seed = 0;
  Language language = Language::kMono;
  TokenSequence source;
  TokenSequence target;

  friend bool operator==(const ParallelExample&, const ParallelExample&) = default;
};

/// Deterministic surrogate translation task.
///
/// MONO maps every source token through a fixed bijection. REORDER cuts the
/// source into consecutive windows of `reorder_window` tokens (the last one
/// may be shorter), reverses each window and maps it through a second
/// bijection. Both bijections and the render matrix derive from task_seed.
class SynthTask {
 public:
  explicit SynthTask(TaskConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.source_vocab == 0 || cfg_.source_vocab != cfg_.target_vocab) {
      throw InvalidArgument("synthetic task needs equal, nonzero source and target vocabularies");
    }
    if (cfg_.min_length == 0 || cfg_.min_length > cfg_.max_length) {
      throw InvalidArgument("synthetic task needs 0 < min_length <= max_length");
    }
    if (cfg_.reorder_window == 0) throw InvalidArgument("reorder_window must be positive");
    Rng rng(cfg_.task_seed);
    mono_map_ = random_bijection(rng);
    reorder_map_ = random_bijection(rng);
    render_ = Tensor::matrix(cfg_.source_vocab, cfg_.feature_dim);
    for (double& v : render_.values()) v = rng.normal();
  }

  const TaskConfig& config() const noexcept { return cfg_; }
  const std::vector<TokenId>& mono_map() const noexcept { return mono_map_; }
  const std::vector<TokenId>& reorder_map() const noexcept { return reorder_map_; }
  const Tensor& render_matrix() const noexcept { return render_; }

  /// Replace the bijections (tests use identity maps).
  void set_maps(std::vector<TokenId> mono, std::vector<TokenId> reorder) {
    check_bijection(mono);
    check_bijection(reorder);
    mono_map_ = std::move(mono);
    reorder_map_ = std::move(reorder);
  }

  TokenSequence translate(const TokenSequence& source, Language lang) const {
    TokenSequence out(source.size());
    for (TokenId s : source) {
      if (s < 0 || static_cast<std::size_t>(s) >= cfg_.source_vocab) {
        throw InvalidArgument("source token " + std::to_string(s) + " outside vocabulary");
      }
    }
    if (lang == Language::kMono) {
      for (std::size_t i = 0; i < source.size(); ++i) out[i] = mono_map_[source[i]];
      return out;
    }
    const std::size_t w = cfg_.reorder_window;
    for (std::size_t start = 0; start < source.size(); start += w) {
      const std::size_t end = std::min(start + w, source.size());
      for (std::size_t i = start; i < end; ++i) out[i] = reorder_map_[source[end - 1 - (i - start)]];
    }
    return out;
  }

  ParallelExample gen_pair(Rng& rng, Language lang) const {
    ParallelExample ex;
    ex.seed = rng.seed();
    ex.language = lang;
    const std::size_t len =
        cfg_.min_length + static_cast<std::size_t>(rng.below(cfg_.max_length - cfg_.min_length + 1));
    ex.source.resize(len);
    for (TokenId& s : ex.source) s = static_cast<TokenId>(rng.below(cfg_.source_vocab));
    ex.target = translate(ex.source, lang);
    return ex;
  }

  /// The example whose generator is seeded with `seed`.
  ParallelExample example(std::uint64_t seed, Language lang) const {
    Rng rng(seed);
    return gen_pair(rng, lang);
  }

  /// `count` examples with seeds derived from `base_seed`.
  std::vector<ParallelExample> generate(std::size_t count, Language lang, std::uint64_t base_seed) const {
    std::vector<ParallelExample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(example(mix_seed(base_seed, i), lang));
    return out;
  }

  /// Each token becomes frames_per_token copies of its render row plus
  /// i.i.d. N(0, noise^2) per coordinate.
  FeatureSequence render_features(const TokenSequence& source, Rng& rng) const {
    if (source.empty()) throw InvalidArgument("cannot render an empty source");
    const std::size_t F = cfg_.frames_per_token, d = cfg_.feature_dim;
    FeatureSequence fs;
    fs.frames = Tensor::matrix(source.size() * F, d);
    for (std::size_t i = 0; i < source.size(); ++i) {
      if (source[i] < 0 || static_cast<std::size_t>(source[i]) >= cfg_.source_vocab) {
        throw InvalidArgument("source token " + std::to_string(source[i]) + " outside vocabulary");
      }
      const auto row = render_.row_span(static_cast<std::size_t>(source[i]));
      for (std::size_t f = 0; f < F; ++f) {
        auto out = fs.frames.row_span(i * F + f);
        for (std::size_t j = 0; j < d; ++j) out[j] = row[j] + (cfg_.noise > 0.0 ? cfg_.noise * rng.normal() : 0.0);
      }
    }
    return fs;
  }

  /// Features of a stored example, re-rendered from its seed.
  FeatureSequence features(const ParallelExample& ex) const {
    Rng rng(mix_seed(ex.seed, 0xFEA7));
    return render_features(ex.source, rng);
  }

 private:
  std::vector<TokenId> random_bijection(Rng& rng) const {
    std::vector<TokenId> perm(cfg_.source_vocab);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<TokenId>(i);
    rng.shuffle(perm);
    return perm;
  }

  void check_bijection(const std::vector<TokenId>& map) const {
    if (map.size() != cfg_.source_vocab) throw InvalidArgument("bijection has the wrong size");
    std::vector<bool> seen(map.size(), false);
    for (TokenId v : map) {
      if (v < 0 || static_cast<std::size_t>(v) >= map.size() || seen[v]) {
        throw InvalidArgument("map is not a bijection");
      }
      seen[v] = true;
    }
  }

  TaskConfig cfg_;
  std::vector<TokenId> mono_map_;
  std::vector<TokenId> reorder_map_;
  Tensor render_;
};

// ---------------------------------------------------------------------------
// Dataset files

inline constexpr std::string_view kDatasetHeader = "#streamduct-dataset v1";

inline std::string join_tokens(const TokenSequence& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(tokens[i]);
  }
  return out;
}

/// Parse space-separated non-negative ids; `line` is used in errors only.
inline TokenSequence parse_tokens(std::string_view field, std::size_t line) {
  TokenSequence out;
  std::size_t i = 0;
  while (i < field.size()) {
    if (field[i] == ' ') {
      ++i;
      continue;
    }
    std::size_t j = i;
    long long v = 0;
    while (j < field.size() && field[j] != ' ') {
      if (field[j] < '0' || field[j] > '9') throw ParseError(line, "bad token id '" + std::string(field.substr(i)) + "'");
      v = v * 10 + (field[j] - '0');
      if (v > 1'000'000'000) throw ParseError(line, "token id too large");
      ++j;
    }
    out.push_back(static_cast<TokenId>(v));
    i = j;
  }
  return out;
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == '\t') {
      fields.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return fields;
}

inline void write_dataset(std::ostream& os, const std::vector<ParallelExample>& examples) {
  os << kDatasetHeader << '\n';
  for (const ParallelExample& ex : examples) {
    os << ex.seed << '\t' << language_name(ex.language) << '\t' << join_tokens(ex.source) << '\t'
       << join_tokens(ex.target) << '\n';
  }
}

inline std::vector<ParallelExample> read_dataset(std::istream& is) {
  std::vector<ParallelExample> out;
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(is, line)) throw ParseError(1, "missing dataset header");
  ++lineno;
  if (line != kDatasetHeader) throw ParseError(1, "expected header '" + std::string(kDatasetHeader) + "'");
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 4) throw ParseError(lineno, "expected 4 tab-separated fields, got " + std::to_string(fields.size()));
    ParallelExample ex;
    try {
      std::size_t used = 0;
      ex.seed = std::stoull(std::string(fields[0]), &used);
      if (used != fields[0].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ParseError(lineno, "bad seed '" + std::string(fields[0]) + "'");
    }
    try {
      ex.language = parse_language(fields[1]);
    } catch (const InvalidArgument& e) {
      throw ParseError(lineno, e.what());
    }
    ex.source = parse_tokens(fields[2], lineno);
    ex.target = parse_tokens(fields[3], lineno);
    if (ex.source.empty()) throw ParseError(lineno, "empty source");
    out.push_back(std::move(ex));
  }
  return out;
}

inline void write_dataset(const std::vector<ParallelExample>& examples, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InvalidArgument("cannot open '" + path + "' for writing");
  write_dataset(os, examples);
}

inline std::vector<ParallelExample> read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidArgument("cannot open dataset '" + path + "'");
  return read_dataset(is);
}

}  // namespace streamduct
