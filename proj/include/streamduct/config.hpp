#pragma once

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>

#include "streamduct/encoder.hpp"
#include "streamduct/errors.hpp"
#include "streamduct/joint.hpp"
#include "streamduct/predictor.hpp"
#include "streamduct/synthdata.hpp"

namespace streamduct {

/// Everything needed to build, train and evaluate one model. Stored as flat
/// `key = value` text; see visit_fields for the key names.
struct TrainConfig {
  // Task.
  std::size_t vocab = 40;
  std::size_t feature_dim = 16;
  std::size_t frames_per_token = 8;
  double noise = 0.1;
  std::size_t min_length = 5;
  std::size_t max_length = 20;
  std::size_t reorder_window = 3;
  std::uint64_t task_seed = 20220901;

  // Encoder.
  std::size_t encoder_layers = 2;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t ffn = 128;
  std::size_t chunk_size = 4;
  std::size_t left_chunks = 2;

  // Predictor and joint.
  std::size_t predictor_layers = 1;
  std::size_t predictor_width = 64;
  JointVariant joint = JointVariant::kLinear;
  Activation joint_activation = Activation::kTanh;
  std::size_t d_joint = 64;

  // Optimizer.
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  double grad_clip = 5.0;
  std::size_t warmup_steps = 0;
  std::size_t batch_size = 16;
  std::size_t steps = 2000;
  std::uint64_t seed = 1;
  double mix_ratio = 0.5;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

  TaskConfig task() const {
    TaskConfig t;
    t.source_vocab = t.target_vocab = vocab;
    t.feature_dim = feature_dim;
    t.frames_per_token = frames_per_token;
    t.noise = noise;
    t.min_length = min_length;
    t.max_length = max_length;
    t.reorder_window = reorder_window;
    t.task_seed = task_seed;
    return t;
  }
  EncoderConfig encoder() const { return {feature_dim, encoder_layers, d_model, heads, ffn}; }
  MaskConfig mask() const { return {chunk_size, left_chunks}; }
  PredictorConfig predictor() const { return {vocab, predictor_layers, predictor_width}; }
  JointConfig joint_config() const {
    return {joint, joint_activation, d_model, predictor_width, d_joint, vocab + 1};
  }
  /// Milliseconds per encoder frame.
  double frame_ms() const { return 10.0 * static_cast<double>(EncoderConfig::kSubsampleFactor); }

  /// f(key, field) for every field, in file order.
  template <class Self, class F>
  static void visit_fields(Self& c, F&& f) {
    f("vocab", c.vocab);
    f("feature_dim", c.feature_dim);
    f("frames_per_token", c.frames_per_token);
    f("noise", c.noise);
    f("min_length", c.min_length);
    f("max_length", c.max_length);
    f("reorder_window", c.reorder_window);
    f("task_seed", c.task_seed);
    f("encoder_layers", c.encoder_layers);
    f("d_model", c.d_model);
    f("heads", c.heads);
    f("ffn", c.ffn);
    f("chunk_size", c.chunk_size);
    f("left_chunks", c.left_chunks);
    f("predictor_layers", c.predictor_layers);
    f("predictor_width", c.predictor_width);
    f("joint", c.joint);
    f("joint_activation", c.joint_activation);
    f("d_joint", c.d_joint);
    f("learning_rate", c.learning_rate);
    f("beta1", c.beta1);
    f("beta2", c.beta2);
    f("adam_eps", c.adam_eps);
    f("grad_clip", c.grad_clip);
    f("warmup_steps", c.warmup_steps);
    f("batch_size", c.batch_size);
    f("steps", c.steps);
    f("seed", c.seed);
    f("mix_ratio", c.mix_ratio);
  }

  void validate() const {
    (void)SynthTask(task());
    streamduct::validate(encoder());
    if (chunk_size == 0) throw InvalidArgument("chunk_size must be at least 1");
    if (predictor_layers == 0 || predictor_width == 0 || d_joint == 0) {
      throw InvalidArgument("predictor and joint dimensions must be positive");
    }
    if (batch_size == 0) throw InvalidArgument("batch_size must be at least 1");
    if (!(learning_rate > 0.0) || !(grad_clip > 0.0)) throw InvalidArgument("learning_rate and grad_clip must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw InvalidArgument("moment decays must lie in [0, 1)");
    }
    if (!(mix_ratio > 0.0 && mix_ratio < 1.0)) throw InvalidArgument("mix_ratio must lie in (0, 1)");
  }
};

namespace detail {

template <class T>
  requires std::is_integral_v<T>
std::string format_field(T v) {
  return std::to_string(v);
}
inline std::string format_field(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}
inline std::string format_field(JointVariant v) { return std::string(variant_name(v)); }
inline std::string format_field(Activation v) { return std::string(activation_name(v)); }

template <class T>
  requires std::is_integral_v<T>
void parse_field(std::string_view text, T& out, std::size_t line, std::string_view key) {
  T v{};
  const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size()) {
    throw ParseError(line, "bad unsigned integer for '" + std::string(key) + "': '" + std::string(text) + "'");
  }
  out = v;
}
inline void parse_field(std::string_view text, double& out, std::size_t line, std::string_view key) {
  const std::string s(text);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ParseError(line, "bad number for '" + std::string(key) + "': '" + s + "'");
  }
  out = v;
}
inline void parse_field(std::string_view text, JointVariant& out, std::size_t line, std::string_view) {
  try {
    out = parse_variant(text);
  } catch (const InvalidArgument& e) {
    throw ParseError(line, e.what());
  }
}
inline void parse_field(std::string_view text, Activation& out, std::size_t line, std::string_view) {
  try {
    out = parse_activation(text);
  } catch (const InvalidArgument& e) {
    throw ParseError(line, e.what());
  }
}

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::string to_text(const TrainConfig& cfg) {
  std::string out;
  TrainConfig::visit_fields(cfg, [&](const char* key, const auto& v) {
    out += key;
    out += " = ";
    out += detail::format_field(v);
    out += '\n';
  });
  return out;
}

/// Parse `key = value` lines over the defaults. Blank lines and `#` comments
/// are ignored; unknown or repeated keys are errors. Keys listed in `extra`
/// are accepted and returned through `extras` instead.
inline TrainConfig parse_config(std::istream& is, const std::set<std::string>& extra = {},
                                std::map<std::string, std::string>* extras = nullptr) {
  TrainConfig cfg;
  std::set<std::string> seen;
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(lineno, "expected 'key = value'");
    const std::string key(detail::trim(line.substr(0, eq)));
    const std::string_view value = detail::trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ParseError(lineno, "duplicate key '" + key + "'");
    if (extra.count(key)) {
      if (extras) (*extras)[key] = std::string(value);
      continue;
    }
    bool found = false;
    TrainConfig::visit_fields(cfg, [&](const char* k, auto& field) {
      if (key == k) {
        detail::parse_field(value, field, lineno, key);
        found = true;
      }
    });
    if (!found) throw ParseError(lineno, "unknown key '" + key + "'");
  }
  return cfg;
}

inline TrainConfig parse_config(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("cannot open config '" + path + "'");
  TrainConfig cfg = parse_config(is);
  cfg.validate();
  return cfg;
}

}  // namespace streamduct
