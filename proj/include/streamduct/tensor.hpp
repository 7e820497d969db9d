#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "streamduct/errors.hpp"

namespace streamduct {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(shape[i]);
  }
  return out;
}

/// Dense row-major tensor of 64-bit reals.
///
/// Most of the library treats tensors as matrices: rank-1 tensors of extent n
/// behave as 1 x n rows, and `rows()` is always the leading extent.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    data_.assign(checked_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_size(shape_)) {
      throw InvalidArgument("tensor data has " + std::to_string(data_.size()) +
                            " elements, shape " + shape_string(shape_) + " needs " +
                            std::to_string(checked_size(shape_)));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }
  static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const noexcept { return shape_.size() <= 1 ? 1 : shape_[0]; }
  std::size_t cols() const noexcept {
    return shape_.empty() ? 0 : data_.size() / rows();
  }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row_span(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same element count, new extents.
  Tensor reshaped(Shape shape) const {
    Tensor out;
    out.shape_ = std::move(shape);
    if (checked_size(out.shape_) != data_.size()) {
      throw InvalidArgument("cannot reshape " + shape_string(shape_) + " to " +
                            shape_string(out.shape_));
    }
    out.data_ = data_;
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static std::size_t checked_size(const Shape& shape) {
    if (shape.empty()) throw InvalidArgument("tensor shape must have at least one extent");
    std::size_t n = 1;
    for (std::size_t e : shape) {
      if (e == 0) throw InvalidArgument("tensor extent must be positive, got " + shape_string(shape));
      n *= e;
    }
    return n;
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Round every element to the nearest 32-bit float. Parameters live on this
/// grid so that checkpoints (stored as f32) reload bit-exactly.
inline void round_to_f32(Tensor& t) {
  for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

/// Seeded random source. Algorithm: std::mt19937_64 for raw 64-bit words;
/// uniform reals take the top 53 bits; normals use Box-Muller on two uniforms.
/// All three steps are fully specified, so draws are portable across
/// standard libraries.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64/u53/box-muller";

  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw InvalidArgument("Rng::below requires n > 0");
    // Rejection keeps the draw unbiased.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// splitmix64 finalizer; derives independent child seeds from one seed.
constexpr std::uint64_t mix_seed(std::uint64_t x, std::uint64_t salt = 0) {
  x += 0x9E3779B97F4A7C15ull * (salt + 1);
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

enum class InitScheme { kUniformScaled, kZeros };

/// kUniformScaled draws U(-a, a) with a = sqrt(6 / (fan_in + fan_out)), where
/// fan_in is the leading extent and fan_out the element count per row. A
/// rank-1 tensor of extent n uses fan_in = fan_out = n.
inline Tensor seeded_init(const Shape& shape, InitScheme scheme, Rng& rng) {
  Tensor t(shape);
  if (scheme == InitScheme::kZeros) return t;
  const double fan_in = static_cast<double>(shape[0]);
  const double fan_out = shape.size() == 1 ? static_cast<double>(shape[0])
                                           : static_cast<double>(t.size() / shape[0]);
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  for (double& v : t.values()) v = rng.uniform(-a, a);
  return t;
}

/// Numerically stable softmax of one vector.
inline std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) throw InvalidArgument("softmax of an empty vector");
  for (double x : v) {
    if (!std::isfinite(x)) throw InvalidArgument("softmax input is not finite");
  }
  const double m = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) z += (out[i] = std::exp(v[i] - m));
  for (double& x : out) x /= z;
  return out;
}

inline double logaddexp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

}  // namespace streamduct
