#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace qprompt {

/// Portable random source. std::mt19937_64 is fully specified by the
/// standard, but the std distributions are not, so uniform and Gaussian
/// variates are derived here by hand: 53-bit uniforms and the Box-Muller
/// transform. Sequences are identical on every conforming platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Uniform on (0, 1], safe to take the log of.
  double uniform_open_zero() { return 1.0 - uniform(); }

  /// Uniform integer on [0, n). Modulo bias is negligible for the small n
  /// used here (shuffles and index draws, n << 2^64).
  std::uint64_t below(std::uint64_t n) { return engine_() % n; }

  /// Standard normal variate.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double radius = std::sqrt(-2.0 * std::log(uniform_open_zero()));
    const double angle = 2.0 * std::numbers::pi * uniform();
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  template <typename T>
  void shuffle(T& container) {
    for (std::size_t i = container.size(); i > 1; --i) {
      std::swap(container[i - 1], container[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace qprompt
