#pragma once

// IEEE-754 binary16 conversion with round-to-nearest-even.

#include <bit>
#include <cmath>
#include <cstdint>

namespace qprompt {

/// Rounds a double straight to binary16 (no intermediate float rounding).
/// Relies on the default round-to-nearest-even floating-point mode.
inline std::uint16_t double_to_half(double value) {
  const std::uint16_t sign = std::signbit(value) ? 0x8000u : 0u;
  if (std::isnan(value)) return sign | 0x7e00u;
  const double mag = std::fabs(value);
  if (std::isinf(mag)) return sign | 0x7c00u;
  if (mag == 0.0) return sign;

  int exp2 = 0;
  std::frexp(mag, &exp2);  // mag = f * 2^exp2 with f in [0.5, 1)
  int e = exp2 - 1;        // mag in [2^e, 2^(e+1))
  if (e < -14) {
    // Subnormal: units of 2^-24. Rounding may reach 1024, the smallest normal,
    // whose encoding is exactly 0x0400.
    const auto q = static_cast<std::uint32_t>(std::nearbyint(std::ldexp(mag, 24)));
    return sign | static_cast<std::uint16_t>(q);
  }
  auto q = static_cast<std::uint32_t>(std::nearbyint(std::ldexp(mag, 10 - e)));
  if (q == 2048u) {
    q = 1024u;
    ++e;
  }
  if (e > 15) return sign | 0x7c00u;
  return sign | static_cast<std::uint16_t>((static_cast<std::uint32_t>(e + 15) << 10) | (q & 0x3ffu));
}

inline std::uint16_t float_to_half(float value) { return double_to_half(value); }

inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;

  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400u) == 0);
      bits = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | ((mant & 0x3ffu) << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

/// Value after a trip through half precision.
inline double round_to_half(double v) {
  return half_to_float(double_to_half(v));
}

}  // namespace qprompt
