#pragma once

// Reference computations used by the unit and acceptance tests. Each one is
// written without reusing the library code path it checks: exhaustive
// labelings instead of Lloyd, 50-digit arithmetic instead of double, bit-by-bit
// packing instead of shifted bytes, exhaustive search over binary16.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include <boost/multiprecision/cpp_bin_float.hpp>

namespace oracle {

using big = boost::multiprecision::cpp_bin_float_50;

/// Minimum k-means objective over every labeling of the values into k
/// non-empty groups (k^N labelings, so keep N small).
inline double brute_force_kmeans(std::span<const double> values, std::size_t k) {
  const std::size_t n = values.size();
  std::vector<std::size_t> label(n, 0);
  double best = std::numeric_limits<double>::infinity();
  for (;;) {
    std::vector<long double> sum(k, 0.0L);
    std::vector<std::size_t> cnt(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sum[label[i]] += values[i];
      ++cnt[label[i]];
    }
    bool all_used = true;
    long double obj = 0.0L;
    for (std::size_t c = 0; c < k; ++c) {
      if (cnt[c] == 0) {
        all_used = false;
        break;
      }
      const long double mean = sum[c] / static_cast<long double>(cnt[c]);
      long double s = 0.0L;
      for (std::size_t i = 0; i < n; ++i) {
        if (label[i] == c) s += (values[i] - mean) * (values[i] - mean);
      }
      obj += s;
    }
    if (all_used) best = std::min(best, static_cast<double>(obj));
    std::size_t pos = 0;
    while (pos < n && ++label[pos] == k) label[pos++] = 0;
    if (pos == n) break;
  }
  return best;
}

/// KL(p || q) in 50 significant digits. Zero entries of p contribute nothing.
inline double kl_high_precision(std::span<const double> p, std::span<const double> q) {
  big total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    const big pi = p[i];
    const big qi = q[i];
    total += pi * boost::multiprecision::log(pi / qi);
  }
  return static_cast<double>(total);
}

/// Same, after adding eps to every entry and renormalizing.
inline double kl_smoothed_high_precision(std::span<const double> p, std::span<const double> q, double eps) {
  big ps = 0, qs = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    ps += big(p[i]) + big(eps);
    qs += big(q[i]) + big(eps);
  }
  big total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const big a = (big(p[i]) + big(eps)) / ps;
    const big b = (big(q[i]) + big(eps)) / qs;
    total += a * boost::multiprecision::log(a / b);
  }
  return static_cast<double>(total);
}

/// Random probability vector of length k; some entries may be exactly 0.
inline std::vector<double> random_distribution(std::mt19937_64& gen, std::size_t k, bool allow_zeros) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> p(k);
  for (auto& x : p) x = (allow_zeros && u(gen) < 0.2) ? 0.0 : u(gen) + 1e-3;
  double s = 0.0;
  for (double x : p) s += x;
  if (s == 0.0) {
    p[0] = 1.0;
    s = 1.0;
  }
  for (auto& x : p) x /= s;
  return p;
}

/// Packs indices by writing each bit individually: bit t of the stream is bit
/// (t mod 8) of byte t / 8.
inline std::vector<std::uint8_t> pack_bitwise(std::span<const std::uint32_t> indices, int bits) {
  std::vector<bool> stream;
  for (auto v : indices) {
    for (int b = 0; b < bits; ++b) stream.push_back(((v >> b) & 1u) != 0);
  }
  std::vector<std::uint8_t> out((stream.size() + 7) / 8, 0);
  for (std::size_t t = 0; t < stream.size(); ++t) {
    if (stream[t]) out[t / 8] = static_cast<std::uint8_t>(out[t / 8] | (1u << (t % 8)));
  }
  return out;
}

/// Value of a binary16 bit pattern, computed from the definition.
inline double half_value(std::uint16_t h) {
  const int sign = (h >> 15) & 1;
  const int exp = (h >> 10) & 0x1f;
  const int mant = h & 0x3ff;
  double v;
  if (exp == 0) {
    v = std::ldexp(static_cast<double>(mant), -24);
  } else if (exp == 31) {
    v = mant == 0 ? std::numeric_limits<double>::infinity() : std::numeric_limits<double>::quiet_NaN();
  } else {
    v = std::ldexp(static_cast<double>(1024 + mant), exp - 25);
  }
  return sign ? -v : v;
}

/// Nearest finite binary16 value to x by exhaustive search, ties to an even
/// significand. Values beyond the overflow threshold map to infinity.
inline std::uint16_t half_nearest(double x) {
  const double overflow = 65520.0;  // halfway between 65504 and 2^16
  const std::uint16_t sign = std::signbit(x) ? 0x8000 : 0;
  const double m = std::fabs(x);
  if (m >= overflow) return static_cast<std::uint16_t>(sign | 0x7c00);
  std::uint16_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::uint32_t h = 0; h <= 0x7bff; ++h) {
    const double d = std::fabs(half_value(static_cast<std::uint16_t>(h)) - m);
    if (d < best_d || (d == best_d && (h & 1u) == 0)) {
      best_d = d;
      best = static_cast<std::uint16_t>(h);
    }
  }
  return static_cast<std::uint16_t>(sign | best);
}

/// Central finite difference of f at x.
inline std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                              std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + h;
    const double fp = f(x);
    x[i] = xi - h;
    const double fm = f(x);
    x[i] = xi;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace oracle
