#pragma once

// Scalar codebook quantization of a weight tensor.
//
// A tensor W is normalized with its population statistics, 1-D K-Means fits
// 2^b centers on the normalized values, and every weight is replaced by the
// nearest center mapped back through the inverse affine transform:
//
//   W_hat = (W - mu) / sigma,   W_q = sigma * c[idx] + mu.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qprompt/error.hpp"
#include "qprompt/random.hpp"
#include "qprompt/tensor.hpp"

namespace qprompt {

using Index = std::uint32_t;

constexpr bool is_supported_bits(int bits) {
  return bits == 1 || bits == 2 || bits == 4 || bits == 8;
}

inline void require_supported_bits(int bits) {
  if (!is_supported_bits(bits)) {
    fail(ErrorCode::BadConfig,
         "unsupported bit width " + std::to_string(bits) + " (use 1, 2, 4 or 8)");
  }
}

constexpr std::size_t codebook_size(int bits) { return std::size_t{1} << bits; }

struct NormStats {
  double mu = 0.0;
  double sigma = 0.0;

  bool operator==(const NormStats&) const = default;
};

/// Mean and population standard deviation (divides by N).
inline NormStats compute_stats(std::span<const double> values) {
  require_nonempty(values);
  require_finite(values);
  const double n = static_cast<double>(values.size());
  const double mu = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mu) * (v - mu);
  return {mu, std::sqrt(ss / n)};
}

inline NormStats compute_stats(const WeightTensor& w) { return compute_stats(w.view()); }

inline void require_nondegenerate(const NormStats& s) {
  if (!(s.sigma > 0.0)) {
    fail(ErrorCode::DegenerateTensor,
         "standard deviation is zero; a constant tensor cannot be normalized");
  }
}

inline std::vector<double> normalize(std::span<const double> values, const NormStats& s) {
  require_nondegenerate(s);
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - s.mu) / s.sigma;
  return out;
}

inline WeightTensor normalize(const WeightTensor& w, const NormStats& s) {
  return WeightTensor(normalize(w.view(), s), w.shape);
}

inline std::vector<double> denormalize(std::span<const double> values, const NormStats& s) {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = s.sigma * values[i] + s.mu;
  return out;
}

/// Index of the center nearest to v. Centers must be ascending; on an exact
/// tie the smaller index wins.
inline Index nearest_center(double v, std::span<const double> centers) {
  const auto it = std::lower_bound(centers.begin(), centers.end(), v);
  if (it == centers.begin()) return 0;
  if (it == centers.end()) return static_cast<Index>(centers.size() - 1);
  const auto j = static_cast<Index>(it - centers.begin());
  return std::abs(v - centers[j - 1]) <= std::abs(v - centers[j]) ? j - 1 : j;
}

inline std::vector<Index> assign(std::span<const double> values, std::span<const double> centers) {
  std::vector<Index> indices(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) indices[i] = nearest_center(values[i], centers);
  return indices;
}

/// Sum of squared distances from each value to its nearest center.
inline double clustering_objective(std::span<const double> values,
                                   std::span<const double> centers) {
  double total = 0.0;
  for (double v : values) {
    const double d = v - centers[nearest_center(v, centers)];
    total += d * d;
  }
  return total;
}

struct KMeansOptions {
  int max_iter = 100;
  /// Stop once the largest center movement drops below this.
  double tol = 1e-6;
  std::uint64_t seed = 0;
  /// Std of Gaussian jitter added to the quantile seeds; 0 keeps the fit
  /// independent of the seed.
  double jitter = 0.0;
  /// After Lloyd converges, restart it from the globally optimal contiguous
  /// partition if that is strictly better. Costs O(2^b N log N).
  bool exact_refine = true;
};

struct KMeansResult {
  std::vector<double> centers;
  /// Objective after every assignment step, ending with the returned centers.
  std::vector<double> objective_trace;
  int iterations = 0;
  bool converged = false;
};

namespace detail {

/// Linear-interpolated quantile of sorted data.
inline double quantile_sorted(std::span<const double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline std::size_t count_distinct_sorted(std::span<const double> sorted) {
  if (sorted.empty()) return 0;
  std::size_t n = 1;
  for (std::size_t i = 1; i < sorted.size(); ++i) n += sorted[i] != sorted[i - 1];
  return n;
}

}  // namespace detail

/// Quantile seeds: center i sits at the (2i+1)/2^(b+1) quantile.
inline std::vector<double> quantile_init(std::span<const double> sorted, int bits) {
  const std::size_t k = codebook_size(bits);
  std::vector<double> centers(k);
  for (std::size_t i = 0; i < k; ++i) {
    centers[i] = detail::quantile_sorted(
        sorted, static_cast<double>(2 * i + 1) / static_cast<double>(2 * k));
  }
  return centers;
}

namespace detail {

/// Means of the k contiguous segments of sorted data with the least total
/// within-segment squared deviation. Divide-and-conquer over split points,
/// O(k N log N).
inline std::vector<double> optimal_partition_centers(std::span<const double> sorted, std::size_t k) {
  const std::size_t n = sorted.size();
  std::vector<double> s1(n + 1, 0.0), s2(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    s1[i + 1] = s1[i] + sorted[i];
    s2[i + 1] = s2[i] + sorted[i] * sorted[i];
  }
  // Cost of sorted[i, j).
  auto cost = [&](std::size_t i, std::size_t j) {
    const double len = static_cast<double>(j - i);
    const double sum = s1[j] - s1[i];
    return std::max(0.0, (s2[j] - s2[i]) - sum * sum / len);
  };
  const double inf = std::numeric_limits<double>::infinity();
  // prev[j]: best cost of the first j values in m-1 segments.
  std::vector<double> prev(n + 1, inf), cur(n + 1, inf);
  std::vector<std::vector<std::size_t>> split(k, std::vector<std::size_t>(n + 1, 0));
  for (std::size_t j = 1; j <= n; ++j) prev[j] = cost(0, j);
  for (std::size_t m = 1; m < k; ++m) {
    std::fill(cur.begin(), cur.end(), inf);
    auto& sp = split[m];
    // Fill cur[lo..hi] knowing the best split lies in [opt_lo, opt_hi].
    auto solve = [&](auto&& self, std::size_t lo, std::size_t hi, std::size_t opt_lo,
                     std::size_t opt_hi) -> void {
      if (lo > hi) return;
      const std::size_t mid = lo + (hi - lo) / 2;
      double best = inf;
      std::size_t arg = opt_lo;
      for (std::size_t i = opt_lo; i <= std::min(opt_hi, mid - 1); ++i) {
        const double c = prev[i] + cost(i, mid);
        if (c < best) {
          best = c;
          arg = i;
        }
      }
      cur[mid] = best;
      sp[mid] = arg;
      if (mid > lo) self(self, lo, mid - 1, opt_lo, arg);
      self(self, mid + 1, hi, arg, opt_hi);
    };
    solve(solve, m + 1, n, m, n - 1);
    std::swap(prev, cur);
  }
  std::vector<double> centers(k);
  std::size_t j = n;
  for (std::size_t m = k; m-- > 0;) {
    const std::size_t i = m == 0 ? 0 : split[m][j];
    centers[m] = (s1[j] - s1[i]) / static_cast<double>(j - i);
    j = i;
  }
  return centers;
}

/// Lloyd iterations on sorted data starting from r.centers. Appends to the
/// trace and iteration count already in `r`.
inline void lloyd(std::span<const double> sorted, const KMeansOptions& opts, KMeansResult& r) {
  const std::size_t k = r.centers.size();
  std::vector<double> sums(k);
  std::vector<std::size_t> counts(k);
  std::vector<Index> idx(sorted.size());
  std::vector<double> next(k);
  std::vector<std::size_t> by_distance(sorted.size());

  for (int iter = 0; iter < opts.max_iter; ++iter) {
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    double objective = 0.0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      idx[i] = nearest_center(sorted[i], r.centers);
      const double d = sorted[i] - r.centers[idx[i]];
      objective += d * d;
      sums[idx[i]] += sorted[i];
      ++counts[idx[i]];
    }
    r.objective_trace.push_back(objective);

    bool any_empty = false;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        next[c] = sums[c] / static_cast<double>(counts[c]);
      } else {
        any_empty = true;
      }
    }
    if (any_empty) {
      std::iota(by_distance.begin(), by_distance.end(), std::size_t{0});
      std::stable_sort(by_distance.begin(), by_distance.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(sorted[a] - r.centers[idx[a]]) >
               std::abs(sorted[b] - r.centers[idx[b]]);
      });
      std::size_t cursor = 0;
      for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] > 0) continue;
        for (; cursor < by_distance.size(); ++cursor) {
          const double candidate = sorted[by_distance[cursor]];
          bool taken = false;
          for (std::size_t o = 0; o < k; ++o) {
            if ((counts[o] > 0 || o < c) && next[o] == candidate) taken = true;
          }
          if (!taken) break;
        }
        if (cursor == by_distance.size()) {
          fail(ErrorCode::DegenerateTensor, "could not repopulate an empty cluster");
        }
        next[c] = sorted[by_distance[cursor++]];
      }
    }
    std::sort(next.begin(), next.end());

    double movement = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      movement = std::max(movement, std::abs(next[c] - r.centers[c]));
    }
    r.centers = next;
    ++r.iterations;
    if (movement < opts.tol && !any_empty) {
      r.converged = true;
      break;
    }
    r.converged = false;
  }
  r.objective_trace.push_back(clustering_objective(sorted, r.centers));
}

}  // namespace detail

/// Lloyd's algorithm on scalar data. Without `init` the centers start at the
/// quantile seeds; with it (warm start) they start at the given centers.
/// Empty clusters are moved onto the value farthest from its own center.
inline KMeansResult kmeans_fit(std::span<const double> values, int bits,
                               const KMeansOptions& opts = {},
                               std::span<const double> init = {}) {
  require_supported_bits(bits);
  require_nonempty(values);
  require_finite(values);
  const std::size_t k = codebook_size(bits);

  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  if (detail::count_distinct_sorted(sorted) < k) {
    fail(ErrorCode::DegenerateTensor, "fewer distinct values than the " + std::to_string(k) +
                                          " requested clusters");
  }

  KMeansResult result;
  if (!init.empty()) {
    if (init.size() != k) fail(ErrorCode::LengthMismatch, "warm-start codebook has wrong size");
    result.centers.assign(init.begin(), init.end());
    std::sort(result.centers.begin(), result.centers.end());
  } else {
    result.centers = quantile_init(sorted, bits);
    if (opts.jitter > 0.0) {
      Rng rng(opts.seed);
      for (double& c : result.centers) c += opts.jitter * rng.gaussian();
      std::sort(result.centers.begin(), result.centers.end());
    }
  }

  // Clustering is order-independent, so iterate over the sorted copy.
  detail::lloyd(sorted, opts, result);

  // Lloyd can stall in a local optimum even in 1-D. The best contiguous
  // partition of the sorted values is the global optimum; restart from it
  // when it is strictly better.
  if (opts.exact_refine) {
    auto best = detail::optimal_partition_centers(sorted, k);
    const double current = result.objective_trace.back();
    const bool ascending = std::adjacent_find(best.begin(), best.end(),
                                              std::greater_equal<>()) == best.end();
    if (ascending && clustering_objective(sorted, best) < current - 1e-12 * (1.0 + current)) {
      result.centers = std::move(best);
      detail::lloyd(sorted, opts, result);
    }
  }
  return result;
}

/// Centers in normalized space plus the statistics that map them back.
struct Codebook {
  int bits = 1;
  std::vector<double> centers;
  NormStats stats;

  std::size_t size() const noexcept { return centers.size(); }
  bool operator==(const Codebook&) const = default;
};

/// Checks the structural invariants: 2^b finite, strictly ascending centers.
inline void validate(const Codebook& cb) {
  require_supported_bits(cb.bits);
  if (cb.centers.size() != codebook_size(cb.bits)) {
    fail(ErrorCode::LengthMismatch, "codebook must hold 2^bits centers");
  }
  require_finite(cb.centers);
  for (std::size_t i = 1; i < cb.centers.size(); ++i) {
    if (!(cb.centers[i - 1] < cb.centers[i])) {
      fail(ErrorCode::BadConfig, "codebook centers must be strictly ascending");
    }
  }
}

/// Statistics, normalization and K-Means in one call.
inline Codebook fit_codebook(const WeightTensor& w, int bits, const KMeansOptions& opts = {}) {
  const NormStats stats = compute_stats(w);
  const auto normalized = normalize(w.view(), stats);
  return {bits, kmeans_fit(normalized, bits, opts).centers, stats};
}

struct Assignment {
  std::vector<Index> indices;
  /// Denormalized quantized weights.
  std::vector<double> reconstruction;
};

inline std::vector<double> dequantize(std::span<const Index> indices, const Codebook& cb) {
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= cb.centers.size()) {
      fail(ErrorCode::IndexOverflow, "index " + std::to_string(indices[i]) + " out of range");
    }
    out[i] = cb.stats.sigma * cb.centers[indices[i]] + cb.stats.mu;
  }
  return out;
}

inline Assignment quantize(std::span<const double> values, const Codebook& cb) {
  require_finite(values);
  const auto normalized = normalize(values, cb.stats);
  Assignment a;
  a.indices = assign(normalized, cb.centers);
  a.reconstruction = dequantize(a.indices, cb);
  return a;
}

inline Assignment quantize(const WeightTensor& w, const Codebook& cb) { return quantize(w.view(), cb); }

/// E = sum_i (Q(W_i) - W_i)^2 in raw (denormalized) space.
inline double quant_error(std::span<const double> original, std::span<const double> reconstruction) {
  require_same_length(original.size(), reconstruction.size());
  double e = 0.0;
  for (std::size_t i = 0; i < original.size(); ++i) {
    const double d = reconstruction[i] - original[i];
    e += d * d;
  }
  return e;
}

inline double quant_error(const WeightTensor& w, const Assignment& a) {
  return quant_error(w.view(), a.reconstruction);
}

struct QuantError {
  double raw = 0.0;
  /// Same error measured on normalized values, i.e. raw / sigma^2.
  double normalized = 0.0;
};

inline QuantError quant_error_report(const WeightTensor& w, const Assignment& a, const NormStats& s) {
  require_nondegenerate(s);
  const double raw = quant_error(w, a);
  return {raw, raw / (s.sigma * s.sigma)};
}

}  // namespace qprompt
