#pragma once

// Diagnostics on how a weight tensor's distribution evolves during training:
// histograms, variance over time, tail counts and the divergence between
// adjacent snapshots.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <variant>
#include <vector>

#include "qprompt/error.hpp"
#include "qprompt/quantizer.hpp"
#include "qprompt/scheduler.hpp"
#include "qprompt/tensor.hpp"

namespace qprompt {

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> counts;

  double edge(std::size_t i) const {
    return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(counts.size());
  }
  std::vector<double> probabilities() const {
    std::size_t total = 0;
    for (auto c : counts) total += c;
    std::vector<double> p(counts.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
    }
    return p;
  }
};

/// Uniform bins over [lo, hi]. Bins are half-open [edge_i, edge_i+1) except
/// the last, which also takes hi. Values outside an explicit range are
/// clamped into the end bins so the counts always sum to N. Without a range
/// the data min/max are used; constant data gets the range [v-0.5, v+0.5].
inline Histogram histogram(std::span<const double> values, std::size_t bins,
                           std::optional<std::pair<double, double>> range = std::nullopt) {
  require_nonempty(values);
  require_finite(values);
  if (bins == 0) fail(ErrorCode::BadConfig, "histogram needs at least one bin");
  Histogram h;
  if (range) {
    if (!(range->first < range->second)) fail(ErrorCode::BadConfig, "histogram range needs lo < hi");
    h.lo = range->first;
    h.hi = range->second;
  } else {
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    h.lo = *mn;
    h.hi = *mx;
    if (h.lo == h.hi) {
      h.lo -= 0.5;
      h.hi += 0.5;
    }
  }
  h.counts.assign(bins, 0);
  const auto last = static_cast<std::ptrdiff_t>(bins) - 1;
  for (double v : values) {
    auto b = static_cast<std::ptrdiff_t>(
        std::floor((v - h.lo) / (h.hi - h.lo) * static_cast<double>(bins)));
    b = std::clamp<std::ptrdiff_t>(b, 0, last);
    // The scaled estimate can be off by one right at an edge; settle it
    // against the edges themselves.
    while (b > 0 && v < h.edge(static_cast<std::size_t>(b))) --b;
    while (b < last && v >= h.edge(static_cast<std::size_t>(b + 1))) ++b;
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

struct SnapshotSeries {
  std::vector<WeightTensor> snapshots;
  std::vector<std::int64_t> labels;

  void validate() const {
    if (snapshots.empty()) fail(ErrorCode::EmptyTensor, "snapshot series is empty");
    require_same_length(snapshots.size(), labels.size());
    for (std::size_t i = 0; i < snapshots.size(); ++i) {
      require_nonempty(snapshots[i].view());
      require_same_length(snapshots[i].size(), snapshots[0].size());
      if (i > 0 && labels[i] <= labels[i - 1]) fail(ErrorCode::BadConfig, "snapshot labels must increase");
    }
  }
};

inline std::vector<double> variance_trend(const SnapshotSeries& s) {
  s.validate();
  std::vector<double> out;
  out.reserve(s.snapshots.size());
  for (const auto& w : s.snapshots) {
    const double sigma = compute_stats(w).sigma;
    out.push_back(sigma * sigma);
  }
  return out;
}

/// Shared uniform bins over the union range of each adjacent pair.
struct HistogramEvents {
  std::size_t bins = 64;
};

/// Index distribution under one fixed codebook.
struct CodebookEvents {
  Codebook codebook;
};

using EventSpace = std::variant<HistogramEvents, CodebookEvents>;

/// Entry k is KL(dist(snapshot k+1) || dist(snapshot k)), smoothed.
inline std::vector<double> epoch_kld_trend(const SnapshotSeries& s, const EventSpace& space = HistogramEvents{}) {
  s.validate();
  if (s.snapshots.size() < 2) fail(ErrorCode::BadConfig, "KLD trend needs at least two snapshots");
  std::vector<double> out;
  for (std::size_t k = 0; k + 1 < s.snapshots.size(); ++k) {
    const auto& prev = s.snapshots[k];
    const auto& cur = s.snapshots[k + 1];
    if (const auto* hist = std::get_if<HistogramEvents>(&space)) {
      const auto [pmin, pmax] = std::minmax_element(prev.values.begin(), prev.values.end());
      const auto [cmin, cmax] = std::minmax_element(cur.values.begin(), cur.values.end());
      double lo = std::min(*pmin, *cmin);
      double hi = std::max(*pmax, *cmax);
      if (lo == hi) {
        lo -= 0.5;
        hi += 0.5;
      }
      const auto p_cur = histogram(cur.view(), hist->bins, std::pair{lo, hi}).probabilities();
      const auto p_prev = histogram(prev.view(), hist->bins, std::pair{lo, hi}).probabilities();
      out.push_back(kl_divergence(p_cur, p_prev));
    } else {
      const auto& cb = std::get<CodebookEvents>(space).codebook;
      out.push_back(kl_divergence(index_distribution(cur, cb), index_distribution(prev, cb)));
    }
  }
  return out;
}

struct OutlierStats {
  std::size_t count = 0;
  double fraction = 0.0;
};

/// Elements farther than k standard deviations from the mean.
inline OutlierStats outlier_stats(const WeightTensor& w, double k) {
  const NormStats s = compute_stats(w);
  require_nondegenerate(s);
  if (k < 0.0) fail(ErrorCode::BadConfig, "outlier multiplier must be >= 0");
  OutlierStats o;
  for (double v : w.values) o.count += std::abs(v - s.mu) > k * s.sigma;
  o.fraction = static_cast<double>(o.count) / static_cast<double>(w.size());
  return o;
}

}  // namespace qprompt
