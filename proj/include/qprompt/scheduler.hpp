#pragma once

// Constrained adaptive clustering: decides during training when the codebook
// is re-fitted. A re-fit needs two things, a minimum number of steps since
// the previous one and a shift in the index distribution, measured as
//
//   KL(p_cur || p_old) = sum_i p_cur(i) * log(p_cur(i) / p_old(i)),
//
// where p_old is the index distribution cached at the last re-fit and p_cur
// is the distribution of the current weights under the same codebook.

#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string_view>
#include <vector>

#include "qprompt/error.hpp"
#include "qprompt/quantizer.hpp"

namespace qprompt {

/// Empirical distribution of indices over k bins.
inline std::vector<double> index_distribution(std::span<const Index> indices, std::size_t k) {
  if (indices.empty()) fail(ErrorCode::EmptyTensor, "no indices to count");
  std::vector<double> p(k, 0.0);
  for (Index i : indices) {
    if (i >= k) fail(ErrorCode::IndexOverflow, "index out of range");
    p[i] += 1.0;
  }
  const double n = static_cast<double>(indices.size());
  for (double& x : p) x /= n;
  return p;
}

inline std::vector<double> index_distribution(const WeightTensor& w, const Codebook& cb) {
  return index_distribution(quantize(w, cb).indices, cb.size());
}

inline void require_distribution(std::span<const double> p) {
  double total = 0.0;
  for (double x : p) {
    if (!(x >= 0.0) || !std::isfinite(x)) fail(ErrorCode::BadConfig, "probabilities must be finite and >= 0");
    total += x;
  }
  if (std::abs(total - 1.0) > 1e-9) fail(ErrorCode::BadConfig, "probabilities must sum to 1");
}

/// Plain KL divergence in nats. Terms with p(i) = 0 contribute 0; a term with
/// p(i) > 0 and q(i) = 0 makes the result +inf.
inline double kl_divergence_exact(std::span<const double> p, std::span<const double> q) {
  require_same_length(p.size(), q.size());
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) return std::numeric_limits<double>::infinity();
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return kl;
}

constexpr double kKlSmoothing = 1e-8;

/// KL divergence after adding `eps` to every entry of both distributions and
/// renormalizing, so empty bins never divide by zero. Always finite.
inline double kl_divergence(std::span<const double> p, std::span<const double> q,
                            double eps = kKlSmoothing) {
  require_same_length(p.size(), q.size());
  require_distribution(p);
  require_distribution(q);
  const double extra = eps * static_cast<double>(p.size());
  const double p_norm = std::accumulate(p.begin(), p.end(), 0.0) + extra;
  const double q_norm = std::accumulate(q.begin(), q.end(), 0.0) + extra;
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double ps = (p[i] + eps) / p_norm;
    const double qs = (q[i] + eps) / q_norm;
    kl += ps * std::log(ps / qs);
  }
  return std::max(kl, 0.0);
}

enum class ErrorSpace { Raw, Normalized };

struct SchedulerConfig {
  /// Minimum number of steps between two re-fits.
  std::size_t t_min = 50;
  /// KL threshold in nats; a re-fit needs KL strictly above it.
  double kl_threshold = 0.01;
  /// Additionally require the quantization error to have grown since the last re-fit.
  bool error_gate = false;
  ErrorSpace error_space = ErrorSpace::Raw;
  KMeansOptions kmeans{};
};

struct CACState {
  std::vector<double> p_old;
  std::size_t steps_since = 0;
  double last_error = 0.0;
  SchedulerConfig config{};
};

enum class Reason { IntervalNotReached, BelowThreshold, ErrorGateBlocked, Triggered };

constexpr std::string_view reason_name(Reason r) {
  switch (r) {
    case Reason::IntervalNotReached: return "IntervalNotReached";
    case Reason::BelowThreshold: return "BelowThreshold";
    case Reason::ErrorGateBlocked: return "ErrorGateBlocked";
    case Reason::Triggered: return "Triggered";
  }
  return "Unknown";
}

struct SchedulerDecision {
  bool recluster = false;
  /// Smoothed KL of the current index distribution against p_old; 0 when the
  /// interval has not elapsed (not evaluated).
  double kl = 0.0;
  /// Quantization error of the current weights under the incoming codebook; 0
  /// when not evaluated.
  double error_now = 0.0;
  Reason reason = Reason::IntervalNotReached;
  /// Clustering objective of the current weights (normalized with their own
  /// statistics) against the old and the re-fitted centers. Set on re-fit only.
  double objective_before = 0.0;
  double objective_after = 0.0;
};

namespace detail {

inline double error_in_space(const WeightTensor& w, const Codebook& cb, ErrorSpace space) {
  const Assignment a = quantize(w, cb);
  const double raw = quant_error(w, a);
  return space == ErrorSpace::Raw ? raw : raw / (cb.stats.sigma * cb.stats.sigma);
}

}  // namespace detail

/// State for a freshly fitted codebook: p_old is the index distribution of the
/// weights the codebook was fitted on.
inline CACState init_state(const WeightTensor& w, const Codebook& cb, SchedulerConfig config = {}) {
  if (config.t_min == 0) fail(ErrorCode::BadConfig, "minimum update interval must be positive");
  if (!(config.kl_threshold > 0.0)) fail(ErrorCode::BadConfig, "KL threshold must be positive");
  CACState s;
  s.p_old = index_distribution(w, cb);
  s.last_error = detail::error_in_space(w, cb, config.error_space);
  s.config = config;
  return s;
}

/// One scheduler tick. On a trigger the codebook is re-fitted in place,
/// warm-started from its current centers, and the cached state is reset.
inline SchedulerDecision step(CACState& state, const WeightTensor& w, Codebook& cb) {
  SchedulerDecision d;
  if (state.steps_since < state.config.t_min) {
    ++state.steps_since;
    d.reason = Reason::IntervalNotReached;
    return d;
  }

  d.kl = kl_divergence(index_distribution(w, cb), state.p_old);
  d.error_now = detail::error_in_space(w, cb, state.config.error_space);
  if (d.kl <= state.config.kl_threshold) {
    ++state.steps_since;
    d.reason = Reason::BelowThreshold;
    return d;
  }
  if (state.config.error_gate && d.error_now <= state.last_error) {
    ++state.steps_since;
    d.reason = Reason::ErrorGateBlocked;
    return d;
  }

  const NormStats stats = compute_stats(w);
  const auto normalized = normalize(w.view(), stats);
  d.objective_before = clustering_objective(normalized, cb.centers);
  const KMeansResult fit = kmeans_fit(normalized, cb.bits, state.config.kmeans, cb.centers);
  cb = Codebook{cb.bits, fit.centers, stats};
  d.objective_after = fit.objective_trace.back();

  state.p_old = index_distribution(w, cb);
  state.last_error = detail::error_in_space(w, cb, state.config.error_space);
  state.steps_since = 0;
  d.recluster = true;
  d.reason = Reason::Triggered;
  return d;
}

}  // namespace qprompt
