#pragma once

// Straight-through estimator. The forward pass sees only the quantized view
// of the latent weights; the backward pass hands the gradient taken with
// respect to the quantized values to the latent weights unchanged.

#include <cstdint>
#include <span>
#include <vector>

#include "qprompt/error.hpp"
#include "qprompt/quantizer.hpp"
#include "qprompt/random.hpp"
#include "qprompt/tensor.hpp"

namespace qprompt {

/// Full-precision weights that are trained, plus the quantized copy that the
/// forward pass reads.
class LatentWeights {
 public:
  LatentWeights(WeightTensor latent, const Codebook& cb)
      : latent_(std::move(latent)), forward_(quantize(latent_, cb)) {}

  const WeightTensor& latent() const noexcept { return latent_; }
  const Assignment& forward_view() const noexcept { return forward_; }

  /// Re-quantizes the latent weights, e.g. after an update or a codebook re-fit.
  void refresh(const Codebook& cb) { forward_ = quantize(latent_, cb); }

  /// latent -= lr * grad, followed by refresh.
  void apply_gradient(std::span<const double> grad_latent, double lr, const Codebook& cb) {
    require_same_length(grad_latent.size(), latent_.size());
    for (std::size_t i = 0; i < grad_latent.size(); ++i) latent_.values[i] -= lr * grad_latent[i];
    refresh(cb);
  }

 private:
  WeightTensor latent_;
  Assignment forward_;
};

inline WeightTensor ste_forward(const LatentWeights& lw, const Codebook& cb) {
  return WeightTensor(quantize(lw.latent(), cb).reconstruction, lw.latent().shape);
}

/// Identity pass-through; the only check is the length.
inline std::vector<double> ste_backward(std::span<const double> grad_wrt_quantized,
                                        std::size_t latent_size) {
  require_same_length(grad_wrt_quantized.size(), latent_size);
  return {grad_wrt_quantized.begin(), grad_wrt_quantized.end()};
}

/// One quantization-aware update. `grad_fn` receives the quantized weights and
/// returns dL/dW_q; the latent weights never reach it.
template <typename GradFn>
void qat_step(LatentWeights& lw, const Codebook& cb, double lr, GradFn&& grad_fn) {
  const std::vector<double> g = grad_fn(std::span<const double>(lw.forward_view().reconstruction));
  lw.apply_gradient(ste_backward(g, lw.latent().size()), lr, cb);
}

struct NoiseConfig {
  double std = 0.0;
  std::uint64_t seed = 0;
  /// Draw fresh noise every optimization step; otherwise once at start.
  bool per_step = true;
};

/// w + eps with eps ~ N(0, std^2) i.i.d., drawn from `rng`.
inline WeightTensor add_gaussian_noise(const WeightTensor& w, double std, Rng& rng) {
  if (std < 0.0) fail(ErrorCode::BadConfig, "noise std must be >= 0");
  WeightTensor out = w;
  if (std == 0.0) return out;
  for (double& v : out.values) v += std * rng.gaussian();
  return out;
}

inline WeightTensor add_gaussian_noise(const WeightTensor& w, const NoiseConfig& cfg) {
  Rng rng(cfg.seed);
  return add_gaussian_noise(w, cfg.std, rng);
}

}  // namespace qprompt
