#pragma once

// Synthetic prompt-tuning testbed.
//
// A frozen "text encoder" maps a shared tunable prompt P and a fixed class
// embedding e_c to a class feature
//
//   f_c = normalize(mix * [P . g_c; e_c])            (linear encoder)
//   f_c = normalize(tanh(mix * [P . g_c; e_c]))      (tanh encoder)
//
// where g_c is a fixed per-class elementwise gate, so a single prompt can
// move each class feature differently. An image x is classified by a softmax over cosine similarities divided
// by a temperature. Image class directions are the encoder's output at a
// hidden reference prompt plus a class-specific shift, so a prompt fitted on
// the base classes learns something shared with the new classes (the
// reference prompt) and something that is not (the shifts).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qprompt/analyzer.hpp"
#include "qprompt/error.hpp"
#include "qprompt/quantizer.hpp"
#include "qprompt/random.hpp"
#include "qprompt/scheduler.hpp"
#include "qprompt/ste.hpp"
#include "qprompt/tensor.hpp"

namespace qprompt::harness {

using Vec = std::vector<double>;

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline Vec normalized(std::span<const double> a) {
  const double n = norm(a);
  if (!(n > 0.0)) fail(ErrorCode::ZeroNorm, "cannot normalize a zero vector");
  Vec out(a.begin(), a.end());
  for (double& v : out) v /= n;
  return out;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a), nb = norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) fail(ErrorCode::ZeroNorm, "cosine similarity of a zero vector");
  return dot(a, b) / (na * nb);
}

/// p(y | f_v) = softmax_y(cos(f_v, f_y) / tau).
inline Vec predict(std::span<const double> f_v, const std::vector<Vec>& class_feats, double tau) {
  if (!(tau > 0.0)) fail(ErrorCode::BadConfig, "temperature must be positive");
  if (class_feats.empty()) fail(ErrorCode::BadConfig, "no classes to predict");
  Vec logits(class_feats.size());
  for (std::size_t c = 0; c < class_feats.size(); ++c) {
    require_same_length(class_feats[c].size(), f_v.size());
    logits[c] = cosine(f_v, class_feats[c]) / tau;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& l : logits) z += (l = std::exp(l - mx));
  for (double& l : logits) l /= z;
  return logits;
}

inline double harmonic_mean(double base, double novel) {
  if (!(base > 0.0) || !(novel > 0.0)) {
    fail(ErrorCode::NonPositive, "harmonic mean needs positive inputs");
  }
  return 2.0 * base * novel / (base + novel);
}

enum class Encoder { Linear, Tanh };

struct TaskConfig {
  std::size_t dim = 64;
  std::size_t n_base = 16;
  std::size_t n_new = 16;
  std::size_t prompt_len = 256;
  std::size_t embed_dim = 64;
  std::size_t samples_per_class = 32;
  std::size_t test_per_class = 64;
  double sample_noise = 1.5;
  /// Weight of the class-specific shift mixed into each image direction.
  double class_shift = 1.0;
  /// Std of the hidden reference prompt's entries.
  double prompt_scale = 0.02;
  /// Std of the prompt's contribution to each encoder pre-activation, relative
  /// to the class embedding's (which is 1).
  double prompt_weight = 0.1;
  /// Std of the initial prompt's offset from the reference, in units of
  /// prompt_scale.
  double init_offset = 0.5;
  /// Std of the class-specific part of the prompt gates; 0 makes the prompt a
  /// purely shared offset.
  double gate_spread = 2.0;
  Encoder encoder = Encoder::Tanh;
  std::uint64_t seed = 0;

  bool operator==(const TaskConfig&) const = default;
};

struct Sample {
  Vec x;  // unit norm
  std::size_t label = 0;

  bool operator==(const Sample&) const = default;
};

struct ToyTask {
  TaskConfig config;
  /// Frozen encoder weights, dim x (prompt_len + embed_dim), row major.
  Vec mix;
  std::vector<Vec> class_embeddings;
  /// Per-class elementwise gates applied to the prompt before mixing.
  std::vector<Vec> class_gates;
  /// Unit image directions; base classes first, then new classes.
  std::vector<Vec> class_dirs;
  Vec initial_prompt;
  std::vector<Sample> train;     // base classes only
  std::vector<Sample> test_base;  // labels in [0, n_base)
  std::vector<Sample> test_new;   // labels in [0, n_new), offset by n_base in class_dirs

  std::size_t n_classes() const { return config.n_base + config.n_new; }
  bool operator==(const ToyTask&) const = default;
};


namespace detail {

/// Pre-activation mix * [P .* g_c; e_c] for one class.
inline Vec encoder_input(const ToyTask& t, std::span<const double> prompt, std::size_t cls) {
  const std::size_t in = t.config.prompt_len + t.config.embed_dim;
  Vec a(t.config.dim, 0.0);
  const auto& e = t.class_embeddings[cls];
  const auto& g = t.class_gates[cls];
  Vec gated(t.config.prompt_len);
  for (std::size_t j = 0; j < gated.size(); ++j) gated[j] = prompt[j] * g[j];
  for (std::size_t r = 0; r < t.config.dim; ++r) {
    const double* row = &t.mix[r * in];
    double s = 0.0;
    for (std::size_t j = 0; j < t.config.prompt_len; ++j) s += row[j] * gated[j];
    for (std::size_t j = 0; j < t.config.embed_dim; ++j) s += row[t.config.prompt_len + j] * e[j];
    a[r] = s;
  }
  return a;
}

inline Vec activate(const ToyTask& t, Vec a) {
  if (t.config.encoder == Encoder::Tanh) {
    for (double& v : a) v = std::tanh(v);
  }
  return a;
}

}  // namespace detail

/// Unnormalized encoder output for class `cls`.
inline Vec class_hidden(const ToyTask& t, std::span<const double> prompt, std::size_t cls) {
  return detail::activate(t, detail::encoder_input(t, prompt, cls));
}

inline std::vector<Vec> class_features(const ToyTask& t, std::span<const double> prompt,
                                       std::size_t first, std::size_t count) {
  std::vector<Vec> out;
  out.reserve(count);
  for (std::size_t c = first; c < first + count; ++c) out.push_back(normalized(class_hidden(t, prompt, c)));
  return out;
}

inline ToyTask build_task(const TaskConfig& cfg) {
  if (cfg.dim < 8) fail(ErrorCode::BadConfig, "feature dimension must be at least 8");
  if (cfg.n_base < 2 || cfg.n_new < 2) fail(ErrorCode::BadConfig, "need at least two base and two new classes");
  if (cfg.prompt_len == 0 || cfg.embed_dim == 0 || cfg.samples_per_class == 0 || cfg.test_per_class == 0) {
    fail(ErrorCode::BadConfig, "sizes must be positive");
  }
  if (cfg.sample_noise < 0.0 || cfg.class_shift < 0.0 || !(cfg.prompt_scale > 0.0) || cfg.prompt_weight < 0.0 ||
      cfg.init_offset < 0.0) {
    fail(ErrorCode::BadConfig, "scales must be non-negative and prompt_scale positive");
  }

  ToyTask t;
  t.config = cfg;
  Rng rng(cfg.seed);
  const std::size_t in = cfg.prompt_len + cfg.embed_dim;
  const double prompt_col = cfg.prompt_weight / (cfg.prompt_scale * std::sqrt(static_cast<double>(cfg.prompt_len)));
  const double embed_col = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
  t.mix.resize(cfg.dim * in);
  for (std::size_t r = 0; r < cfg.dim; ++r) {
    for (std::size_t j = 0; j < in; ++j) {
      t.mix[r * in + j] = (j < cfg.prompt_len ? prompt_col : embed_col) * rng.gaussian();
    }
  }

  Vec reference(cfg.prompt_len);
  for (double& v : reference) v = cfg.prompt_scale * rng.gaussian();
  t.initial_prompt = reference;
  for (double& v : t.initial_prompt) v += cfg.init_offset * cfg.prompt_scale * rng.gaussian();

  // Class directions: encoder output at the reference prompt plus a
  // class-specific shift, resampled until pairwise |cos| < 0.9.
  const std::size_t n = t.n_classes();
  for (std::size_t c = 0; c < n; ++c) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000) fail(ErrorCode::BadConfig, "could not draw well separated class directions");
      Vec e(cfg.embed_dim);
      for (double& v : e) v = rng.gaussian();
      Vec g(cfg.prompt_len);
      for (double& v : g) v = 1.0 + cfg.gate_spread * rng.gaussian();
      t.class_embeddings.push_back(e);
      t.class_gates.push_back(g);
      Vec dir = normalized(class_hidden(t, reference, c));
      Vec shift(cfg.dim);
      for (double& v : shift) v = rng.gaussian();
      shift = normalized(shift);
      for (std::size_t i = 0; i < cfg.dim; ++i) dir[i] += cfg.class_shift * shift[i];
      dir = normalized(dir);
      bool separated = true;
      for (const auto& other : t.class_dirs) separated &= std::abs(dot(dir, other)) < 0.9;
      if (separated) {
        t.class_dirs.push_back(std::move(dir));
        break;
      }
      t.class_embeddings.pop_back();
      t.class_gates.pop_back();
    }
  }

  auto draw = [&](std::size_t cls, std::size_t label) {
    Vec x = t.class_dirs[cls];
    const double s = cfg.sample_noise / std::sqrt(static_cast<double>(cfg.dim));
    for (double& v : x) v += s * rng.gaussian();
    return Sample{normalized(x), label};
  };
  for (std::size_t c = 0; c < cfg.n_base; ++c) {
    for (std::size_t i = 0; i < cfg.samples_per_class; ++i) t.train.push_back(draw(c, c));
  }
  for (std::size_t c = 0; c < cfg.n_base; ++c) {
    for (std::size_t i = 0; i < cfg.test_per_class; ++i) t.test_base.push_back(draw(c, c));
  }
  for (std::size_t c = 0; c < cfg.n_new; ++c) {
    for (std::size_t i = 0; i < cfg.test_per_class; ++i) t.test_new.push_back(draw(cfg.n_base + c, c));
  }
  return t;
}

/// Top-1 accuracy of `samples` against classes [first, first + count).
inline double accuracy(const ToyTask& t, std::span<const double> prompt, const std::vector<Sample>& samples,
                       std::size_t first, std::size_t count) {
  const auto feats = class_features(t, prompt, first, count);
  std::size_t correct = 0;
  for (const auto& s : samples) {
    std::size_t best = 0;
    double best_sim = -2.0;
    for (std::size_t c = 0; c < count; ++c) {
      const double sim = dot(s.x, feats[c]);
      if (sim > best_sim) {
        best_sim = sim;
        best = c;
      }
    }
    correct += best == s.label;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

/// Mean cross-entropy over `batch` (base classes) and its gradient with
/// respect to the prompt.
inline double loss_and_grad(const ToyTask& t, std::span<const double> prompt, std::span<const Sample* const> batch,
                            double tau, Vec& grad) {
  const auto& cfg = t.config;
  const std::size_t k = cfg.n_base;
  std::vector<Vec> pre(k), hidden(k), feats(k);
  Vec hnorm(k);
  for (std::size_t c = 0; c < k; ++c) {
    pre[c] = detail::encoder_input(t, prompt, c);
    hidden[c] = detail::activate(t, pre[c]);
    hnorm[c] = norm(hidden[c]);
    if (!(hnorm[c] > 0.0)) fail(ErrorCode::ZeroNorm, "class feature vanished");
    feats[c] = hidden[c];
    for (double& v : feats[c]) v /= hnorm[c];
  }

  // dL/df_c accumulated over the batch.
  std::vector<Vec> g_feat(k, Vec(cfg.dim, 0.0));
  double loss = 0.0;
  Vec logits(k);
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const Sample* s : batch) {
    for (std::size_t c = 0; c < k; ++c) logits[c] = dot(s->x, feats[c]) / tau;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double& l : logits) z += (l = std::exp(l - mx));
    loss -= std::log(logits[s->label] / z) * inv_b;
    for (std::size_t c = 0; c < k; ++c) {
      const double coeff = (logits[c] / z - (c == s->label ? 1.0 : 0.0)) * inv_b / tau;
      for (std::size_t i = 0; i < cfg.dim; ++i) g_feat[c][i] += coeff * s->x[i];
    }
  }

  grad.assign(cfg.prompt_len, 0.0);
  const std::size_t in = cfg.prompt_len + cfg.embed_dim;
  for (std::size_t c = 0; c < k; ++c) {
    // Through the normalization, then the activation.
    const double proj = dot(feats[c], g_feat[c]);
    for (std::size_t r = 0; r < cfg.dim; ++r) {
      double g = (g_feat[c][r] - feats[c][r] * proj) / hnorm[c];
      if (cfg.encoder == Encoder::Tanh) g *= 1.0 - hidden[c][r] * hidden[c][r];
      const double* row = &t.mix[r * in];
      for (std::size_t j = 0; j < cfg.prompt_len; ++j) grad[j] += g * row[j] * t.class_gates[c][j];
    }
  }
  return loss;
}

enum class Mode { Baseline, Noise, QAT, PTQ };

constexpr std::string_view mode_name(Mode m) {
  switch (m) {
    case Mode::Baseline: return "baseline";
    case Mode::Noise: return "noise";
    case Mode::QAT: return "qat";
    case Mode::PTQ: return "ptq";
  }
  return "unknown";
}

inline Mode parse_mode(std::string_view s) {
  if (s == "baseline") return Mode::Baseline;
  if (s == "noise") return Mode::Noise;
  if (s == "qat") return Mode::QAT;
  if (s == "ptq") return Mode::PTQ;
  fail(ErrorCode::BadConfig, "unknown mode '" + std::string(s) + "'");
}

struct MethodConfig {
  Mode mode = Mode::Baseline;
  int bits = 1;
  double noise_std = 0.0;
  bool noise_per_step = true;
  std::size_t epochs = 50;
  double lr = 0.003;
  std::size_t batch = 32;
  std::size_t warmup_epochs = 1;
  double tau = 0.05;
  std::uint64_t seed = 0;
  SchedulerConfig scheduler{};
};

struct EpochRecord {
  std::size_t epoch = 0;
  double base_acc = 0.0;
  double new_acc = 0.0;
  double h_mean = 0.0;
  double train_loss = 0.0;
  /// Raw-space quantization error of the evaluated prompt (quantized modes).
  double quant_error = 0.0;
  /// KL between histograms of this epoch's prompt and the previous one.
  double kld = 0.0;
  double variance = 0.0;
};

struct TrainReport {
  MethodConfig method;
  /// Epoch 0 is the untrained prompt.
  std::vector<EpochRecord> epochs;
  std::vector<std::size_t> recluster_steps;
  std::optional<Codebook> codebook;
  /// Latent prompt at the end of every epoch, epoch 0 included.
  std::vector<Vec> snapshots;
  /// Prompt used for evaluation at the last epoch.
  Vec final_prompt;

  const EpochRecord& final_epoch() const { return epochs.back(); }
};

inline void validate(const MethodConfig& m) {
  if (!(m.lr > 0.0)) fail(ErrorCode::BadConfig, "learning rate must be positive");
  if (!(m.tau > 0.0)) fail(ErrorCode::BadConfig, "temperature must be positive");
  if (m.batch == 0) fail(ErrorCode::BadConfig, "batch size must be positive");
  if (m.noise_std < 0.0) fail(ErrorCode::BadConfig, "noise std must be >= 0");
  if (m.mode == Mode::QAT || m.mode == Mode::PTQ) require_supported_bits(m.bits);
}

inline TrainReport train(const ToyTask& task, const MethodConfig& m) {
  validate(m);
  const auto& cfg = task.config;
  TrainReport report;
  report.method = m;
  Rng rng(m.seed);
  Rng noise_rng(m.seed ^ 0x9e3779b97f4a7c15ull);

  WeightTensor prompt(task.initial_prompt);
  if (m.mode == Mode::Noise && !m.noise_per_step) prompt = add_gaussian_noise(prompt, m.noise_std, noise_rng);

  const bool qat = m.mode == Mode::QAT;
  std::optional<Codebook> cb;
  std::optional<LatentWeights> lw;
  CACState cac;
  if (qat) {
    SchedulerConfig sc = m.scheduler;
    cb = fit_codebook(prompt, m.bits, sc.kmeans);
    lw.emplace(prompt, *cb);
    cac = init_state(prompt, *cb, sc);
  }

  auto evaluate = [&](std::size_t epoch, double loss) {
    const WeightTensor& latent = qat ? lw->latent() : prompt;
    Vec eval = latent.values;
    double qerr = 0.0;
    if (qat) {
      eval = lw->forward_view().reconstruction;
      qerr = quant_error(latent.view(), eval);
    } else if (m.mode == Mode::PTQ) {
      const Codebook ptq = fit_codebook(latent, m.bits, m.scheduler.kmeans);
      eval = quantize(latent, ptq).reconstruction;
      qerr = quant_error(latent.view(), eval);
      if (epoch == m.epochs) report.codebook = ptq;
    }
    EpochRecord r;
    r.epoch = epoch;
    r.base_acc = accuracy(task, eval, task.test_base, 0, cfg.n_base);
    r.new_acc = accuracy(task, eval, task.test_new, cfg.n_base, cfg.n_new);
    r.h_mean = (r.base_acc > 0.0 && r.new_acc > 0.0) ? harmonic_mean(r.base_acc, r.new_acc) : 0.0;
    r.train_loss = loss;
    r.quant_error = qerr;
    r.variance = compute_stats(latent).sigma * compute_stats(latent).sigma;
    if (!report.snapshots.empty()) {
      SnapshotSeries pair{{WeightTensor(report.snapshots.back()), latent}, {0, 1}};
      r.kld = epoch_kld_trend(pair).front();
    }
    report.snapshots.push_back(latent.values);
    report.epochs.push_back(r);
    if (epoch == m.epochs) report.final_prompt = eval;
  };

  evaluate(0, 0.0);

  std::vector<const Sample*> order;
  for (const auto& s : task.train) order.push_back(&s);
  const std::size_t steps_per_epoch = (order.size() + m.batch - 1) / m.batch;
  const std::size_t warmup_steps = m.warmup_epochs * steps_per_epoch;
  std::size_t global_step = 0;
  Vec grad;

  for (std::size_t epoch = 1; epoch <= m.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t lo = b * m.batch;
      const std::size_t hi = std::min(order.size(), lo + m.batch);
      const std::span<const Sample* const> batch(order.data() + lo, hi - lo);
      const double lr = global_step < warmup_steps
                            ? m.lr * static_cast<double>(global_step + 1) / static_cast<double>(warmup_steps)
                            : m.lr;

      if (qat) {
        qat_step(*lw, *cb, lr, [&](std::span<const double> forward) {
          epoch_loss += loss_and_grad(task, forward, batch, m.tau, grad);
          return grad;
        });
        const SchedulerDecision d = step(cac, lw->latent(), *cb);
        if (d.recluster) {
          lw->refresh(*cb);
          report.recluster_steps.push_back(global_step);
        }
      } else {
        Vec forward = prompt.values;
        if (m.mode == Mode::Noise && m.noise_per_step) {
          forward = add_gaussian_noise(prompt, m.noise_std, noise_rng).values;
        }
        epoch_loss += loss_and_grad(task, forward, batch, m.tau, grad);
        for (std::size_t j = 0; j < grad.size(); ++j) prompt.values[j] -= lr * grad[j];
      }
      ++global_step;
    }
    evaluate(epoch, epoch_loss / static_cast<double>(steps_per_epoch));
  }
  if (qat) report.codebook = cb;
  return report;
}

}  // namespace qprompt::harness
