#pragma once

// Differentially private SGD building blocks: Poisson lot sampling, per-sample
// gradient collection with augmentation multiplicity, L2 clipping, Gaussian
// privatization, the SGD update, and a parameter EMA for evaluation.
//
// Conventions that matter for privacy and reproducibility:
//   - poisson_sample consumes exactly n Bernoulli draws, so downstream RNG use
//     never depends on the realized lot.
//   - privatize draws its noise before touching any gradient value and divides
//     by the *expected* lot size L = q*n (the realized size would leak).
//   - multiplicity averaging happens strictly before clipping.
//   - flattened gradients follow parameter-registration order.

#include <cassert>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "eqdp/autodiff.hpp"
#include "eqdp/common.hpp"
#include "eqdp/model.hpp"
#include "eqdp/rng.hpp"

namespace eqdp {

/// The four scalars that define one DP-SGD mechanism instance.
struct PrivacyParams {
  double clip_norm = 1.0;         // C > 0
  double noise_multiplier = 0.0;  // sigma >= 0
  double sample_rate = 1.0;       // q in (0, 1]
  double delta = 1e-5;            // in (0, 1)

  void validate() const {
    require(clip_norm > 0.0, "clip_norm must be positive");
    require(noise_multiplier >= 0.0, "noise_multiplier must be non-negative");
    if (!(sample_rate > 0.0) || sample_rate > 1.0)
      throw InvalidRate("sample_rate must lie in (0, 1]");
    require(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1)");
  }
};

/// Mutable optimizer state carried across steps (and into checkpoints).
struct OptState {
  double learning_rate = 0.0;
  int64_t step_count = 0;
};

/// Each index joins the lot independently with probability q; the returned
/// indices are ascending. Exactly n Bernoulli draws are consumed.
inline std::vector<int64_t> poisson_sample(int64_t n, double q, Rng& rng) {
  if (!(q > 0.0) || q > 1.0) throw InvalidRate("sampling rate must lie in (0, 1]");
  require(n >= 0, "poisson_sample: population size must be non-negative");
  std::vector<int64_t> lot;
  for (int64_t i = 0; i < n; ++i)
    if (rng.bernoulli(q)) lot.push_back(i);
  return lot;
}

inline double l2_norm(const double* v, int64_t n) {
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += v[i] * v[i];
  return std::sqrt(s);
}

/// min(1, C/||g||); a zero vector keeps factor 1 (it is already inside the
/// ball, and 0/0 must not poison the update).
inline double clip_factor(double norm, double clip_norm) {
  require(clip_norm > 0.0, "clip norm must be positive");
  return norm > clip_norm ? clip_norm / norm : 1.0;
}

/// Scales v in place onto the radius-C ball; returns the pre-clip norm.
inline double clip_in_place(double* v, int64_t n, double clip_norm) {
  const double norm = l2_norm(v, n);
  const double f = clip_factor(norm, clip_norm);
  if (f != 1.0)
    for (int64_t i = 0; i < n; ++i) v[i] *= f;
  return norm;
}

/// g * min(1, C/||g||2).
inline std::vector<double> clip_gradient(std::vector<double> g, double clip_norm) {
  clip_in_place(g.data(), int64_t(g.size()), clip_norm);
  return g;
}

/// Row-major (batch, dim) per-sample gradient matrix; row b is the flattened
/// gradient of sample b in parameter-registration order.
struct PerSampleGrads {
  int batch = 0;
  int64_t dim = 0;
  std::vector<double> flat;

  double* row(int b) { return flat.data() + int64_t(b) * dim; }
  const double* row(int b) const { return flat.data() + int64_t(b) * dim; }
};

inline int64_t flat_parameter_size(const std::vector<Parameter<double>*>& params) {
  int64_t n = 0;
  for (const auto* p : params) n += p->size();
  return n;
}

/// Concatenates Parameter::per_sample_grad buffers (as filled by
/// per_sample_gradients) into one (batch, dim) matrix, registration order.
inline PerSampleGrads collect_per_sample(const std::vector<Parameter<double>*>& params) {
  require(!params.empty(), "collect_per_sample: no parameters");
  const int64_t n0 = params.front()->size();
  require(n0 > 0 && params.front()->per_sample_grad.size() % size_t(n0) == 0,
          "per-sample gradient buffer does not tile the parameter");
  const int batch = int(params.front()->per_sample_grad.size() / size_t(n0));
  PerSampleGrads out;
  out.batch = batch;
  out.dim = flat_parameter_size(params);
  out.flat.assign(size_t(int64_t(batch) * out.dim), 0.0);
  int64_t offset = 0;
  for (const auto* p : params) {
    const int64_t n = p->size();
    require(int64_t(p->per_sample_grad.size()) == int64_t(batch) * n,
            "parameter '" + p->name + "' has a mismatched per-sample gradient buffer");
    for (int b = 0; b < batch; ++b)
      std::copy(p->per_sample_grad.begin() + int64_t(b) * n,
                p->per_sample_grad.begin() + int64_t(b + 1) * n,
                out.flat.begin() + int64_t(b) * out.dim + offset);
    offset += n;
  }
  return out;
}

/// Averages groups of k consecutive rows (instance-major layout: the k
/// augmented instances of datum b occupy rows b*k .. b*k+k-1).
inline PerSampleGrads average_groups(const PerSampleGrads& g, int k) {
  require(k >= 1, "group size must be at least 1");
  require(g.batch % k == 0, "batch size is not a multiple of the group size");
  PerSampleGrads out;
  out.batch = g.batch / k;
  out.dim = g.dim;
  out.flat.assign(size_t(int64_t(out.batch) * out.dim), 0.0);
  for (int b = 0; b < out.batch; ++b) {
    double* dst = out.row(b);
    for (int j = 0; j < k; ++j) {
      const double* src = g.row(b * k + j);
      for (int64_t i = 0; i < g.dim; ++i) dst[i] += src[i];
    }
    for (int64_t i = 0; i < g.dim; ++i) dst[i] /= k;
  }
  return out;
}

/// The Gaussian mechanism: (sum_b clip(g_b, C) + N(0, sigma^2 C^2 I)) / L.
///
/// Noise is drawn before any gradient value is read, so the variates consumed
/// here depend only on (dim, sigma) and never on the data; sigma == 0 consumes
/// no randomness at all. Rows are clipped and summed in ascending row order.
/// An empty batch yields the noise-only update. When `clipped_sum_out` is
/// given it receives the pre-noise sum of clipped rows (useful for gradient
/// sparsity traces).
inline std::vector<double> privatize(const PerSampleGrads& grads, double clip_norm,
                                     double noise_multiplier, double expected_lot_size, Rng& rng,
                                     std::vector<double>* clipped_sum_out = nullptr) {
  require(clip_norm > 0.0, "clip norm must be positive");
  require(noise_multiplier >= 0.0, "noise multiplier must be non-negative");
  require(expected_lot_size > 0.0, "expected lot size must be positive");
  std::vector<double> noise;
  if (noise_multiplier > 0.0) {
    noise.resize(size_t(grads.dim));
    const double scale = noise_multiplier * clip_norm;
    for (auto& z : noise) z = scale * rng.normal();
  }
  std::vector<double> sum(size_t(grads.dim), 0.0);
  std::vector<double> scratch(size_t(grads.dim));
  for (int b = 0; b < grads.batch; ++b) {
    std::copy(grads.row(b), grads.row(b) + grads.dim, scratch.begin());
    clip_in_place(scratch.data(), grads.dim, clip_norm);
    assert(l2_norm(scratch.data(), grads.dim) <= clip_norm * (1.0 + 1e-12));
    for (int64_t i = 0; i < grads.dim; ++i) sum[size_t(i)] += scratch[size_t(i)];
  }
  if (clipped_sum_out) *clipped_sum_out = sum;
  std::vector<double> out(size_t(grads.dim));
  if (noise.empty()) {
    for (int64_t i = 0; i < grads.dim; ++i) out[size_t(i)] = sum[size_t(i)] / expected_lot_size;
  } else {
    for (int64_t i = 0; i < grads.dim; ++i)
      out[size_t(i)] = (sum[size_t(i)] + noise[size_t(i)]) / expected_lot_size;
  }
  return out;
}

/// theta <- theta - lr * grad, slicing the flat gradient in registration order.
inline void sgd_step(const std::vector<Parameter<double>*>& params,
                     const std::vector<double>& grad, double learning_rate) {
  require(int64_t(grad.size()) == flat_parameter_size(params),
          "flat gradient length does not match the parameter vector");
  int64_t offset = 0;
  for (auto* p : params) {
    auto& v = *p->value;
    const int64_t n = p->size();
    for (int64_t i = 0; i < n; ++i) v[size_t(i)] -= learning_rate * grad[size_t(offset + i)];
    offset += n;
  }
}

inline std::vector<double> snapshot_parameters(const std::vector<Parameter<double>*>& params) {
  std::vector<double> flat;
  flat.reserve(size_t(flat_parameter_size(params)));
  for (const auto* p : params) flat.insert(flat.end(), p->value->begin(), p->value->end());
  return flat;
}

inline void restore_parameters(const std::vector<Parameter<double>*>& params,
                               const std::vector<double>& flat) {
  require(int64_t(flat.size()) == flat_parameter_size(params),
          "flat snapshot length does not match the parameter vector");
  int64_t offset = 0;
  for (auto* p : params) {
    std::copy(flat.begin() + offset, flat.begin() + offset + p->size(), p->value->begin());
    offset += p->size();
  }
}

/// Exponential moving average of the flat parameter vector. Training updates
/// the live parameters; evaluation reads the shadow.
struct EmaState {
  double decay = 0.999;
  std::vector<double> shadow;

  static EmaState init(const std::vector<Parameter<double>*>& params, double decay) {
    require(decay >= 0.0 && decay < 1.0, "ema decay must lie in [0, 1)");
    return EmaState{decay, snapshot_parameters(params)};
  }

  /// shadow <- decay * shadow + (1 - decay) * params
  void update(const std::vector<Parameter<double>*>& params) {
    require(int64_t(shadow.size()) == flat_parameter_size(params),
            "ema shadow does not match the parameter vector");
    int64_t offset = 0;
    for (const auto* p : params) {
      const auto& v = *p->value;
      for (int64_t i = 0; i < p->size(); ++i) {
        auto& s = shadow[size_t(offset + i)];
        s = decay * s + (1.0 - decay) * v[size_t(i)];
      }
      offset += p->size();
    }
  }

  void write_to(const std::vector<Parameter<double>*>& params) const {
    restore_parameters(params, shadow);
  }
};

/// Per-datum gradients for a lot with augmentation multiplicity k. `instances`
/// holds batch*k images, instance-major (the k augmentations of datum b are
/// rows b*k .. b*k+k-1; row b*k is conventionally the original). Each datum's
/// k instance gradients are averaged -- strictly before any clipping -- and
/// the per-datum mean losses are written to `mean_losses` when given. An
/// empty lot short-circuits to a (0, dim) result.
inline PerSampleGrads lot_gradients_with_multiplicity(
    Model<double>& model, std::vector<double> instances, const std::vector<int>& labels,
    int batch, int k_mult, int channels, int height, int width, PadKind pad,
    std::vector<double>* mean_losses = nullptr) {
  require(k_mult >= 1, "augmentation multiplicity must be at least 1");
  const auto params = model.parameters();
  const int64_t dim = flat_parameter_size(params);
  if (batch == 0) {
    if (mean_losses) mean_losses->clear();
    return PerSampleGrads{0, dim, {}};
  }
  require(int64_t(labels.size()) == batch, "one label per datum expected");
  const int rows = batch * k_mult;
  require(int64_t(instances.size()) == int64_t(rows) * channels * height * width,
          "instance buffer does not match batch * multiplicity images");
  std::vector<int> instance_labels(static_cast<size_t>(rows));
  for (int b = 0; b < batch; ++b)
    for (int j = 0; j < k_mult; ++j) instance_labels[size_t(b * k_mult + j)] = labels[size_t(b)];

  Tape<double> tape;
  Tensor<double> x = constant(tape, {rows, channels, height, width},
                              std::make_shared<std::vector<double>>(std::move(instances)), true);
  Tensor<double> logits = model.forward(tape, x, pad);
  Tensor<double> losses = softmax_cross_entropy(logits, instance_labels);
  per_sample_gradients(tape, losses, params);
  if (mean_losses) {
    mean_losses->assign(size_t(batch), 0.0);
    for (int b = 0; b < batch; ++b) {
      double s = 0.0;
      for (int j = 0; j < k_mult; ++j) s += (*losses.data)[size_t(b * k_mult + j)];
      (*mean_losses)[size_t(b)] = s / k_mult;
    }
  }
  return average_groups(collect_per_sample(params), k_mult);
}

}  // namespace eqdp
