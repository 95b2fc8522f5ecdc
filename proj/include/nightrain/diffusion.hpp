#pragma once

// Linear-beta noise schedule, forward noising, the masked noise-estimation
// loss, and the deterministic conditional reverse sampler.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nightrain/clip.hpp"
#include "nightrain/error.hpp"
#include "nightrain/ops.hpp"
#include "nightrain/rng.hpp"
#include "nightrain/tensor.hpp"

namespace nightrain {

/// beta_t, alpha_t = 1 - beta_t and alpha_bar_t = prod_{i<=t} alpha_i.
/// Vectors are indexed by t in [0, T]; index 0 is the clean-data convention
/// (beta_0 = 0, alpha_bar_0 = 1).
struct NoiseSchedule {
  std::size_t steps = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  [[nodiscard]] double alpha_bar(std::size_t t) const {
    if (t > steps) throw UsageError("time step " + std::to_string(t) + " outside [0, " + std::to_string(steps) + "]");
    return alpha_bars[t];
  }
};

inline NoiseSchedule make_schedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps == 0) throw ConfigError("schedule needs at least one diffusion step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("schedule needs 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.steps = steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.betas.assign(steps + 1, 0.0);
  s.alphas.assign(steps + 1, 1.0);
  s.alpha_bars.assign(steps + 1, 1.0);
  for (std::size_t t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    s.betas[t] = beta_start + (beta_end - beta_start) * frac;
    s.alphas[t] = 1.0 - s.betas[t];
    s.alpha_bars[t] = s.alpha_bars[t - 1] * s.alphas[t];
  }
  return s;
}

/// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
template <class T>
BasicTensor<T> forward_noise(const BasicTensor<T>& x0, std::size_t t, const BasicTensor<T>& eps,
                             const NoiseSchedule& sched) {
  if (x0.shape() != eps.shape())
    throw DimensionError("forward_noise: noise shape " + shape_str(eps.shape()) + " differs from " + shape_str(x0.shape()));
  const double ab = sched.alpha_bar(t);
  const T a = static_cast<T>(std::sqrt(ab));
  const T b = static_cast<T>(std::sqrt(1.0 - ab));
  std::vector<T> out(x0.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return BasicTensor<T>(x0.shape(), std::move(out));
}

inline Clip forward_noise(const Clip& x0, std::size_t t, const Clip& eps, const NoiseSchedule& sched) {
  require_same_geometry(x0, eps, "forward_noise");
  return Clip::from_tensor(forward_noise(x0.tensor(), t, eps.tensor(), sched), ClipRole::latent);
}

/// Expands a per-position mask (T, H, W) over the channel axis. An empty
/// mask means every element counts.
template <class T>
std::vector<T> expand_mask(const std::optional<PixelMap>& mask, const ClipGeometry& g) {
  if (!mask) return std::vector<T>(g.size(), T(1));
  if (!mask->matches(g)) throw DimensionError("mask geometry does not match clip " + to_string(g));
  std::vector<T> out(g.size());
  const std::size_t n = g.pixels();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < n; ++i) out[c * n + i] = static_cast<T>(mask->values[i] != 0.0f ? 1 : 0);
  return out;
}

/// Masked noise-estimation loss: mean over selected elements of
/// (eps - net(forward_noise(x0, t, eps), cond, t))^2. `net` is any callable
/// (x_t, cond, t) -> noise estimate. Throws DegeneratePairError for an
/// all-zero mask.
template <class T, class Net>
BasicTensor<T> training_loss(Net&& net, const BasicTensor<T>& x0, const BasicTensor<T>& cond, std::size_t t,
                             const BasicTensor<T>& eps, const std::optional<PixelMap>& mask,
                             const NoiseSchedule& sched) {
  if (x0.rank() != 4 || cond.shape() != x0.shape())
    throw DimensionError("training_loss: condition " + shape_str(cond.shape()) + " does not match target " +
                         shape_str(x0.shape()));
  const ClipGeometry g{x0.dim(0), x0.dim(1), x0.dim(2), x0.dim(3)};
  const auto weights = expand_mask<T>(mask, g);
  const auto x_t = forward_noise(x0, t, eps, sched);
  const BasicTensor<T> pred = net(x_t, cond, t);
  return masked_mse(pred, eps, weights);
}

/// Deterministic update from step t to t_prev (t > t_prev >= 0):
/// x0_hat = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t),
/// x_prev = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev) eps.
inline Clip reverse_step(const Clip& x_t, std::size_t t, std::size_t t_prev, const Clip& eps_pred,
                         const NoiseSchedule& sched) {
  if (t_prev >= t) throw UsageError("reverse_step: t_prev must be below t");
  require_same_geometry(x_t, eps_pred, "reverse_step");
  const double ab = sched.alpha_bar(t);
  const double ab_prev = sched.alpha_bar(t_prev);
  const float s_t = static_cast<float>(std::sqrt(1.0 - ab));
  const float inv_a_t = static_cast<float>(1.0 / std::sqrt(ab));
  const float a_prev = static_cast<float>(std::sqrt(ab_prev));
  const float s_prev = static_cast<float>(std::sqrt(1.0 - ab_prev));
  Clip out(x_t.geometry, ClipRole::latent);
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    const float e = eps_pred.values[i];
    const float x0_hat = (x_t.values[i] - s_t * e) * inv_a_t;
    out.values[i] = a_prev * x0_hat + s_prev * e;
  }
  return out;
}

struct SamplerConfig {
  std::size_t steps = 25;
  std::uint64_t seed = 0;
};

/// Evenly spaced decreasing visit order T = s_0 > s_1 > ... > s_steps = 0.
inline std::vector<std::size_t> step_subsequence(std::size_t steps, std::size_t horizon) {
  if (steps == 0 || steps > horizon)
    throw ConfigError("sampler steps must lie in [1, " + std::to_string(horizon) + "], got " + std::to_string(steps));
  std::vector<std::size_t> seq(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i) seq[i] = (horizon * (steps - i) + steps / 2) / steps;
  seq.front() = horizon;
  seq.back() = 0;
  for (std::size_t i = 1; i < seq.size(); ++i)
    if (seq[i] >= seq[i - 1]) throw ConfigError("sampler subsequence is not strictly decreasing");
  return seq;
}

/// Reverse diffusion from x_T ~ N(0, I) drawn from cfg.seed, conditioned on
/// `cond`. `net` maps (x_t, cond, t) to a noise estimate (tensors). The
/// result is clamped to [-1, 1] after the final step only.
template <class Net>
Clip sample(Net&& net, const Clip& cond, const SamplerConfig& cfg, const NoiseSchedule& sched) {
  NoGradGuard no_grad;
  const auto seq = step_subsequence(cfg.steps, sched.steps);
  CounterRng rng(cfg.seed);
  Clip x = Clip::gaussian(cond.geometry, rng);
  x.role = ClipRole::latent;
  const Tensor cond_t = cond.tensor();
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    const Tensor eps = net(x.tensor(), cond_t, seq[i]);
    Clip eps_clip = Clip::from_tensor(eps, ClipRole::noise);
    require_same_geometry(x, eps_clip, "sample");
    x = reverse_step(x, seq[i], seq[i + 1], eps_clip, sched);
  }
  for (float v : x.values)
    if (!std::isfinite(v)) throw NumericalError("sampler produced non-finite values");
  x.clamp_pixels();
  x.role = ClipRole::pixel;
  return x;
}

}  // namespace nightrain
