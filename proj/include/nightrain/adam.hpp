#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "nightrain/tensor.hpp"

namespace nightrain {

struct AdamConfig {
  float lr = 0.0002f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// Adam moments for an ordered parameter list. Buffers are created lazily on
/// the first step and must keep matching the parameters afterwards.
struct AdamState {
  AdamConfig config;
  std::uint64_t step_count = 0;
  std::vector<std::vector<float>> first_moment;
  std::vector<std::vector<float>> second_moment;

  AdamState() = default;
  explicit AdamState(AdamConfig cfg) : config(cfg) {}
};

namespace detail {

inline void adam_update(std::span<float> param, std::span<const float> grad, std::vector<float>& m,
                        std::vector<float>& v, const AdamConfig& c, double bias1, double bias2) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    const float g = grad.empty() ? 0.0f : grad[i];
    m[i] = c.beta1 * m[i] + (1.0f - c.beta1) * g;
    v[i] = c.beta2 * v[i] + (1.0f - c.beta2) * g * g;
    const double m_hat = m[i] / bias1;
    const double v_hat = v[i] / bias2;
    param[i] = static_cast<float>(param[i] - c.lr * m_hat / (std::sqrt(v_hat) + c.eps));
  }
}

}  // namespace detail

/// One bias-corrected Adam step over raw parameter/gradient buffers.
inline void adam_step(std::vector<std::span<float>> params, std::vector<std::span<const float>> grads,
                      AdamState& state) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: parameter and gradient counts differ");
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0f);
      state.second_moment.emplace_back(p.size(), 0.0f);
    }
  }
  if (state.first_moment.size() != params.size()) throw DimensionError("adam_step: state has a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i].size() || state.second_moment[i].size() != params[i].size())
      throw DimensionError("adam_step: moment buffer " + std::to_string(i) + " does not match its parameter");
    if (!grads[i].empty() && grads[i].size() != params[i].size())
      throw DimensionError("adam_step: gradient " + std::to_string(i) + " does not match its parameter");
  }
  ++state.step_count;
  const auto t = static_cast<double>(state.step_count);
  const double bias1 = 1.0 - std::pow(static_cast<double>(state.config.beta1), t);
  const double bias2 = 1.0 - std::pow(static_cast<double>(state.config.beta2), t);
  for (std::size_t i = 0; i < params.size(); ++i)
    detail::adam_update(params[i], grads[i], state.first_moment[i], state.second_moment[i], state.config, bias1, bias2);
}

/// Steps every tensor in `params` using its accumulated grad.
inline void adam_step(std::vector<Tensor*> const& params, AdamState& state) {
  std::vector<std::span<float>> p;
  std::vector<std::span<const float>> g;
  for (Tensor* t : params) {
    p.push_back(t->data());
    g.push_back(t->has_grad() ? t->grad() : std::span<const float>{});
  }
  adam_step(std::move(p), std::move(g), state);
}

}  // namespace nightrain
