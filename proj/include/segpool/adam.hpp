// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "segpool/error.hpp"
#include "segpool/tensor.hpp"

namespace segpool {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment estimates, one pair per parameter tensor.
struct AdamState {
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static AdamState for_params(std::span<const Tensor> params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.shape());
      s.v.emplace_back(p.shape());
    }
    return s;
  }

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One Adam update with bias correction:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
/// Tensors with `active[i] == false` had no gradient this step; their
/// values and moments are left as they are. An empty `active` means all.
inline void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
                      const AdamConfig& cfg, const std::vector<bool>& active = {}) {
  if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size())
    throw InvalidShape("adam_step: parameter, gradient and moment counts differ");
  if (!active.empty() && active.size() != params.size())
    throw InvalidShape("adam_step: activity mask does not match the parameter count");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].shape() != grads[i].shape() || params[i].shape() != state.m[i].shape() ||
        params[i].shape() != state.v[i].shape())
      throw InvalidShape("adam_step: shape mismatch at parameter " + std::to_string(i));

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!active.empty() && !active[i]) continue;
    auto p = params[i].data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      p[j] -= cfg.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.eps);
    }
  }
}

}  // namespace segpool
