#pragma once

// Adaptive-moment optimizer with bias correction, plus global gradient-norm
// clipping. State lives in flat arrays parallel to the parameter vector.

#include <cmath>
#include <vector>

#include "rllr/common.hpp"
#include "rllr/model.hpp"

namespace rllr {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m, v;
  int64_t step = 0;

  explicit AdamState(size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

inline void adam_step(std::vector<double>& params, const std::vector<double>& grad,
                      AdamState& state, const AdamConfig& cfg) {
  if (grad.size() != params.size())
    throw std::domain_error("adam_step: gradient/parameter shape mismatch");
  if (state.m.empty()) state = AdamState(params.size());
  if (state.m.size() != params.size())
    throw std::domain_error("adam_step: optimizer state shape mismatch");

  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

// Scales grad in place so its L2 norm is at most max_norm; returns the
// pre-clip norm.
inline double clip_grad_norm(std::vector<double>& grad, double max_norm) {
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (double& g : grad) g *= s;
  }
  return norm;
}

}  // namespace rllr
