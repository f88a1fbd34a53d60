/* Copyright 2026 The KESI-Desk Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include "kesi/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "kesi/errors.hpp"

namespace kesi {

namespace {

double half_cosine(double from, double to, double progress) {
  return to + (from - to) / 2.0 * (1.0 + std::cos(progress * std::numbers::pi));
}

void require_step(const OneCycleConfig& cfg, std::int64_t step) {
  cfg.validate();
  if (step < 0 || step > cfg.total) {
    throw ParameterError("one-cycle step " + std::to_string(step) + " outside [0, " +
                         std::to_string(cfg.total) + "]");
  }
}

void ensure_buffers(std::vector<std::vector<double>>& buffers, std::span<Parameter> params) {
  if (buffers.empty()) {
    for (const auto& p : params) buffers.emplace_back(p.value.size(), 0.0);
  }
  if (buffers.size() != params.size()) {
    throw ShapeError("optimizer state tracks " + std::to_string(buffers.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (buffers[i].size() != params[i].value.size()) {
      throw ShapeError("optimizer state for '" + params[i].name + "' has the wrong size");
    }
  }
}

// Gradient with pruned entries zeroed; zeros when no gradient was recorded.
std::vector<double> masked_grad(const Parameter& p) {
  std::vector<double> g(p.value.size(), 0.0);
  const auto grad = p.value.grad();
  if (grad.empty()) return g;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      throw NumericError("non-finite gradient in '" + p.name + "' at index " + std::to_string(i));
    }
    if (p.mask.alive(i)) g[i] = grad[i];
  }
  return g;
}

}  // namespace

void OneCycleConfig::validate() const {
  if (!(warmup > 0 && warmup < total)) {
    throw ParameterError("one-cycle needs 0 < T < L, got T=" + std::to_string(warmup) +
                         " L=" + std::to_string(total));
  }
  if (!(eta_min > 0.0 && eta_initial > 0.0 && eta_max > 0.0)) {
    throw ParameterError("one-cycle learning rates must be positive");
  }
  if (!(eta_min <= eta_initial && eta_initial <= eta_max)) {
    throw ParameterError("one-cycle needs eta_min <= eta_initial <= eta_max");
  }
  for (double b : {beta_initial, beta_max}) {
    if (!(b >= 0.0 && b < 1.0)) throw ParameterError("one-cycle momentum must lie in [0, 1)");
  }
}

OneCycleConfig OneCycleConfig::with_warmup_fraction(double eta_initial, double eta_max,
                                                    double eta_min, double beta_initial,
                                                    double beta_max, std::int64_t total,
                                                    double fraction) {
  OneCycleConfig cfg{eta_initial, eta_max, eta_min, beta_initial, beta_max, 1, total};
  cfg.warmup = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(std::floor(fraction * static_cast<double>(total))));
  cfg.validate();
  return cfg;
}

double one_cycle_lr(const OneCycleConfig& cfg, std::int64_t step) {
  require_step(cfg, step);
  if (step <= cfg.warmup) {
    return half_cosine(cfg.eta_initial, cfg.eta_max,
                       static_cast<double>(step) / static_cast<double>(cfg.warmup));
  }
  return half_cosine(cfg.eta_max, cfg.eta_min,
                     static_cast<double>(step - cfg.warmup) /
                         static_cast<double>(cfg.total - cfg.warmup));
}

double one_cycle_momentum(const OneCycleConfig& cfg, std::int64_t step) {
  require_step(cfg, step);
  if (step <= cfg.warmup) {
    return half_cosine(cfg.beta_initial, cfg.beta_max,
                       static_cast<double>(step) / static_cast<double>(cfg.warmup));
  }
  return half_cosine(cfg.beta_max, cfg.beta_initial,
                     static_cast<double>(step - cfg.warmup) /
                         static_cast<double>(cfg.total - cfg.warmup));
}

double step_schedule_lr(double base, std::int64_t epoch, std::int64_t total) {
  if (total <= 0 || epoch < 0 || epoch >= total) {
    throw ParameterError("epoch " + std::to_string(epoch) + " outside [0, " +
                         std::to_string(total) + ")");
  }
  if (2 * epoch < total) return base;
  if (4 * epoch < 3 * total) return base / 10.0;
  return base / 100.0;
}

void sgd_momentum_step(std::span<Parameter> params, OptState& state, const SgdOptions& opts) {
  ensure_buffers(state.velocity, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto g = masked_grad(p);
    auto& v = state.velocity[i];
    auto w = p.value.data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double decay = p.mask.alive(j) ? opts.weight_decay * w[j] : 0.0;
      v[j] = opts.momentum * v[j] + (g[j] + decay);
      w[j] -= opts.lr * v[j];
    }
    p.mask.apply(w);
  }
  ++state.step;
}

void adaptive_moment_step(std::span<Parameter> params, OptState& state, const AdamOptions& opts) {
  ensure_buffers(state.first_moment, params);
  ensure_buffers(state.second_moment, params);
  ++state.step;
  const double c1 = 1.0 - std::pow(opts.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opts.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto g = masked_grad(p);
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    auto w = p.value.data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = opts.beta1 * m[j] + (1.0 - opts.beta1) * g[j];
      v[j] = opts.beta2 * v[j] + (1.0 - opts.beta2) * g[j] * g[j];
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      w[j] -= opts.lr * m_hat / (std::sqrt(v_hat) + opts.eps);
    }
    p.mask.apply(w);
  }
}

}  // namespace kesi
