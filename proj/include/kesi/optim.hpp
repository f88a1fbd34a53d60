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

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kesi/model.hpp"

namespace kesi {

// Warm-up-then-anneal schedule for learning rate and momentum. Both phases
// use half-cosine interpolation; `warmup` (T) and `total` (L) count
// optimizer steps.
struct OneCycleConfig {
  double eta_initial = 0.01;
  double eta_max = 0.1;
  double eta_min = 0.0001;
  double beta_initial = 0.85;
  double beta_max = 0.95;
  std::int64_t warmup = 1;
  std::int64_t total = 10;

  // Throws ParameterError unless 0 < T < L, rates are positive with
  // eta_min <= eta_initial <= eta_max, and momenta lie in [0, 1).
  void validate() const;

  // T = max(1, floor(fraction * L)).
  static OneCycleConfig with_warmup_fraction(double eta_initial, double eta_max, double eta_min,
                                             double beta_initial, double beta_max,
                                             std::int64_t total, double fraction = 0.1);
};

double one_cycle_lr(const OneCycleConfig& cfg, std::int64_t step);
// Rises to beta_max at T, then returns to beta_initial at L.
double one_cycle_momentum(const OneCycleConfig& cfg, std::int64_t step);

// base until 50% of training, base/10 until 75%, base/100 after.
double step_schedule_lr(double base, std::int64_t epoch, std::int64_t total);

// Per-parameter optimizer buffers, index-aligned with the parameter list.
struct OptState {
  std::vector<std::vector<double>> velocity;  // SGD
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::int64_t step = 0;
};

struct SgdOptions {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v.
// Gradients and decay are masked, and the mask is re-applied to the
// parameter after the update, so pruned entries stay exactly zero.
// Throws NumericError naming the parameter on a non-finite gradient.
void sgd_momentum_step(std::span<Parameter> params, OptState& state, const SgdOptions& opts);

// Bias-corrected adaptive-moment update with the same masking contract.
void adaptive_moment_step(std::span<Parameter> params, OptState& state, const AdamOptions& opts);

}  // namespace kesi
