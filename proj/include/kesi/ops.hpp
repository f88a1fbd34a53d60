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

#include <cstddef>
#include <span>

#include "kesi/tensor.hpp"

// Differentiable tensor operations. Every op takes the tape it records on;
// pass a non-recording tape (or inputs without requires_grad) for pure
// inference. Broadcasting is limited to scalar-tensor and per-channel forms.
namespace kesi {

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);

Tensor relu(Tape& tape, const Tensor& x);
// Throws DomainError on non-positive entries.
Tensor log(Tape& tape, const Tensor& x);
Tensor exp(Tape& tape, const Tensor& x);
// max(x, floor); gradient is zero where the floor is active.
Tensor clamp_min(Tape& tape, const Tensor& x, double floor);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

// [M x K] * [K x N]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
// x [N x in], weight [out x in], bias [out] -> x * weight^T + bias
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias);

// Direct cross-correlation. input [N x C x H x W], kernel [F x C x k x k].
// (H + 2*padding - k) must be divisible by stride.
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, std::size_t stride,
              std::size_t padding);

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

// Per-channel normalization of [N x C] or [N x C x H x W] input. In training
// mode batch statistics are used and the running buffers are updated in
// place (unbiased variance); in eval mode the running buffers are used.
Tensor batch_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, const BatchNormOptions& opts);

// [N x C x H x W] -> [N x C]
Tensor global_avg_pool(Tape& tape, const Tensor& x);
// [N x ...] -> [N x prod(...)]
Tensor flatten(Tape& tape, const Tensor& x);

// Row-wise softmax of logits / tau over the last axis.
Tensor softmax(Tape& tape, const Tensor& logits, double tau = 1.0);
Tensor log_softmax(Tape& tape, const Tensor& logits, double tau = 1.0);

// [N x M], index per row -> [N] with out[n] = x[n, index[n]].
Tensor pick(Tape& tape, const Tensor& x, std::span<const int> index);

}  // namespace kesi
