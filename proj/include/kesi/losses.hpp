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

#include <span>
#include <vector>

#include "kesi/tensor.hpp"

namespace kesi {

// Class indices in [0, num_classes), one per sample.
class LabelBatch {
 public:
  LabelBatch(std::vector<int> labels, std::size_t num_classes);

  std::span<const int> labels() const { return labels_; }
  std::size_t size() const { return labels_.size(); }
  std::size_t num_classes() const { return num_classes_; }
  // [N x M] one-hot rows.
  Tensor one_hot() const;

 private:
  std::vector<int> labels_;
  std::size_t num_classes_;
};

// Row-stochastic [N x M] probabilities (rows sum to 1 within 1e-9).
class ProbBatch {
 public:
  explicit ProbBatch(Tensor probs);

  const Tensor& probs() const { return probs_; }
  std::size_t rows() const { return probs_.dim(0); }
  std::size_t classes() const { return probs_.dim(1); }

 private:
  Tensor probs_;
};

// Probabilities below this are floored before taking logs.
inline constexpr double kProbFloor = 1e-12;

// Mean negative log-likelihood of the labels under softmax(logits).
Tensor cross_entropy(Tape& tape, const Tensor& logits, const LabelBatch& labels);

// tau^2 * mean_n KL(q_n || p_n) with p = softmax(student_logits / tau).
// Teacher probabilities must already be softened at the same tau. Terms
// with q = 0 contribute nothing; only the student receives gradient.
Tensor kd_loss_single(Tape& tape, const Tensor& student_logits, const ProbBatch& teacher,
                      double tau);

// Elementwise mean of K teacher distributions.
ProbBatch ensemble_average_probs(std::span<const ProbBatch> teachers);

// tau^2 / K * sum_k mean_n KL(q^(k)_n || p_n).
Tensor kd_loss_mean_kl(Tape& tape, const Tensor& student_logits,
                       std::span<const ProbBatch> teachers, double tau);

}  // namespace kesi
