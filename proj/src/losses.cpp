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

#include "kesi/losses.hpp"

#include <cmath>

#include "kesi/errors.hpp"
#include "kesi/ops.hpp"

namespace kesi {

namespace {

void require_tau(double tau) {
  if (!(tau > 0.0)) {
    throw ParameterError("distillation temperature must be positive, got " + std::to_string(tau));
  }
}

void require_matching(const Tensor& logits, const ProbBatch& teacher) {
  if (logits.rank() != 2 || logits.shape() != teacher.probs().shape()) {
    throw ShapeError("student logits " + to_string(logits.shape()) +
                     " do not match teacher probabilities " + to_string(teacher.probs().shape()));
  }
}

// Sum over rows and classes of q * (log q - log p), as a scalar on the tape.
// q = 0 entries are skipped by giving them zero weight and a zero log q.
Tensor kl_sum(Tape& tape, const Tensor& log_p, const ProbBatch& teacher) {
  const Tensor& q = teacher.probs();
  Tensor log_q = Tensor::zeros(q.shape());
  for (std::size_t i = 0; i < q.size(); ++i) log_q[i] = q[i] > 0.0 ? std::log(q[i]) : 0.0;
  return sum(tape, mul(tape, q, sub(tape, log_q, log_p)));
}

Tensor floored_log_probs(Tape& tape, const Tensor& logits, double tau) {
  return clamp_min(tape, log_softmax(tape, logits, tau), std::log(kProbFloor));
}

}  // namespace

LabelBatch::LabelBatch(std::vector<int> labels, std::size_t num_classes)
    : labels_(std::move(labels)), num_classes_(num_classes) {
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] < 0 || static_cast<std::size_t>(labels_[i]) >= num_classes_) {
      throw ParameterError("label " + std::to_string(labels_[i]) + " at position " +
                           std::to_string(i) + " is outside [0, " + std::to_string(num_classes_) +
                           ")");
    }
  }
}

Tensor LabelBatch::one_hot() const {
  Tensor t = Tensor::zeros({labels_.size(), num_classes_});
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    t[i * num_classes_ + static_cast<std::size_t>(labels_[i])] = 1.0;
  }
  return t;
}

ProbBatch::ProbBatch(Tensor probs) : probs_(std::move(probs)) {
  if (probs_.rank() != 2 || probs_.empty()) {
    throw ShapeError("probabilities must be a non-empty [N x M] tensor, got " +
                     to_string(probs_.shape()));
  }
  const std::size_t m = probs_.dim(1);
  for (std::size_t r = 0; r < probs_.dim(0); ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double v = probs_[r * m + j];
      if (!(v >= 0.0 && v <= 1.0)) {
        throw ParameterError("probability " + std::to_string(v) + " outside [0, 1] in row " +
                             std::to_string(r));
      }
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw ParameterError("probability row " + std::to_string(r) + " sums to " +
                           std::to_string(total));
    }
  }
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, const LabelBatch& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (logits.dim(1) != labels.num_classes()) {
    throw ShapeError("cross_entropy: logits have " + std::to_string(logits.dim(1)) +
                     " classes, labels " + std::to_string(labels.num_classes()));
  }
  const Tensor picked = pick(tape, log_softmax(tape, logits, 1.0), labels.labels());
  return scale(tape, sum(tape, picked), -1.0 / static_cast<double>(labels.size()));
}

Tensor kd_loss_single(Tape& tape, const Tensor& student_logits, const ProbBatch& teacher,
                      double tau) {
  require_tau(tau);
  require_matching(student_logits, teacher);
  const Tensor log_p = floored_log_probs(tape, student_logits, tau);
  const double n = static_cast<double>(teacher.rows());
  return scale(tape, kl_sum(tape, log_p, teacher), tau * tau / n);
}

ProbBatch ensemble_average_probs(std::span<const ProbBatch> teachers) {
  if (teachers.empty()) throw ParameterError("ensemble average needs at least one teacher");
  const Shape& shape = teachers.front().probs().shape();
  Tensor avg = Tensor::zeros(shape);
  for (const auto& t : teachers) {
    if (t.probs().shape() != shape) {
      throw ShapeError("teacher probabilities differ in shape: " + to_string(t.probs().shape()) +
                       " vs " + to_string(shape));
    }
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += t.probs()[i];
  }
  const double k = static_cast<double>(teachers.size());
  for (auto& v : avg.data()) v /= k;
  return ProbBatch(std::move(avg));
}

Tensor kd_loss_mean_kl(Tape& tape, const Tensor& student_logits,
                       std::span<const ProbBatch> teachers, double tau) {
  require_tau(tau);
  if (teachers.empty()) throw ParameterError("mean-KL distillation needs at least one teacher");
  for (const auto& t : teachers) require_matching(student_logits, t);
  const Tensor log_p = floored_log_probs(tape, student_logits, tau);
  Tensor total = kl_sum(tape, log_p, teachers.front());
  for (std::size_t k = 1; k < teachers.size(); ++k) {
    total = add(tape, total, kl_sum(tape, log_p, teachers[k]));
  }
  const double n = static_cast<double>(teachers.front().rows());
  const double k = static_cast<double>(teachers.size());
  return scale(tape, total, tau * tau / (k * n));
}

}  // namespace kesi
