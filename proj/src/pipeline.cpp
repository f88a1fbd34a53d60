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

#include "kesi/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>

#include "kesi/errors.hpp"
#include "kesi/ops.hpp"
#include "kesi/pruning.hpp"

namespace kesi {

namespace {

constexpr std::size_t kEvalBatch = 500;

template <typename E, std::size_t N>
E parse_enum(std::string_view text, const std::array<E, N>& values, const char* what) {
  for (E v : values) {
    if (to_string(v) == text) return v;
  }
  throw ParameterError("unknown " + std::string(what) + " '" + std::string(text) + "'");
}

using LossFn = std::function<Tensor(Tape&, const Tensor& logits,
                                    std::span<const std::size_t> indices, const Tensor& inputs)>;
using StepFn = std::function<void(std::int64_t step, std::int64_t epoch)>;

LossCurve train_loop(ModelSnapshot& model, const Dataset& data, std::int64_t epochs,
                     std::size_t batch_size, const AugmentOptions& augment, std::uint64_t seed,
                     const std::string& stage, const LossFn& loss_fn, const StepFn& step_fn) {
  const std::int64_t steps = steps_per_epoch(data.size(), batch_size);
  if (epochs > 0 && steps == 0) {
    throw ParameterError(stage + " needs at least 2 training samples");
  }
  LossCurve curve;
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < epochs; ++epoch) {
    const auto order = epoch_order(data.size(), seed, stage, static_cast<std::uint64_t>(epoch));
    double total = 0.0;
    for (std::int64_t b = 0; b < steps; ++b) {
      const std::size_t first = static_cast<std::size_t>(b) * batch_size;
      const std::size_t count = std::min(batch_size, data.size() - first);
      const std::span<const std::size_t> indices(order.data() + first, count);
      const Tensor x =
          augmented_batch(data, indices, augment, seed, stage, static_cast<std::uint64_t>(epoch));
      model.zero_grad();
      Tape tape;
      const Tensor logits = forward(tape, model, x, Mode::train);
      const Tensor loss = loss_fn(tape, logits, indices, x);
      if (!std::isfinite(loss.item())) {
        throw RunError(stage + " diverged at epoch " + std::to_string(epoch) + ", step " +
                       std::to_string(step));
      }
      tape.backward(loss);
      step_fn(step, epoch);
      total += loss.item();
      ++step;
    }
    curve.push_back(total / static_cast<double>(steps));
  }
  return curve;
}

LossFn supervised_loss(const Dataset& data) {
  return [&data](Tape& tape, const Tensor& logits, std::span<const std::size_t> indices,
                 const Tensor&) {
    return cross_entropy(tape, logits, LabelBatch(data.batch_labels(indices), data.num_classes));
  };
}

// Softened member probabilities for every sample, [n x M] per member.
std::vector<Tensor> cache_probs(const SnapshotEnsemble& ensemble, const Dataset& data,
                                double tau) {
  std::vector<Tensor> out;
  const std::size_t m = ensemble.num_classes();
  for (const auto& member : ensemble.members()) {
    Tensor probs = Tensor::zeros({data.size(), m});
    for (std::size_t first = 0; first < data.size(); first += kEvalBatch) {
      std::vector<std::size_t> idx(std::min(kEvalBatch, data.size() - first));
      std::iota(idx.begin(), idx.end(), first);
      Tape tape(false);
      const Tensor p = softmax(tape, infer(member, data.batch(idx)), tau);
      std::copy(p.data().begin(), p.data().end(), probs.data().begin() + first * m);
    }
    out.push_back(std::move(probs));
  }
  return out;
}

ProbBatch gather_rows(const Tensor& probs, std::span<const std::size_t> indices) {
  const std::size_t m = probs.dim(1);
  Tensor out = Tensor::zeros({indices.size(), m});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(probs.data().begin() + indices[r] * m, m, out.data().begin() + r * m);
  }
  return ProbBatch(std::move(out));
}

}  // namespace

std::string_view to_string(RetrainSchedule v) {
  return v == RetrainSchedule::fixed_small_lr ? "fixed_small_lr" : "one_cycle";
}
std::string_view to_string(PrunerKind v) {
  return v == PrunerKind::l1_filter ? "l1_filter" : "global_magnitude";
}
std::string_view to_string(DistillObjective v) {
  return v == DistillObjective::mean_kl ? "mean_kl" : "avg_prob_kl";
}
std::string_view to_string(TeacherSet v) {
  switch (v) {
    case TeacherSet::all: return "all";
    case TeacherSet::snapshots_only: return "snapshots_only";
    case TeacherSet::baseline_only: return "baseline_only";
  }
  return "?";
}

RetrainSchedule parse_retrain_schedule(std::string_view text) {
  return parse_enum(text,
                    std::array{RetrainSchedule::fixed_small_lr, RetrainSchedule::one_cycle},
                    "retrain schedule");
}
PrunerKind parse_pruner_kind(std::string_view text) {
  return parse_enum(text, std::array{PrunerKind::l1_filter, PrunerKind::global_magnitude},
                    "pruner");
}
DistillObjective parse_distill_objective(std::string_view text) {
  return parse_enum(text, std::array{DistillObjective::mean_kl, DistillObjective::avg_prob_kl},
                    "distillation objective");
}
TeacherSet parse_teacher_set(std::string_view text) {
  return parse_enum(
      text, std::array{TeacherSet::all, TeacherSet::snapshots_only, TeacherSet::baseline_only},
      "teacher set");
}

void CycleConfig::validate() const {
  if (num_cycles < 0) throw ParameterError("num_cycles must be non-negative");
  if (retrain_epochs < 1) throw ParameterError("retrain_epochs must be at least 1");
  if (train.batch_size < 2) throw ParameterError("batch_size must be at least 2");
  if (!(base_fraction > 0.0 && base_fraction < 1.0) || !(ramp >= 0.0)) {
    throw ParameterError("need 0 < base_fraction < 1 and ramp >= 0");
  }
  if (!(magnitude_fraction >= 0.0 && magnitude_fraction < 1.0)) {
    throw ParameterError("magnitude_fraction must lie in [0, 1)");
  }
  if (!(fixed_lr > 0.0)) throw ParameterError("fixed_lr must be positive");
  OneCycleConfig{eta_initial, eta_max, eta_min, beta_initial, beta_max, 1, 2}.validate();
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw ParameterError("warmup_fraction must lie in (0, 1)");
  }
}

void DistillConfig::validate() const {
  if (!(tau > 0.0)) throw ParameterError("distillation tau must be positive");
  if (epochs < 0) throw ParameterError("distillation epochs must be non-negative");
  if (batch_size < 2) throw ParameterError("batch_size must be at least 2");
  OneCycleConfig{eta_initial, eta_max, eta_min, 0.85, 0.95, 1, 2}.validate();
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw ParameterError("warmup_fraction must lie in (0, 1)");
  }
}

SnapshotEnsemble::SnapshotEnsemble(std::vector<ModelSnapshot> members, double tau)
    : members_(std::move(members)), tau_(tau) {
  if (members_.empty()) throw ParameterError("ensemble needs at least one member");
  if (!(tau_ > 0.0)) throw ParameterError("ensemble tau must be positive");
  for (const auto& m : members_) {
    if (m.num_classes() != members_.front().num_classes()) {
      throw ParameterError("ensemble members disagree on class count: " +
                           std::to_string(m.num_classes()) + " vs " +
                           std::to_string(members_.front().num_classes()));
    }
  }
}

std::int64_t steps_per_epoch(std::size_t samples, std::size_t batch_size) {
  if (batch_size == 0) throw ParameterError("batch_size must be positive");
  const std::size_t full = samples / batch_size;
  const std::size_t rest = samples % batch_size;
  return static_cast<std::int64_t>(full + (rest >= 2 ? 1 : 0));
}

ProbBatch ensemble_predict(const SnapshotEnsemble& ensemble, const Tensor& inputs, double tau) {
  Tape tape(false);
  Tensor total;
  for (const auto& member : ensemble.members()) {
    Tensor p = softmax(tape, infer(member, inputs), tau);
    if (total.empty()) {
      total = std::move(p);
    } else {
      if (p.shape() != total.shape()) {
        throw ParameterError("ensemble member produced " + to_string(p.shape()) + ", expected " +
                             to_string(total.shape()));
      }
      for (std::size_t i = 0; i < total.size(); ++i) total[i] += p[i];
    }
  }
  const double k = static_cast<double>(ensemble.size());
  for (auto& v : total.data()) v /= k;
  return ProbBatch(std::move(total));
}

double top1_accuracy(const Tensor& scores, std::span<const int> labels) {
  if (scores.rank() != 2 || scores.dim(0) != labels.size()) {
    throw ShapeError("scores " + to_string(scores.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ParameterError("accuracy of an empty dataset is undefined");
  const std::size_t m = scores.dim(1);
  std::size_t hits = 0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const auto row = scores.data().subspan(n * m, m);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    if (best == labels[n]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

namespace {

template <typename Scorer>
double evaluate_batched(const Dataset& data, Scorer&& scorer) {
  if (data.size() == 0) throw ParameterError("cannot evaluate on an empty dataset");
  std::size_t hits = 0;
  for (std::size_t first = 0; first < data.size(); first += kEvalBatch) {
    std::vector<std::size_t> idx(std::min(kEvalBatch, data.size() - first));
    std::iota(idx.begin(), idx.end(), first);
    const auto labels = data.batch_labels(idx);
    const double acc = top1_accuracy(scorer(data.batch(idx)), labels);
    hits += static_cast<std::size_t>(std::llround(acc * static_cast<double>(idx.size())));
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace

double evaluate(const ModelSnapshot& model, const Dataset& data) {
  return evaluate_batched(data, [&](const Tensor& x) { return infer(model, x); });
}

double evaluate(const SnapshotEnsemble& ensemble, const Dataset& data) {
  return evaluate_batched(
      data, [&](const Tensor& x) { return ensemble_predict(ensemble, x, 1.0).probs(); });
}

ModelSnapshot train_baseline(ModelSnapshot model, const Dataset& train, const Dataset& test,
                             const BaselineConfig& cfg, std::uint64_t seed, LossCurve* curve) {
  if (train.size() == 0) throw ParameterError("baseline training data is empty");
  if (cfg.epochs < 0) throw ParameterError("baseline epochs must be non-negative");
  OptState state;
  SgdOptions opts{cfg.base_lr, cfg.train.momentum, cfg.train.weight_decay};
  auto losses = train_loop(model, train, cfg.epochs, cfg.train.batch_size, cfg.train.augment, seed,
                           "baseline", supervised_loss(train),
                           [&](std::int64_t, std::int64_t epoch) {
                             opts.lr = step_schedule_lr(cfg.base_lr, epoch, cfg.epochs);
                             sgd_momentum_step(model.params(), state, opts);
                           });
  model.zero_grad();
  model.refresh_counts();
  model.meta().cycle_index = 0;
  model.meta().schedule_name = "step";
  model.meta().seed = seed;
  model.meta().eval_accuracy = evaluate(model, test);
  if (curve) *curve = std::move(losses);
  return model;
}

ModelSnapshot prune_once(const ModelSnapshot& model, const CycleConfig& cfg) {
  if (cfg.pruner == PrunerKind::l1_filter) {
    return apply_filter_prune(model, make_depth_ramped_plan(model, cfg.base_fraction, cfg.ramp));
  }
  return global_magnitude_prune(model, cfg.magnitude_fraction);
}

ModelSnapshot retrain(ModelSnapshot model, const Dataset& train, const CycleConfig& cfg,
                      std::uint64_t seed, int cycle, LossCurve* curve) {
  cfg.validate();
  const std::int64_t total = cfg.retrain_epochs * steps_per_epoch(train.size(), cfg.train.batch_size);
  OptState state;
  SgdOptions opts{cfg.fixed_lr, cfg.train.momentum, cfg.train.weight_decay};
  OneCycleConfig schedule;
  if (cfg.schedule == RetrainSchedule::one_cycle) {
    schedule = OneCycleConfig::with_warmup_fraction(cfg.eta_initial, cfg.eta_max, cfg.eta_min,
                                                    cfg.beta_initial, cfg.beta_max, total,
                                                    cfg.warmup_fraction);
    schedule.validate();
  }
  auto losses = train_loop(model, train, cfg.retrain_epochs, cfg.train.batch_size,
                           cfg.train.augment, seed, "cycle-" + std::to_string(cycle),
                           supervised_loss(train), [&](std::int64_t step, std::int64_t) {
                             if (cfg.schedule == RetrainSchedule::one_cycle) {
                               opts.lr = one_cycle_lr(schedule, step);
                               opts.momentum = one_cycle_momentum(schedule, step);
                             }
                             sgd_momentum_step(model.params(), state, opts);
                           });
  model.zero_grad();
  model.refresh_counts();
  model.meta().cycle_index = cycle;
  model.meta().schedule_name = std::string(to_string(cfg.schedule));
  model.meta().seed = seed;
  if (curve) *curve = std::move(losses);
  return model;
}

SnapshotRegistry run_iterative_pruning(const ModelSnapshot& baseline, const CycleConfig& cfg,
                                       const Dataset& train, const Dataset& test,
                                       std::uint64_t seed, const StageObserver& observer) {
  cfg.validate();
  SnapshotRegistry registry;
  registry.snapshots.push_back(baseline);
  for (int cycle = 1; cycle <= cfg.num_cycles; ++cycle) {
    LossCurve curve;
    ModelSnapshot next =
        retrain(prune_once(registry.last(), cfg), train, cfg, seed, cycle, &curve);
    next.meta().eval_accuracy = evaluate(next, test);
    registry.snapshots.push_back(std::move(next));
    if (observer) observer(registry.last(), curve);
  }
  return registry;
}

SnapshotEnsemble select_teachers(const SnapshotRegistry& registry, TeacherSet set, double tau) {
  if (registry.size() == 0) throw ParameterError("registry is empty");
  std::vector<ModelSnapshot> members;
  switch (set) {
    case TeacherSet::all:
      members = registry.snapshots;
      break;
    case TeacherSet::snapshots_only:
      if (registry.size() < 2) throw ParameterError("registry holds no pruned snapshots");
      members.assign(registry.snapshots.begin() + 1, registry.snapshots.end());
      break;
    case TeacherSet::baseline_only:
      members.push_back(registry.baseline());
      break;
  }
  return SnapshotEnsemble(std::move(members), tau);
}

ModelSnapshot distill_student(const SnapshotRegistry& registry, const DistillConfig& cfg,
                              const Dataset& train, const Dataset& test, std::uint64_t seed,
                              LossCurve* curve) {
  cfg.validate();
  const SnapshotEnsemble teachers = select_teachers(registry, cfg.teachers, cfg.tau);
  ModelSnapshot student = registry.last();
  if (!cfg.warm_start) reinitialize_parameters(student, seed, "distill-init");

  // Teachers see the same inputs as the student; without augmentation those
  // are fixed, so their outputs are computed once.
  std::vector<Tensor> cached;
  if (!cfg.augment.enabled()) cached = cache_probs(teachers, train, cfg.tau);

  const std::int64_t total = cfg.epochs * steps_per_epoch(train.size(), cfg.batch_size);
  OneCycleConfig schedule;
  if (total > 0) {
    schedule = OneCycleConfig::with_warmup_fraction(cfg.eta_initial, cfg.eta_max, cfg.eta_min,
                                                    0.85, 0.95, total, cfg.warmup_fraction);
    schedule.validate();
  }
  OptState state;
  AdamOptions opts = cfg.adam;
  const LossFn loss_fn = [&](Tape& tape, const Tensor& logits,
                             std::span<const std::size_t> indices, const Tensor& inputs) {
    std::vector<ProbBatch> q;
    if (!cached.empty()) {
      for (const auto& probs : cached) q.push_back(gather_rows(probs, indices));
    } else {
      Tape frozen(false);
      for (const auto& member : teachers.members()) {
        q.emplace_back(softmax(frozen, infer(member, inputs), cfg.tau));
      }
    }
    Tensor loss = cfg.objective == DistillObjective::mean_kl
                      ? kd_loss_mean_kl(tape, logits, q, cfg.tau)
                      : kd_loss_single(tape, logits, ensemble_average_probs(q), cfg.tau);
    if (cfg.joint_supervised) {
      loss = add(tape, loss,
                 cross_entropy(tape, logits,
                               LabelBatch(train.batch_labels(indices), train.num_classes)));
    }
    return loss;
  };
  auto losses = train_loop(student, train, cfg.epochs, cfg.batch_size, cfg.augment, seed,
                           "distill", loss_fn, [&](std::int64_t step, std::int64_t) {
                             opts.lr = one_cycle_lr(schedule, step);
                             adaptive_moment_step(student.params(), state, opts);
                           });
  student.zero_grad();
  student.refresh_counts();
  student.meta().schedule_name = "distill";
  student.meta().seed = seed;
  student.meta().eval_accuracy = evaluate(student, test);
  if (curve) *curve = std::move(losses);
  return student;
}

}  // namespace kesi
