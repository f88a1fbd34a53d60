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
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "kesi/data.hpp"
#include "kesi/losses.hpp"
#include "kesi/model.hpp"
#include "kesi/optim.hpp"

namespace kesi {

enum class RetrainSchedule { fixed_small_lr, one_cycle };
enum class PrunerKind { l1_filter, global_magnitude };
enum class DistillObjective { mean_kl, avg_prob_kl };
// Which registry members teach the student.
enum class TeacherSet { all, snapshots_only, baseline_only };

std::string_view to_string(RetrainSchedule v);
std::string_view to_string(PrunerKind v);
std::string_view to_string(DistillObjective v);
std::string_view to_string(TeacherSet v);
RetrainSchedule parse_retrain_schedule(std::string_view text);
PrunerKind parse_pruner_kind(std::string_view text);
DistillObjective parse_distill_objective(std::string_view text);
TeacherSet parse_teacher_set(std::string_view text);

struct TrainOptions {
  std::size_t batch_size = 128;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  AugmentOptions augment;
};

struct BaselineConfig {
  std::int64_t epochs = 30;
  double base_lr = 0.1;  // divided by 10 at 50% and 75% of training
  TrainOptions train;
};

struct CycleConfig {
  int num_cycles = 5;
  std::int64_t retrain_epochs = 3;
  RetrainSchedule schedule = RetrainSchedule::one_cycle;
  PrunerKind pruner = PrunerKind::l1_filter;
  double base_fraction = 0.12;
  double ramp = 0.04;
  double magnitude_fraction = 0.2;
  double fixed_lr = 0.001;
  double eta_initial = 0.01;
  double eta_max = 0.1;
  double eta_min = 0.0001;
  double beta_initial = 0.85;
  double beta_max = 0.95;
  double warmup_fraction = 0.1;
  TrainOptions train;

  void validate() const;
};

struct DistillConfig {
  double tau = 5.0;
  DistillObjective objective = DistillObjective::mean_kl;
  TeacherSet teachers = TeacherSet::all;
  std::int64_t epochs = 3;
  std::size_t batch_size = 128;
  double eta_initial = 1e-4;
  double eta_max = 1e-3;
  double eta_min = 1e-6;
  double warmup_fraction = 0.1;
  AdamOptions adam;  // lr is overridden by the schedule
  bool warm_start = true;
  // Adds the supervised cross-entropy to the distillation objective.
  bool joint_supervised = false;
  AugmentOptions augment;

  void validate() const;
};

// Baseline followed by one snapshot per completed cycle.
struct SnapshotRegistry {
  std::vector<ModelSnapshot> snapshots;

  std::size_t size() const { return snapshots.size(); }
  const ModelSnapshot& baseline() const { return snapshots.front(); }
  const ModelSnapshot& last() const { return snapshots.back(); }
};

class SnapshotEnsemble {
 public:
  // Throws ParameterError when empty or when members disagree on classes.
  SnapshotEnsemble(std::vector<ModelSnapshot> members, double tau = 1.0);

  const std::vector<ModelSnapshot>& members() const { return members_; }
  std::size_t size() const { return members_.size(); }
  std::size_t num_classes() const { return members_.front().num_classes(); }
  double tau() const { return tau_; }

 private:
  std::vector<ModelSnapshot> members_;
  double tau_;
};

// Mean loss of every epoch of one training stage.
using LossCurve = std::vector<double>;

// Called after each stage with the finished snapshot and its loss curve.
using StageObserver = std::function<void(const ModelSnapshot&, const LossCurve&)>;

// Number of optimizer steps one epoch takes; a trailing batch of one sample
// is dropped because batch statistics need two.
std::int64_t steps_per_epoch(std::size_t samples, std::size_t batch_size);

// Mean member softmax at tau, eval-mode, summed in member order.
ProbBatch ensemble_predict(const SnapshotEnsemble& ensemble, const Tensor& inputs, double tau);

// Top-1 accuracy of row scores; argmax ties go to the lowest class.
double top1_accuracy(const Tensor& scores, std::span<const int> labels);
double evaluate(const ModelSnapshot& model, const Dataset& data);
double evaluate(const SnapshotEnsemble& ensemble, const Dataset& data);

// SGD with the step schedule. Returns the cycle-0 snapshot evaluated on
// `test`. Throws RunError naming epoch and step if the loss diverges.
ModelSnapshot train_baseline(ModelSnapshot model, const Dataset& train, const Dataset& test,
                             const BaselineConfig& cfg, std::uint64_t seed,
                             LossCurve* curve = nullptr);

// One prune step of the configured pruner.
ModelSnapshot prune_once(const ModelSnapshot& model, const CycleConfig& cfg);

// Retrains a pruned network with the configured schedule.
ModelSnapshot retrain(ModelSnapshot model, const Dataset& train, const CycleConfig& cfg,
                      std::uint64_t seed, int cycle, LossCurve* curve = nullptr);

// num_cycles rounds of prune then retrain starting from `baseline`.
SnapshotRegistry run_iterative_pruning(const ModelSnapshot& baseline, const CycleConfig& cfg,
                                       const Dataset& train, const Dataset& test,
                                       std::uint64_t seed, const StageObserver& observer = {});

// Teacher members chosen from the registry.
SnapshotEnsemble select_teachers(const SnapshotRegistry& registry, TeacherSet set, double tau);

// Trains the final registry snapshot against the ensemble with Adam and a
// one-cycle learning rate. Masks are left unchanged.
ModelSnapshot distill_student(const SnapshotRegistry& registry, const DistillConfig& cfg,
                              const Dataset& train, const Dataset& test, std::uint64_t seed,
                              LossCurve* curve = nullptr);

}  // namespace kesi
