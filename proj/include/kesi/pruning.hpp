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
#include <limits>
#include <string>
#include <vector>

#include "kesi/model.hpp"

namespace kesi {

struct FilterPruneEntry {
  std::string layer;
  std::size_t filters_to_prune = 0;
  std::size_t depth_rank = 0;
};

struct FilterPrunePlan {
  std::vector<FilterPruneEntry> entries;
};

// Score assigned to filters that are already fully pruned.
inline constexpr double kPrunedScore = -std::numeric_limits<double>::infinity();

// Sum of |w| over the alive entries of each filter of an [F x C x k x k]
// tensor; fully pruned filters score kPrunedScore.
std::vector<double> l1_filter_scores(const Tensor& weights, const PruneMask& mask);

// Prunable layers (conv filters / dense rows) in depth order.
std::vector<std::string> prunable_layers(const ModelSnapshot& model);

// Output units of a layer that still have at least one alive weight.
std::size_t alive_filters(const PruneMask& weight_mask);

// The layer at depth rank d prunes floor(alive_d * (base_fraction + d * ramp))
// units, clamped so at least one survives.
FilterPrunePlan make_depth_ramped_plan(const ModelSnapshot& model, double base_fraction,
                                       double ramp);

// Masks, per planned layer, the filters with the smallest l1 scores (ties to
// the lowest index), their batchnorm entries, and the matching input
// channels of the consuming layers. Returns a new snapshot with refreshed
// counts.
ModelSnapshot apply_filter_prune(const ModelSnapshot& model, const FilterPrunePlan& plan);

// Pools the alive conv weights of all layers (dense weights when the model
// has no conv layer) and masks floor(fraction * alive) of smallest
// magnitude. Ties break by layer order, then flat index.
ModelSnapshot global_magnitude_prune(const ModelSnapshot& model, double fraction);

struct LayerSparsity {
  std::string name;
  std::int64_t total_params = 0;
  std::int64_t alive_params = 0;
  std::int64_t dense_macs = 0;
  std::int64_t alive_macs = 0;
};

// Reductions are relative to the unpruned network of the same graph, i.e.
// the cycle-0 snapshot.
struct SparsityReport {
  std::vector<LayerSparsity> layers;
  std::int64_t total_params = 0;
  std::int64_t alive_params = 0;
  std::int64_t dense_macs = 0;
  std::int64_t alive_macs = 0;
  double pct_params_pruned = 0.0;
  double pct_macs_pruned = 0.0;
};

SparsityReport sparsity_report(const ModelSnapshot& model);

// Materializes the structurally pruned network as a smaller dense one:
// removed units, their batchnorm entries and the matching consumer input
// channels are dropped. Outputs match the masked model.
ModelSnapshot compact(const ModelSnapshot& model);

}  // namespace kesi
