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

#include "kesi/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

#include "kesi/errors.hpp"

namespace kesi {

namespace {

using Consumers = std::vector<std::vector<std::size_t>>;

Consumers consumers_of(const std::vector<LayerSpec>& graph) {
  Consumers out(graph.size());
  for (std::size_t j = 0; j < graph.size(); ++j) {
    for (int idx : graph[j].inputs) {
      if (idx != LayerSpec::kNetworkInput) out[static_cast<std::size_t>(idx)].push_back(j);
    }
  }
  return out;
}

bool has_weights(const LayerSpec& l) {
  return l.kind == LayerKind::conv || l.kind == LayerKind::dense;
}

// Rows x (row length) view of a conv or dense weight mask.
std::size_t row_length(const PruneMask& mask) { return mask.size() / mask.shape()[0]; }

bool row_alive(const PruneMask& mask, std::size_t row) {
  const std::size_t len = row_length(mask);
  for (std::size_t j = 0; j < len; ++j) {
    if (mask.alive(row * len + j)) return true;
  }
  return false;
}

std::vector<double> row_scores(const Tensor& weights, const PruneMask& mask) {
  const std::size_t rows = weights.dim(0);
  const std::size_t len = weights.size() / rows;
  std::vector<double> scores(rows, 0.0);
  for (std::size_t f = 0; f < rows; ++f) {
    if (!row_alive(mask, f)) {
      scores[f] = kPrunedScore;
      continue;
    }
    double s = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      if (mask.alive(f * len + j)) s += std::abs(weights[f * len + j]);
    }
    scores[f] = s;
  }
  return scores;
}

// The `count` lowest-scoring live rows, ties to the lowest index.
std::vector<std::size_t> select_lowest(const std::vector<double>& scores, std::size_t count) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] != kPrunedScore) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  order.resize(std::min(count, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

class ChannelPruner {
 public:
  explicit ChannelPruner(ModelSnapshot& model)
      : model_(model),
        consumers_(consumers_of(model.graph())),
        shapes_(infer_shapes(model.graph(), model.input_shape())) {}

  void prune_unit(std::size_t layer_idx, std::size_t unit) {
    const auto& layer = model_.graph()[layer_idx];
    auto& weight = model_.param(layer.name + ".weight");
    const std::size_t len = row_length(weight.mask);
    for (std::size_t j = 0; j < len; ++j) weight.mask.prune(unit * len + j);
    if (layer.kind == LayerKind::dense) model_.param(layer.name + ".bias").mask.prune(unit);
    propagate(layer_idx, unit, 1);
  }

 private:
  // Entries [first, first + count) of layer `node`'s per-sample output are
  // now identically zero; mask everything that reads only them.
  void propagate(std::size_t node, std::size_t first, std::size_t count) {
    for (std::size_t c : consumers_[node]) {
      const auto& l = model_.graph()[c];
      switch (l.kind) {
        case LayerKind::batchnorm: {
          for (const char* p : {".gamma", ".beta"}) model_.param(l.name + p).mask.prune(first);
          model_.buffer(l.name + ".running_mean")[first] = 0.0;
          model_.buffer(l.name + ".running_var")[first] = 0.0;
          propagate(c, first, count);
          break;
        }
        case LayerKind::relu:
        case LayerKind::global_avg_pool:
          propagate(c, first, count);
          break;
        case LayerKind::flatten: {
          const Shape& in = shapes_[node];
          const std::size_t group = in.size() > 1 ? numel(in) / in[0] : 1;
          propagate(c, first * group, count * group);
          break;
        }
        case LayerKind::conv: {
          auto& mask = model_.param(l.name + ".weight").mask;
          const std::size_t k2 = l.kernel * l.kernel;
          for (std::size_t f = 0; f < l.out; ++f)
            for (std::size_t j = 0; j < k2; ++j) mask.prune((f * l.in + first) * k2 + j);
          break;
        }
        case LayerKind::dense: {
          auto& mask = model_.param(l.name + ".weight").mask;
          for (std::size_t r = 0; r < l.out; ++r)
            for (std::size_t j = first; j < first + count; ++j) mask.prune(r * l.in + j);
          break;
        }
        case LayerKind::residual_add:
          throw ParameterError("pruning '" + model_.graph()[node].name +
                               "' would change the channels of residual connection '" + l.name +
                               "'");
      }
    }
  }

  ModelSnapshot& model_;
  Consumers consumers_;
  std::vector<Shape> shapes_;
};

double checked_fraction(double base, double ramp, std::size_t depth, const std::string& layer) {
  const double f = base + static_cast<double>(depth) * ramp;
  if (f >= 1.0) {
    throw ParameterError("prune fraction " + std::to_string(f) + " >= 1 at layer '" + layer +
                         "' (depth rank " + std::to_string(depth) + ")");
  }
  return f;
}

}  // namespace

std::vector<double> l1_filter_scores(const Tensor& weights, const PruneMask& mask) {
  if (weights.rank() != 4) {
    throw ShapeError("l1_filter_scores expects an [F x C x k x k] tensor, got " +
                     to_string(weights.shape()));
  }
  if (mask.shape() != weights.shape()) {
    throw ShapeError("mask shape " + to_string(mask.shape()) + " does not match weights " +
                     to_string(weights.shape()));
  }
  return row_scores(weights, mask);
}

std::vector<std::string> prunable_layers(const ModelSnapshot& model) {
  std::vector<std::string> names;
  for (const auto& l : model.graph()) {
    if (l.prunable && has_weights(l)) names.push_back(l.name);
  }
  return names;
}

std::size_t alive_filters(const PruneMask& weight_mask) {
  std::size_t n = 0;
  for (std::size_t r = 0; r < weight_mask.shape()[0]; ++r) n += row_alive(weight_mask, r);
  return n;
}

FilterPrunePlan make_depth_ramped_plan(const ModelSnapshot& model, double base_fraction,
                                       double ramp) {
  if (!(base_fraction > 0.0 && base_fraction < 1.0)) {
    throw ParameterError("base_fraction must lie in (0, 1), got " + std::to_string(base_fraction));
  }
  if (!(ramp >= 0.0)) throw ParameterError("ramp must be non-negative");
  const auto layers = prunable_layers(model);
  FilterPrunePlan plan;
  for (std::size_t d = 0; d < layers.size(); ++d) {
    const double f = checked_fraction(base_fraction, ramp, d, layers[d]);
    const std::size_t alive = alive_filters(model.param(layers[d] + ".weight").mask);
    // The epsilon absorbs representation error such as 20 * 0.15 = 2.9999...
    auto count = static_cast<std::size_t>(std::floor(static_cast<double>(alive) * f + 1e-9));
    if (alive > 0) count = std::min(count, alive - 1);
    plan.entries.push_back({layers[d], count, d});
  }
  return plan;
}

ModelSnapshot apply_filter_prune(const ModelSnapshot& model, const FilterPrunePlan& plan) {
  ModelSnapshot out(model);
  std::vector<std::pair<std::size_t, std::vector<std::size_t>>> selections;
  for (const auto& e : plan.entries) {
    std::size_t idx = 0;
    try {
      idx = model.layer_index(e.layer);
    } catch (const ParameterError&) {
      throw ParameterError("plan refers to unknown layer '" + e.layer + "'");
    }
    const auto& layer = model.graph()[idx];
    if (!layer.prunable || !has_weights(layer)) {
      throw ParameterError("plan refers to non-prunable layer '" + e.layer + "'");
    }
    const auto& w = model.param(e.layer + ".weight");
    const std::size_t alive = alive_filters(w.mask);
    if (e.filters_to_prune > 0 && e.filters_to_prune >= alive) {
      throw ParameterError("plan prunes " + std::to_string(e.filters_to_prune) + " of " +
                           std::to_string(alive) + " alive filters in '" + e.layer + "'");
    }
    // Scores come from the input model so entries do not influence each other.
    selections.emplace_back(idx, select_lowest(row_scores(w.value, w.mask), e.filters_to_prune));
  }
  ChannelPruner pruner(out);
  for (const auto& [idx, units] : selections) {
    for (auto u : units) pruner.prune_unit(idx, u);
  }
  out.apply_masks();
  out.refresh_counts();
  return out;
}

ModelSnapshot global_magnitude_prune(const ModelSnapshot& model, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) {
    throw ParameterError("magnitude prune fraction must lie in [0, 1), got " +
                         std::to_string(fraction));
  }
  ModelSnapshot out(model);
  const bool any_conv = std::any_of(model.graph().begin(), model.graph().end(),
                                    [](const LayerSpec& l) { return l.kind == LayerKind::conv; });
  const LayerKind pooled = any_conv ? LayerKind::conv : LayerKind::dense;

  // (|w|, layer order, flat index)
  std::vector<std::tuple<double, std::size_t, std::size_t>> pool;
  std::vector<Parameter*> owners;
  for (const auto& l : model.graph()) {
    if (l.kind != pooled) continue;
    auto& p = out.param(l.name + ".weight");
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      if (p.mask.alive(i)) pool.emplace_back(std::abs(p.value[i]), owners.size(), i);
    }
    owners.push_back(&p);
  }
  const auto count = static_cast<std::size_t>(
      std::floor(fraction * static_cast<double>(pool.size()) + 1e-9));
  std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count), pool.end());
  for (std::size_t i = 0; i < count; ++i) {
    const auto& [mag, owner, flat] = pool[i];
    owners[owner]->mask.prune(flat);
  }
  out.apply_masks();
  out.refresh_counts();
  return out;
}

SparsityReport sparsity_report(const ModelSnapshot& model) {
  SparsityReport r;
  ModelSnapshot dense(model);
  for (auto& p : dense.params()) p.mask = PruneMask(p.value.shape());
  const auto alive_macs = layer_macs(model, model.input_shape());
  const auto dense_macs = layer_macs(dense, model.input_shape());
  for (std::size_t i = 0; i < model.graph().size(); ++i) {
    const auto& l = model.graph()[i];
    LayerSparsity ls{l.name};
    const std::string prefix = l.name + ".";
    for (const auto& p : model.params()) {
      if (p.name.compare(0, prefix.size(), prefix) == 0) {
        ls.total_params += static_cast<std::int64_t>(p.mask.size());
        ls.alive_params += static_cast<std::int64_t>(p.mask.alive_count());
      }
    }
    ls.dense_macs = dense_macs[i];
    ls.alive_macs = alive_macs[i];
    if (ls.total_params == 0 && ls.dense_macs == 0) continue;
    r.total_params += ls.total_params;
    r.alive_params += ls.alive_params;
    r.dense_macs += ls.dense_macs;
    r.alive_macs += ls.alive_macs;
    r.layers.push_back(std::move(ls));
  }
  const auto pct = [](std::int64_t alive, std::int64_t total) {
    return total == 0 ? 0.0
                      : 100.0 * (1.0 - static_cast<double>(alive) / static_cast<double>(total));
  };
  r.pct_params_pruned = pct(r.alive_params, r.total_params);
  r.pct_macs_pruned = pct(r.alive_macs, r.dense_macs);
  return r;
}

ModelSnapshot compact(const ModelSnapshot& model) {
  const auto& graph = model.graph();
  const auto shapes = infer_shapes(graph, model.input_shape());
  const auto all = [](std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), 0);
    return v;
  };
  // Kept entries of each layer's per-sample output along its first axis
  // (features after flatten).
  std::vector<std::vector<std::size_t>> kept(graph.size());
  const std::vector<std::size_t> input_kept = all(model.input_shape()[0]);
  const auto kept_of = [&](int idx) -> const std::vector<std::size_t>& {
    return idx == LayerSpec::kNetworkInput ? input_kept : kept[static_cast<std::size_t>(idx)];
  };

  std::vector<LayerSpec> new_graph = graph;
  std::vector<Parameter> params;
  std::vector<Buffer> buffers;
  const auto take_param = [&](const std::string& name, Shape shape,
                              const std::vector<std::size_t>& src_index) {
    const auto& p = model.param(name);
    std::vector<double> values(src_index.size());
    PruneMask mask(shape);
    for (std::size_t i = 0; i < src_index.size(); ++i) {
      values[i] = p.value[src_index[i]];
      if (!p.mask.alive(src_index[i])) mask.prune(i);
    }
    params.push_back({name, Tensor(std::move(shape), std::move(values), true), std::move(mask)});
  };

  for (std::size_t i = 0; i < graph.size(); ++i) {
    const auto& l = graph[i];
    auto& nl = new_graph[i];
    const auto& in_kept = kept_of(l.inputs[0]);
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::dense: {
        const auto& wmask = model.param(l.name + ".weight").mask;
        std::vector<std::size_t> outs;
        const bool last = i + 1 == graph.size();
        for (std::size_t f = 0; f < l.out; ++f) {
          if (!l.prunable || last || row_alive(wmask, f)) outs.push_back(f);
        }
        const std::size_t k2 = l.kind == LayerKind::conv ? l.kernel * l.kernel : 1;
        std::vector<std::size_t> src;
        for (auto f : outs)
          for (auto c : in_kept)
            for (std::size_t j = 0; j < k2; ++j) src.push_back((f * l.in + c) * k2 + j);
        nl.in = in_kept.size();
        nl.out = outs.size();
        Shape wshape = l.kind == LayerKind::conv ? Shape{nl.out, nl.in, l.kernel, l.kernel}
                                                 : Shape{nl.out, nl.in};
        take_param(l.name + ".weight", std::move(wshape), src);
        if (l.kind == LayerKind::dense) take_param(l.name + ".bias", {nl.out}, outs);
        kept[i] = outs;
        break;
      }
      case LayerKind::batchnorm: {
        const auto& g = model.param(l.name + ".gamma").mask;
        const auto& b = model.param(l.name + ".beta").mask;
        std::size_t next = 0;
        for (std::size_t c = 0; c < l.in; ++c) {
          const bool keep = next < in_kept.size() && in_kept[next] == c;
          if (keep) {
            ++next;
          } else if (g.alive(c) || b.alive(c)) {
            throw ParameterError("cannot compact '" + l.name + "': channel " + std::to_string(c) +
                                 " is removed upstream but its batchnorm entries are alive");
          }
        }
        nl.in = nl.out = in_kept.size();
        take_param(l.name + ".gamma", {nl.in}, in_kept);
        take_param(l.name + ".beta", {nl.in}, in_kept);
        for (const char* s : {".running_mean", ".running_var"}) {
          const auto& src = model.buffer(l.name + s);
          std::vector<double> v;
          for (auto c : in_kept) v.push_back(src[c]);
          buffers.push_back({l.name + s, Tensor({nl.in}, std::move(v))});
        }
        kept[i] = in_kept;
        break;
      }
      case LayerKind::residual_add:
        if (kept_of(l.inputs[1]) != in_kept) {
          throw ParameterError("cannot compact residual connection '" + l.name +
                               "': operands keep different channels");
        }
        kept[i] = in_kept;
        break;
      case LayerKind::relu:
      case LayerKind::global_avg_pool:
        kept[i] = in_kept;
        break;
      case LayerKind::flatten: {
        const auto& in_shape =
            l.inputs[0] == LayerSpec::kNetworkInput ? model.input_shape()
                                                    : shapes[static_cast<std::size_t>(l.inputs[0])];
        const std::size_t group = in_shape.size() > 1 ? numel(in_shape) / in_shape[0] : 1;
        for (auto c : in_kept)
          for (std::size_t j = 0; j < group; ++j) kept[i].push_back(c * group + j);
        break;
      }
    }
  }
  Shape input_shape = model.input_shape();
  ModelSnapshot out(std::move(new_graph), std::move(input_shape), std::move(params),
                    std::move(buffers), model.meta());
  out.refresh_counts();
  return out;
}

}  // namespace kesi
