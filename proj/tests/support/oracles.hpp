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

// Independent reference implementations used by the unit and acceptance
// tests. Nothing here calls into the library's kernels.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "kesi/losses.hpp"
#include "kesi/model.hpp"
#include "kesi/pruning.hpp"
#include "kesi/ops.hpp"
#include "kesi/rng.hpp"
#include "kesi/tensor.hpp"

namespace kesi::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo, double hi, bool grad = false) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), grad);
}

// Six nested loops, zero padding, cross-correlation.
inline std::vector<double> naive_conv2d(const std::vector<double>& in, std::size_t n,
                                        std::size_t c, std::size_t h, std::size_t w,
                                        const std::vector<double>& ker, std::size_t f,
                                        std::size_t k, std::size_t stride, std::size_t pad) {
  const std::size_t oh = (h + 2 * pad - k) / stride + 1;
  const std::size_t ow = (w + 2 * pad - k) / stride + 1;
  std::vector<double> out(n * f * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < f; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double acc = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < k; ++i)
              for (std::size_t j = 0; j < k; ++j) {
                const long yy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long xx = static_cast<long>(x * stride + j) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w))
                  continue;
                acc += in[((b * c + ch) * h + yy) * w + xx] * ker[((o * c + ch) * k + i) * k + j];
              }
          out[((b * f + o) * oh + y) * ow + x] = acc;
        }
  return out;
}

inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                        std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

inline std::vector<double> naive_softmax_row(std::vector<double> z, double tau) {
  double mx = -INFINITY;
  for (double& v : z) {
    v /= tau;
    mx = std::max(mx, v);
  }
  double s = 0.0;
  for (double& v : z) s += (v = std::exp(v - mx));
  for (double& v : z) v /= s;
  return z;
}

// Builds a scalar loss from the leaves on the given tape.
using LossBuilder = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Relative error |a - n| / max(|a|, |n|, floor) between analytic and
// central-difference gradients over every entry of every leaf.
inline GradCheck check_gradients(std::vector<Tensor> leaves, const LossBuilder& build,
                                 double h = 1e-5, double floor = 1e-3) {
  for (auto& l : leaves) {
    l.set_requires_grad(true);
    l.zero_grad();
  }
  {
    Tape tape;
    const Tensor loss = build(tape, leaves);
    tape.backward(loss);
  }
  auto eval = [&] {
    Tape tape(false);
    return build(tape, leaves).item();
  };
  GradCheck out;
  for (auto& l : leaves) {
    const std::vector<double> analytic(l.grad().begin(), l.grad().end());
    for (std::size_t i = 0; i < l.size(); ++i) {
      const double keep = l[i];
      l[i] = keep + h;
      const double up = eval();
      l[i] = keep - h;
      const double down = eval();
      l[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / denom);
      ++out.checked;
    }
  }
  return out;
}

// A randomly shaped differentiable graph over dense/conv/batchnorm/relu/
// softmax ops ending in one of the losses. Inputs lie in [-10, 10].
struct RandomGraph {
  std::string description;
  std::vector<Tensor> leaves;
  LossBuilder build;
};

inline RandomGraph make_random_graph(std::uint64_t seed) {
  Rng rng(seed, "random-graph");
  RandomGraph g;
  const std::size_t n = 2 + rng.below(3);
  const std::size_t classes = 2 + rng.below(3);
  const bool use_conv = rng.below(2) == 1;
  const bool use_bn = rng.below(2) == 1;
  const std::size_t loss_kind = rng.below(5);
  const double tau = rng.uniform(0.5, 4.0);

  std::vector<int> labels(n);
  for (auto& y : labels) y = static_cast<int>(rng.below(classes));
  std::vector<ProbBatch> teachers;
  for (std::size_t t = 0; t < 1 + rng.below(3); ++t) {
    Tensor q = random_tensor({n, classes}, rng, -3, 3);
    Tape none(false);
    teachers.emplace_back(softmax(none, q, tau));
  }
  const Tensor mix = random_tensor({n, classes}, rng, -1, 1);

  std::size_t features = 0;
  std::size_t conv_stride = 1, conv_pad = 0;
  if (use_conv) {
    const std::size_t c = 1 + rng.below(2), hw = 4 + 2 * rng.below(2), f = 2 + rng.below(2);
    const std::size_t k = 1 + 2 * rng.below(2);  // 1 or 3
    conv_pad = k / 2;
    // stride 2 only where the output size divides exactly
    conv_stride = ((hw + 2 * conv_pad - k) % 2 == 0 && rng.below(2) == 1) ? 2 : 1;
    g.leaves.push_back(random_tensor({n, c, hw, hw}, rng, -10, 10));
    g.leaves.push_back(random_tensor({f, c, k, k}, rng, -0.3, 0.3));
    features = f;
    g.description = "conv" + std::to_string(k) + "s" + std::to_string(conv_stride) +
                    (use_bn ? "-bn" : "") + "-relu-pool-dense";
  } else {
    const std::size_t d = 2 + rng.below(4), hidden = 2 + rng.below(4);
    g.leaves.push_back(random_tensor({n, d}, rng, -10, 10));
    g.leaves.push_back(random_tensor({hidden, d}, rng, -0.5, 0.5));
    g.leaves.push_back(random_tensor({hidden}, rng, -0.5, 0.5));
    features = hidden;
    g.description = std::string("dense") + (use_bn ? "-bn" : "") + "-relu-dense";
  }
  if (use_bn) {
    g.leaves.push_back(random_tensor({features}, rng, 0.5, 1.5));
    g.leaves.push_back(random_tensor({features}, rng, -0.5, 0.5));
  }
  g.leaves.push_back(random_tensor({classes, features}, rng, -0.5, 0.5));
  g.leaves.push_back(random_tensor({classes}, rng, -0.5, 0.5));

  static const char* loss_names[] = {"cross-entropy", "kd-single", "kd-mean-kl",
                                     "softmax-weighted-sum", "mean-log-softmax"};
  g.description += std::string(" + ") + loss_names[loss_kind];

  const bool conv = use_conv;
  g.build = [=](Tape& tape, const std::vector<Tensor>& p) {
    std::size_t i = 0;
    Tensor h;
    if (conv) {
      const Tensor& x = p[i++];
      const Tensor& w = p[i++];
      h = conv2d(tape, x, w, conv_stride, conv_pad);
    } else {
      const Tensor& x = p[i++];
      const Tensor& w = p[i++];
      const Tensor& b = p[i++];
      h = linear(tape, x, w, b);
    }
    if (use_bn) {
      const Tensor& gamma = p[i++];
      const Tensor& beta = p[i++];
      Tensor rm = Tensor::zeros({gamma.size()});
      Tensor rv = Tensor::full({gamma.size()}, 1.0);
      h = batch_norm(tape, h, gamma, beta, rm, rv, {});
    }
    h = relu(tape, h);
    if (conv) h = global_avg_pool(tape, h);
    const Tensor& w2 = p[i++];
    const Tensor& b2 = p[i++];
    const Tensor logits = linear(tape, h, w2, b2);
    switch (loss_kind) {
      case 0:
        return cross_entropy(tape, logits, LabelBatch(labels, classes));
      case 1:
        return kd_loss_single(tape, logits, teachers.front(), tau);
      case 2:
        return kd_loss_mean_kl(tape, logits, teachers, tau);
      case 3:
        return sum(tape, mul(tape, softmax(tape, logits, tau), mix));
      default:
        return mean(tape, log_softmax(tape, logits, tau));
    }
  };
  return g;
}

// conv3x3(pad 1)-bn-relu per entry of `widths`, every conv prunable, then
// global pooling and a dense classifier. Weights and batchnorm state are
// random so masked and compacted forwards are non-trivial.
inline ModelSnapshot make_conv_chain(std::size_t in_channels, std::size_t size,
                                     const std::vector<std::size_t>& widths, std::size_t classes,
                                     std::uint64_t seed) {
  std::vector<LayerSpec> graph;
  std::vector<Parameter> params;
  std::vector<Buffer> buffers;
  Rng rng(seed, "chain");
  const auto param = [&](std::string name, Shape shape, double lo, double hi) {
    Tensor t = random_tensor(std::move(shape), rng, lo, hi, true);
    PruneMask mask(t.shape());
    params.push_back({std::move(name), std::move(t), std::move(mask)});
  };
  int prev = LayerSpec::kNetworkInput;
  std::size_t c = in_channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::string n = "conv" + std::to_string(i);
    graph.push_back({LayerKind::conv, n, {prev}, c, widths[i], 3, 1, 1, true});
    param(n + ".weight", {widths[i], c, 3, 3}, -0.5, 0.5);
    graph.push_back({LayerKind::batchnorm, n + "_bn", {static_cast<int>(graph.size()) - 1},
                     widths[i], widths[i]});
    param(n + "_bn.gamma", {widths[i]}, 0.5, 1.5);
    param(n + "_bn.beta", {widths[i]}, -0.2, 0.2);
    buffers.push_back({n + "_bn.running_mean", random_tensor({widths[i]}, rng, -0.3, 0.3)});
    buffers.push_back({n + "_bn.running_var", random_tensor({widths[i]}, rng, 0.5, 2.0)});
    graph.push_back({LayerKind::relu, n + "_relu", {static_cast<int>(graph.size()) - 1}});
    prev = static_cast<int>(graph.size()) - 1;
    c = widths[i];
  }
  graph.push_back({LayerKind::global_avg_pool, "pool", {prev}});
  graph.push_back({LayerKind::flatten, "flatten", {static_cast<int>(graph.size()) - 1}});
  graph.push_back({LayerKind::dense, "fc", {static_cast<int>(graph.size()) - 1}, c, classes});
  param("fc.weight", {classes, c}, -0.5, 0.5);
  param("fc.bias", {classes}, -0.1, 0.1);
  ModelSnapshot m(std::move(graph), Shape{in_channels, size, size}, std::move(params),
                  std::move(buffers), SnapshotMeta{});
  m.refresh_counts();
  return m;
}

// Output units of a conv/dense weight mask with no alive entry.
inline std::set<std::size_t> dead_filters(const PruneMask& m) {
  std::set<std::size_t> out;
  const std::size_t len = m.size() / m.shape()[0];
  for (std::size_t f = 0; f < m.shape()[0]; ++f) {
    bool any = false;
    for (std::size_t j = 0; j < len; ++j) any = any || m.alive(f * len + j);
    if (!any) out.insert(f);
  }
  return out;
}

// Dead filters of `layer` after pruning `count` more: full sort of
// (l1 score, index) over live filters.
inline std::set<std::size_t> l1_prune_oracle(const ModelSnapshot& m, const std::string& layer,
                                             std::size_t count) {
  const auto& w = m.param(layer + ".weight");
  const auto dead = dead_filters(w.mask);
  const std::size_t rows = w.value.shape()[0];
  const std::size_t len = w.value.size() / rows;
  std::vector<std::pair<double, std::size_t>> order;
  for (std::size_t i = 0; i < rows; ++i) {
    if (dead.count(i)) continue;
    double s = 0;
    for (std::size_t j = 0; j < len; ++j) s += std::abs(w.value[i * len + j]);
    order.emplace_back(s, i);
  }
  std::sort(order.begin(), order.end());
  auto out = dead;
  for (std::size_t i = 0; i < count && i < order.size(); ++i) out.insert(order[i].second);
  return out;
}

using WeightIndex = std::tuple<std::size_t, std::size_t>;  // (conv layer order, flat index)

// Weights a global magnitude prune at `fraction` removes: full sort of
// (|w|, layer order, flat index) over alive conv weights.
inline std::set<WeightIndex> magnitude_prune_oracle(const ModelSnapshot& m, double fraction) {
  std::vector<std::tuple<double, std::size_t, std::size_t>> pool;
  std::size_t layer = 0;
  for (const auto& l : m.graph()) {
    if (l.kind != LayerKind::conv) continue;
    const auto& p = m.param(l.name + ".weight");
    for (std::size_t i = 0; i < p.value.size(); ++i)
      if (p.mask.alive(i)) pool.emplace_back(std::abs(p.value[i]), layer, i);
    ++layer;
  }
  std::sort(pool.begin(), pool.end());
  const auto count =
      static_cast<std::size_t>(std::floor(fraction * static_cast<double>(pool.size()) + 1e-9));
  std::set<WeightIndex> out;
  for (std::size_t i = 0; i < count; ++i) out.emplace(std::get<1>(pool[i]), std::get<2>(pool[i]));
  return out;
}

// Conv weights alive in `before` and pruned in `after`.
inline std::set<WeightIndex> newly_pruned(const ModelSnapshot& before, const ModelSnapshot& after) {
  std::set<WeightIndex> out;
  std::size_t layer = 0;
  for (const auto& l : before.graph()) {
    if (l.kind != LayerKind::conv) continue;
    const auto& a = before.param(l.name + ".weight").mask;
    const auto& b = after.param(l.name + ".weight").mask;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a.alive(i) && !b.alive(i)) out.emplace(layer, i);
    ++layer;
  }
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

// One random instance per check: small integer weights force ties.
struct PruneTrialResult {
  bool l1_match = false;
  bool magnitude_match = false;
  double compact_diff = 0.0;
};

inline PruneTrialResult run_prune_trial(std::uint64_t trial) {
  PruneTrialResult r;
  Rng rng(trial, "prune-trial");
  {
    const std::size_t f = 2 + rng.below(7);
    auto m = make_conv_chain(1 + rng.below(3), 4, {f, 2}, 2, trial);
    for (auto& v : m.param("conv0.weight").value.data()) v = static_cast<double>(rng.below(3)) - 1.0;
    const std::size_t already = rng.below(f - 1);
    if (already > 0) m = apply_filter_prune(m, FilterPrunePlan{{{"conv0", already, 0}}});
    const std::size_t count = rng.below(f - already);
    const auto expected = l1_prune_oracle(m, "conv0", count);
    const auto out = apply_filter_prune(m, FilterPrunePlan{{{"conv0", count, 0}}});
    r.l1_match = dead_filters(out.param("conv0.weight").mask) == expected;
  }
  {
    auto m = make_conv_chain(1, 4, {1 + rng.below(3), 1 + rng.below(3)}, 2, trial);
    for (auto& p : m.params())
      if (p.value.rank() == 4)
        for (auto& v : p.value.data()) v = (static_cast<double>(rng.below(5)) - 2.0) * 0.5;
    const double fraction = rng.uniform(0, 0.95);
    const auto once = global_magnitude_prune(m, fraction);
    const auto twice = global_magnitude_prune(once, fraction);
    r.magnitude_match = newly_pruned(m, once) == magnitude_prune_oracle(m, fraction) &&
                        newly_pruned(once, twice) == magnitude_prune_oracle(once, fraction);
  }
  {
    const std::size_t in = 1 + rng.below(3);
    auto m = make_conv_chain(in, 6, {2 + rng.below(5), 2 + rng.below(5), 2 + rng.below(4)}, 3,
                             trial);
    m = apply_filter_prune(m, make_depth_ramped_plan(m, rng.uniform(0.2, 0.5), 0.1));
    const Tensor x = random_tensor({2, in, 6, 6}, rng, -2, 2);
    r.compact_diff = max_abs_diff(infer(m, x), infer(compact(m), x));
  }
  return r;
}

}  // namespace kesi::testing
