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
#include <string>
#include <string_view>
#include <vector>

#include "kesi/tensor.hpp"

namespace kesi {

enum class LayerKind { dense, conv, batchnorm, relu, residual_add, global_avg_pool, flatten };

std::string_view to_string(LayerKind kind);
LayerKind parse_layer_kind(std::string_view text);

// One node of a network graph. Layers are stored in topological order and
// refer to their inputs by index; kNetworkInput denotes the model input.
struct LayerSpec {
  static constexpr int kNetworkInput = -1;

  LayerKind kind = LayerKind::relu;
  std::string name;
  std::vector<int> inputs;
  std::size_t in = 0;   // conv: input channels, dense: input features, batchnorm: channels
  std::size_t out = 0;  // conv: filters, dense: output features
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  // Output units (conv filters / dense rows) may be removed structurally.
  bool prunable = false;

  bool operator==(const LayerSpec&) const = default;
};

// Binary keep/prune flags for one parameter tensor (1 = alive).
class PruneMask {
 public:
  PruneMask() = default;
  explicit PruneMask(Shape shape);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return bits_.size(); }
  bool alive(std::size_t i) const { return bits_[i] != 0; }
  void prune(std::size_t i) { bits_[i] = 0; }
  std::size_t alive_count() const;
  std::span<const std::uint8_t> bits() const { return bits_; }
  std::span<std::uint8_t> bits() { return bits_; }

  // Zeroes the entries of `values` that are pruned.
  void apply(std::span<double> values) const;
  // True when every entry alive here is also alive in `earlier`.
  bool subset_of(const PruneMask& earlier) const;

  bool operator==(const PruneMask&) const = default;

 private:
  Shape shape_;
  std::vector<std::uint8_t> bits_;
};

struct Parameter {
  std::string name;
  Tensor value;
  PruneMask mask;
};

// Non-trainable state (batchnorm running statistics).
struct Buffer {
  std::string name;
  Tensor value;
};

struct SnapshotMeta {
  int cycle_index = 0;  // 0 is the unpruned baseline
  std::string schedule_name = "none";
  double eval_accuracy = 0.0;
  std::int64_t param_count = 0;
  std::int64_t mac_count = 0;
  std::uint64_t seed = 0;

  bool operator==(const SnapshotMeta&) const = default;
};

enum class Mode { train, eval };

// A network's graph, parameters, prune masks and provenance.
//
// Copies are deep: parameters of a copy never alias the original.
class ModelSnapshot {
 public:
  ModelSnapshot() = default;
  ModelSnapshot(std::vector<LayerSpec> graph, Shape input_shape, std::vector<Parameter> params,
                std::vector<Buffer> buffers, SnapshotMeta meta);

  ModelSnapshot(const ModelSnapshot& other);
  ModelSnapshot& operator=(const ModelSnapshot& other);
  ModelSnapshot(ModelSnapshot&&) noexcept = default;
  ModelSnapshot& operator=(ModelSnapshot&&) noexcept = default;

  const std::vector<LayerSpec>& graph() const { return graph_; }
  // Per-sample input shape, e.g. {C, H, W} or {features}.
  const Shape& input_shape() const { return input_shape_; }
  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  std::vector<Buffer>& buffers() { return buffers_; }
  const std::vector<Buffer>& buffers() const { return buffers_; }
  SnapshotMeta& meta() { return meta_; }
  const SnapshotMeta& meta() const { return meta_; }

  Parameter& param(std::string_view name);
  const Parameter& param(std::string_view name) const;
  bool has_param(std::string_view name) const;
  Tensor& buffer(std::string_view name);
  const Tensor& buffer(std::string_view name) const;

  std::size_t num_classes() const;
  std::size_t layer_index(std::string_view name) const;

  // Zeroes pruned entries of every parameter.
  void apply_masks();
  // Recomputes meta.param_count and meta.mac_count from the masks.
  void refresh_counts();
  // Checks graph consistency and mask/parameter shapes; throws ShapeError.
  void validate() const;
  void zero_grad();

 private:
  std::vector<LayerSpec> graph_;
  Shape input_shape_;
  std::vector<Parameter> params_;
  std::vector<Buffer> buffers_;
  SnapshotMeta meta_;
};

// Per-sample output shape of every layer for the given per-sample input.
std::vector<Shape> infer_shapes(const std::vector<LayerSpec>& graph, const Shape& input_shape);

// Runs the network on a batch. Train mode uses batch statistics and updates
// the batchnorm running buffers.
Tensor forward(Tape& tape, ModelSnapshot& model, const Tensor& input, Mode mode);
// Eval-mode forward without gradient recording.
Tensor infer(const ModelSnapshot& model, const Tensor& input);

std::int64_t count_params(const ModelSnapshot& model);
// Per-layer multiply-accumulates (zero for layers other than conv/dense).
std::vector<std::int64_t> layer_macs(const ModelSnapshot& model, const Shape& input_shape);
// Multiply-accumulates for one sample of `input_shape`, counting only alive
// output units and alive input channels of conv and dense layers.
std::int64_t count_macs(const ModelSnapshot& model, const Shape& input_shape);

struct DeskNetOptions {
  std::size_t in_channels = 3;
  std::size_t input_size = 32;
  std::uint64_t seed = 0;
};

// 3-stage residual CNN: conv-bn-relu stem; blocks of conv-bn-relu-conv-bn
// plus identity or projection shortcut, followed by relu; global average
// pool; dense classifier. The first block of stages 2 and 3 halves the
// resolution with a 4x4 stride-2 conv and a 2x2 stride-2 projection, so
// input_size must be divisible by 4. The first conv of every block is
// prunable.
ModelSnapshot build_desknet(const std::vector<std::size_t>& widths, std::size_t blocks_per_stage,
                            std::size_t num_classes, const DeskNetOptions& options = {});

// Redraws every parameter with the builders' initialization from the named
// stream `stream` of `seed` and resets batchnorm statistics. Masks are kept
// and re-applied.
void reinitialize_parameters(ModelSnapshot& model, std::uint64_t seed, std::string_view stream);

// Dense-relu stack with a linear last layer; hidden layers are prunable.
ModelSnapshot build_mlp(const std::vector<std::size_t>& layer_sizes, std::uint64_t seed = 0);

}  // namespace kesi
