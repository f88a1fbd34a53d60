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

#include "kesi/model.hpp"

#include <algorithm>
#include <cmath>

#include "kesi/errors.hpp"
#include "kesi/ops.hpp"
#include "kesi/rng.hpp"

namespace kesi {

namespace {

constexpr std::pair<LayerKind, std::string_view> kKindNames[] = {
    {LayerKind::dense, "dense"},
    {LayerKind::conv, "conv"},
    {LayerKind::batchnorm, "batchnorm"},
    {LayerKind::relu, "relu"},
    {LayerKind::residual_add, "residual-add"},
    {LayerKind::global_avg_pool, "global-avg-pool"},
    {LayerKind::flatten, "flatten"},
};

std::vector<Tensor> gather_inputs(const LayerSpec& layer, const Tensor& input,
                                  const std::vector<Tensor>& outputs) {
  std::vector<Tensor> xs;
  for (int idx : layer.inputs) {
    xs.push_back(idx == LayerSpec::kNetworkInput ? input : outputs[static_cast<std::size_t>(idx)]);
  }
  return xs;
}

// Alive output units / input channels of a conv or dense weight mask.
std::size_t alive_rows(const PruneMask& mask) {
  const std::size_t rows = mask.shape()[0];
  const std::size_t per_row = mask.size() / rows;
  std::size_t alive = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < per_row; ++j) {
      if (mask.alive(r * per_row + j)) {
        ++alive;
        break;
      }
    }
  }
  return alive;
}

std::size_t alive_columns(const PruneMask& mask) {
  const std::size_t rows = mask.shape()[0];
  const std::size_t cols = mask.shape()[1];
  const std::size_t inner = mask.size() / (rows * cols);
  std::size_t alive = 0;
  for (std::size_t c = 0; c < cols; ++c) {
    bool any = false;
    for (std::size_t r = 0; r < rows && !any; ++r) {
      for (std::size_t j = 0; j < inner; ++j) {
        if (mask.alive((r * cols + c) * inner + j)) {
          any = true;
          break;
        }
      }
    }
    if (any) ++alive;
  }
  return alive;
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

LayerKind parse_layer_kind(std::string_view text) {
  for (const auto& [k, name] : kKindNames) {
    if (name == text) return k;
  }
  throw ParameterError("unknown layer kind '" + std::string(text) + "'");
}

PruneMask::PruneMask(Shape shape) : shape_(std::move(shape)), bits_(numel(shape_), 1) {}

std::size_t PruneMask::alive_count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

void PruneMask::apply(std::span<double> values) const {
  for (std::size_t i = 0; i < bits_.size(); ++i) {
    if (!bits_[i]) values[i] = 0.0;
  }
}

bool PruneMask::subset_of(const PruneMask& earlier) const {
  if (bits_.size() != earlier.bits_.size()) return false;
  for (std::size_t i = 0; i < bits_.size(); ++i) {
    if (bits_[i] && !earlier.bits_[i]) return false;
  }
  return true;
}

ModelSnapshot::ModelSnapshot(std::vector<LayerSpec> graph, Shape input_shape,
                             std::vector<Parameter> params, std::vector<Buffer> buffers,
                             SnapshotMeta meta)
    : graph_(std::move(graph)),
      input_shape_(std::move(input_shape)),
      params_(std::move(params)),
      buffers_(std::move(buffers)),
      meta_(std::move(meta)) {
  validate();
}

ModelSnapshot::ModelSnapshot(const ModelSnapshot& other)
    : graph_(other.graph_), input_shape_(other.input_shape_), meta_(other.meta_) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) params_.push_back({p.name, p.value.clone(), p.mask});
  buffers_.reserve(other.buffers_.size());
  for (const auto& b : other.buffers_) buffers_.push_back({b.name, b.value.clone()});
}

ModelSnapshot& ModelSnapshot::operator=(const ModelSnapshot& other) {
  if (this != &other) *this = ModelSnapshot(other);
  return *this;
}

Parameter& ModelSnapshot::param(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw ParameterError("no parameter named '" + std::string(name) + "'");
}

const Parameter& ModelSnapshot::param(std::string_view name) const {
  return const_cast<ModelSnapshot*>(this)->param(name);
}

bool ModelSnapshot::has_param(std::string_view name) const {
  return std::any_of(params_.begin(), params_.end(),
                     [&](const Parameter& p) { return p.name == name; });
}

Tensor& ModelSnapshot::buffer(std::string_view name) {
  for (auto& b : buffers_) {
    if (b.name == name) return b.value;
  }
  throw ParameterError("no buffer named '" + std::string(name) + "'");
}

const Tensor& ModelSnapshot::buffer(std::string_view name) const {
  return const_cast<ModelSnapshot*>(this)->buffer(name);
}

std::size_t ModelSnapshot::num_classes() const {
  const auto shapes = infer_shapes(graph_, input_shape_);
  return numel(shapes.back());
}

std::size_t ModelSnapshot::layer_index(std::string_view name) const {
  for (std::size_t i = 0; i < graph_.size(); ++i) {
    if (graph_[i].name == name) return i;
  }
  throw ParameterError("no layer named '" + std::string(name) + "'");
}

void ModelSnapshot::apply_masks() {
  for (auto& p : params_) p.mask.apply(p.value.data());
}

void ModelSnapshot::refresh_counts() {
  meta_.param_count = count_params(*this);
  meta_.mac_count = count_macs(*this, input_shape_);
}

void ModelSnapshot::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

void ModelSnapshot::validate() const {
  if (graph_.empty()) throw ShapeError("model graph is empty");
  const auto shapes = infer_shapes(graph_, input_shape_);
  (void)shapes;
  for (const auto& p : params_) {
    if (p.mask.shape() != p.value.shape()) {
      throw ShapeError("mask of '" + p.name + "' has shape " + to_string(p.mask.shape()) +
                       ", parameter has " + to_string(p.value.shape()));
    }
  }
  const auto expect = [&](const std::string& name, const Shape& shape) {
    const auto& p = param(name);
    if (p.value.shape() != shape) {
      throw ShapeError("parameter '" + name + "' has shape " + to_string(p.value.shape()) +
                       ", layer expects " + to_string(shape));
    }
  };
  for (const auto& layer : graph_) {
    switch (layer.kind) {
      case LayerKind::conv:
        expect(layer.name + ".weight", {layer.out, layer.in, layer.kernel, layer.kernel});
        break;
      case LayerKind::dense:
        expect(layer.name + ".weight", {layer.out, layer.in});
        expect(layer.name + ".bias", {layer.out});
        break;
      case LayerKind::batchnorm:
        expect(layer.name + ".gamma", {layer.in});
        expect(layer.name + ".beta", {layer.in});
        if (buffer(layer.name + ".running_mean").size() != layer.in ||
            buffer(layer.name + ".running_var").size() != layer.in) {
          throw ShapeError("running statistics of '" + layer.name + "' have the wrong size");
        }
        break;
      default:
        break;
    }
  }
}

std::vector<Shape> infer_shapes(const std::vector<LayerSpec>& graph, const Shape& input_shape) {
  std::vector<Shape> shapes;
  shapes.reserve(graph.size());
  for (std::size_t li = 0; li < graph.size(); ++li) {
    const auto& layer = graph[li];
    std::vector<Shape> ins;
    for (int idx : layer.inputs) {
      if (idx != LayerSpec::kNetworkInput && (idx < 0 || static_cast<std::size_t>(idx) >= li)) {
        throw ShapeError("layer '" + layer.name + "' refers to input " + std::to_string(idx) +
                         " which does not precede it");
      }
      ins.push_back(idx == LayerSpec::kNetworkInput ? input_shape
                                                    : shapes[static_cast<std::size_t>(idx)]);
    }
    const std::size_t arity = layer.kind == LayerKind::residual_add ? 2 : 1;
    if (ins.size() != arity) {
      throw ShapeError("layer '" + layer.name + "' needs " + std::to_string(arity) + " input(s)");
    }
    const Shape& x = ins[0];
    const auto fail = [&](const std::string& why) {
      throw ShapeError("layer '" + layer.name + "' (" + std::string(to_string(layer.kind)) +
                       "): " + why + "; input shape " + to_string(x));
    };
    switch (layer.kind) {
      case LayerKind::conv: {
        if (x.size() != 3 || x[0] != layer.in) fail("expects " + std::to_string(layer.in) + " channels");
        if (layer.stride < 1 || layer.kernel < 1) fail("kernel and stride must be positive");
        Shape out{layer.out, 0, 0};
        for (int a = 1; a <= 2; ++a) {
          const std::size_t span = x[a] + 2 * layer.padding;
          if (span < layer.kernel || (span - layer.kernel) % layer.stride != 0) fail("output size not exact");
          out[a] = (span - layer.kernel) / layer.stride + 1;
        }
        shapes.push_back(out);
        break;
      }
      case LayerKind::dense:
        if (x.size() != 1 || x[0] != layer.in) fail("expects " + std::to_string(layer.in) + " features");
        shapes.push_back({layer.out});
        break;
      case LayerKind::batchnorm:
        if (x.empty() || x[0] != layer.in) fail("expects " + std::to_string(layer.in) + " channels");
        shapes.push_back(x);
        break;
      case LayerKind::relu:
        shapes.push_back(x);
        break;
      case LayerKind::residual_add:
        if (ins[0] != ins[1]) fail("operand shapes differ: " + to_string(ins[1]));
        shapes.push_back(x);
        break;
      case LayerKind::global_avg_pool:
        if (x.size() != 3) fail("expects a C x H x W input");
        shapes.push_back({x[0]});
        break;
      case LayerKind::flatten:
        shapes.push_back({numel(x)});
        break;
    }
  }
  return shapes;
}

Tensor forward(Tape& tape, ModelSnapshot& model, const Tensor& input, Mode mode) {
  const Shape& expect = model.input_shape();
  if (input.rank() != expect.size() + 1 ||
      !std::equal(expect.begin(), expect.end(), input.shape().begin() + 1)) {
    throw ShapeError("model expects per-sample input " + to_string(expect) + ", got batch " +
                     to_string(input.shape()));
  }
  const BatchNormOptions bn{.training = mode == Mode::train};
  std::vector<Tensor> outputs;
  outputs.reserve(model.graph().size());
  for (const auto& layer : model.graph()) {
    auto xs = gather_inputs(layer, input, outputs);
    switch (layer.kind) {
      case LayerKind::conv:
        outputs.push_back(conv2d(tape, xs[0], model.param(layer.name + ".weight").value,
                                 layer.stride, layer.padding));
        break;
      case LayerKind::dense:
        outputs.push_back(linear(tape, xs[0], model.param(layer.name + ".weight").value,
                                 model.param(layer.name + ".bias").value));
        break;
      case LayerKind::batchnorm:
        outputs.push_back(batch_norm(tape, xs[0], model.param(layer.name + ".gamma").value,
                                     model.param(layer.name + ".beta").value,
                                     model.buffer(layer.name + ".running_mean"),
                                     model.buffer(layer.name + ".running_var"), bn));
        break;
      case LayerKind::relu:
        outputs.push_back(relu(tape, xs[0]));
        break;
      case LayerKind::residual_add:
        outputs.push_back(add(tape, xs[0], xs[1]));
        break;
      case LayerKind::global_avg_pool:
        outputs.push_back(global_avg_pool(tape, xs[0]));
        break;
      case LayerKind::flatten:
        outputs.push_back(flatten(tape, xs[0]));
        break;
    }
  }
  return outputs.back();
}

Tensor infer(const ModelSnapshot& model, const Tensor& input) {
  Tape tape(false);
  // Eval mode never writes to the running buffers.
  return forward(tape, const_cast<ModelSnapshot&>(model), input, Mode::eval);
}

std::int64_t count_params(const ModelSnapshot& model) {
  std::int64_t total = 0;
  for (const auto& p : model.params()) total += static_cast<std::int64_t>(p.mask.alive_count());
  return total;
}

std::vector<std::int64_t> layer_macs(const ModelSnapshot& model, const Shape& input_shape) {
  const auto shapes = infer_shapes(model.graph(), input_shape);
  std::vector<std::int64_t> macs(model.graph().size(), 0);
  for (std::size_t i = 0; i < model.graph().size(); ++i) {
    const auto& layer = model.graph()[i];
    if (layer.kind != LayerKind::conv && layer.kind != LayerKind::dense) continue;
    const auto& mask = model.param(layer.name + ".weight").mask;
    const auto out_alive = static_cast<std::int64_t>(alive_rows(mask));
    const auto in_alive = static_cast<std::int64_t>(alive_columns(mask));
    if (layer.kind == LayerKind::conv) {
      const auto spatial = static_cast<std::int64_t>(shapes[i][1] * shapes[i][2]);
      const auto k2 = static_cast<std::int64_t>(layer.kernel * layer.kernel);
      macs[i] = spatial * out_alive * in_alive * k2;
    } else {
      macs[i] = out_alive * in_alive;
    }
  }
  return macs;
}

std::int64_t count_macs(const ModelSnapshot& model, const Shape& input_shape) {
  std::int64_t total = 0;
  for (auto m : layer_macs(model, input_shape)) total += m;
  return total;
}

namespace {

void init_conv_weight(Tensor& w, Rng& rng) {
  // He-normal over fan-out.
  const double sd = std::sqrt(2.0 / static_cast<double>(w.dim(0) * w.dim(2) * w.dim(3)));
  for (auto& v : w.data()) v = sd * rng.normal();
}

void init_dense(Tensor& w, Tensor& b, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(w.dim(1)));
  for (auto& v : w.data()) v = rng.uniform(-bound, bound);
  for (auto& v : b.data()) v = rng.uniform(-bound, bound);
}

class GraphBuilder {
 public:
  GraphBuilder(std::uint64_t seed) : rng_(seed, "init") {}

  int conv(const std::string& name, int input, std::size_t in, std::size_t out, std::size_t k,
           std::size_t stride, std::size_t padding, bool prunable) {
    LayerSpec l{LayerKind::conv, name, {input}, in, out, k, stride, padding, prunable};
    Tensor w = Tensor::zeros({out, in, k, k});
    init_conv_weight(w, rng_);
    add_param(name + ".weight", std::move(w));
    return push(std::move(l));
  }

  int dense(const std::string& name, int input, std::size_t in, std::size_t out, bool prunable) {
    LayerSpec l{LayerKind::dense, name, {input}, in, out, 0, 1, 0, prunable};
    Tensor w = Tensor::zeros({out, in});
    Tensor b = Tensor::zeros({out});
    init_dense(w, b, rng_);
    add_param(name + ".weight", std::move(w));
    add_param(name + ".bias", std::move(b));
    return push(std::move(l));
  }

  int batchnorm(const std::string& name, int input, std::size_t channels) {
    LayerSpec l{LayerKind::batchnorm, name, {input}, channels, channels};
    add_param(name + ".gamma", Tensor::full({channels}, 1.0));
    add_param(name + ".beta", Tensor::zeros({channels}));
    buffers_.push_back({name + ".running_mean", Tensor::zeros({channels})});
    buffers_.push_back({name + ".running_var", Tensor::full({channels}, 1.0)});
    return push(std::move(l));
  }

  int simple(LayerKind kind, const std::string& name, std::vector<int> inputs) {
    LayerSpec l;
    l.kind = kind;
    l.name = name;
    l.inputs = std::move(inputs);
    return push(std::move(l));
  }

  ModelSnapshot finish(Shape input_shape, std::uint64_t seed) {
    SnapshotMeta meta;
    meta.seed = seed;
    ModelSnapshot model(std::move(graph_), std::move(input_shape), std::move(params_),
                        std::move(buffers_), meta);
    model.refresh_counts();
    return model;
  }

 private:
  int push(LayerSpec l) {
    graph_.push_back(std::move(l));
    return static_cast<int>(graph_.size()) - 1;
  }
  void add_param(std::string name, Tensor value) {
    value.set_requires_grad(true);
    PruneMask mask(value.shape());
    params_.push_back({std::move(name), std::move(value), std::move(mask)});
  }

  Rng rng_;
  std::vector<LayerSpec> graph_;
  std::vector<Parameter> params_;
  std::vector<Buffer> buffers_;
};

}  // namespace

void reinitialize_parameters(ModelSnapshot& model, std::uint64_t seed, std::string_view stream) {
  Rng rng(seed, stream);
  for (const auto& layer : model.graph()) {
    switch (layer.kind) {
      case LayerKind::conv:
        init_conv_weight(model.param(layer.name + ".weight").value, rng);
        break;
      case LayerKind::dense:
        init_dense(model.param(layer.name + ".weight").value,
                   model.param(layer.name + ".bias").value, rng);
        break;
      case LayerKind::batchnorm:
        for (auto& v : model.param(layer.name + ".gamma").value.data()) v = 1.0;
        for (auto& v : model.param(layer.name + ".beta").value.data()) v = 0.0;
        for (auto& v : model.buffer(layer.name + ".running_mean").data()) v = 0.0;
        for (auto& v : model.buffer(layer.name + ".running_var").data()) v = 1.0;
        break;
      default:
        break;
    }
  }
  model.apply_masks();
}

ModelSnapshot build_desknet(const std::vector<std::size_t>& widths, std::size_t blocks_per_stage,
                            std::size_t num_classes, const DeskNetOptions& options) {
  if (widths.size() != 3 || std::any_of(widths.begin(), widths.end(),
                                        [](std::size_t w) { return w == 0; })) {
    throw ParameterError("desknet needs 3 positive stage widths");
  }
  if (blocks_per_stage < 1) throw ParameterError("desknet needs at least one block per stage");
  if (num_classes < 2) throw ParameterError("num_classes must be at least 2");
  if (options.in_channels < 1 || options.input_size < 4 || options.input_size % 4 != 0) {
    throw ParameterError("desknet input size must be a positive multiple of 4");
  }

  GraphBuilder g(options.seed);
  int x = g.conv("stem.conv", LayerSpec::kNetworkInput, options.in_channels, widths[0], 3, 1, 1,
                 false);
  x = g.batchnorm("stem.bn", x, widths[0]);
  x = g.simple(LayerKind::relu, "stem.relu", {x});
  std::size_t channels = widths[0];
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t b = 0; b < blocks_per_stage; ++b) {
      const std::string p = "s" + std::to_string(s + 1) + "b" + std::to_string(b + 1) + ".";
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      const std::size_t out = widths[s];
      const int block_in = x;
      // Downsampling uses 4x4/2 (pad 1) and a 2x2/2 projection: both give exact
      // output sizes on even inputs, which 3x3/2 and 1x1/2 do not.
      const std::size_t k1 = stride == 2 ? 4 : 3;
      int y = g.conv(p + "conv1", block_in, channels, out, k1, stride, 1, true);
      y = g.batchnorm(p + "bn1", y, out);
      y = g.simple(LayerKind::relu, p + "relu1", {y});
      y = g.conv(p + "conv2", y, out, out, 3, 1, 1, false);
      y = g.batchnorm(p + "bn2", y, out);
      int shortcut = block_in;
      if (stride != 1 || channels != out) {
        shortcut = g.conv(p + "proj", block_in, channels, out, stride, stride, 0, false);
        shortcut = g.batchnorm(p + "proj_bn", shortcut, out);
      }
      y = g.simple(LayerKind::residual_add, p + "add", {y, shortcut});
      x = g.simple(LayerKind::relu, p + "out", {y});
      channels = out;
    }
  }
  x = g.simple(LayerKind::global_avg_pool, "pool", {x});
  x = g.simple(LayerKind::flatten, "flatten", {x});
  g.dense("fc", x, channels, num_classes, false);
  return g.finish({options.in_channels, options.input_size, options.input_size}, options.seed);
}

ModelSnapshot build_mlp(const std::vector<std::size_t>& layer_sizes, std::uint64_t seed) {
  if (layer_sizes.size() < 2) throw ParameterError("mlp needs at least 2 layer sizes");
  if (std::any_of(layer_sizes.begin(), layer_sizes.end(), [](std::size_t s) { return s == 0; })) {
    throw ParameterError("mlp layer sizes must be positive");
  }
  if (layer_sizes.back() < 2) throw ParameterError("num_classes must be at least 2");
  GraphBuilder g(seed);
  int x = LayerSpec::kNetworkInput;
  const std::size_t last = layer_sizes.size() - 2;
  for (std::size_t i = 0; i <= last; ++i) {
    const std::string name = "fc" + std::to_string(i + 1);
    x = g.dense(name, x, layer_sizes[i], layer_sizes[i + 1], i != last);
    if (i != last) x = g.simple(LayerKind::relu, name + ".relu", {x});
  }
  return g.finish({layer_sizes.front()}, seed);
}

}  // namespace kesi
