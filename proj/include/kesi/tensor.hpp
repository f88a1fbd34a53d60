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
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace kesi {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {
struct TensorStorage {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  void accumulate(std::span<const double> g);
  std::vector<double>& grad_buffer();
};
}  // namespace detail

// Dense row-major tensor of doubles with an optional gradient buffer.
//
// Tensor is a handle: copies alias the same storage, which is what lets the
// tape route gradients back to parameters. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return storage_->shape; }
  std::size_t rank() const { return storage_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return storage_->value.size(); }
  bool empty() const { return storage_->value.empty(); }

  std::span<double> data() { return storage_->value; }
  std::span<const double> data() const { return storage_->value; }
  double& operator[](std::size_t i) { return storage_->value[i]; }
  double operator[](std::size_t i) const { return storage_->value[i]; }
  double item() const;

  bool requires_grad() const { return storage_->requires_grad; }
  void set_requires_grad(bool on) { storage_->requires_grad = on; }
  bool has_grad() const { return !storage_->grad.empty(); }
  // Gradient view; empty span when no gradient has been accumulated.
  std::span<double> grad() { return storage_->grad; }
  std::span<const double> grad() const { return storage_->grad; }
  void zero_grad();

  Tensor clone() const;
  // Deep copy with a new shape (no gradient link). Element count must match.
  Tensor reshaped(Shape shape) const;
  bool aliases(const Tensor& other) const { return storage_ == other.storage_; }

  const std::shared_ptr<detail::TensorStorage>& storage() const { return storage_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorStorage> storage);
  std::shared_ptr<detail::TensorStorage> storage_;

  friend class Tape;
};

// Ordered record of differentiable operations.
//
// Operations append a node only when the tape is recording and at least one
// input requires a gradient. backward() walks the nodes once in reverse.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  // True when an op over `inputs` must be recorded.
  bool should_record(std::initializer_list<const Tensor*> inputs) const;

  // Marks `output` as requiring grad and appends a node. `backward` reads
  // output's gradient and accumulates into the inputs.
  void record(const Tensor& output, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and propagates. Leaf gradients accumulate
  // across calls; intermediate gradients are recomputed each call.
  void backward(const Tensor& loss);

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::shared_ptr<detail::TensorStorage> output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool recording_;
};

}  // namespace kesi
