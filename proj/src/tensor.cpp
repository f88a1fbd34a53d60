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

#include "kesi/tensor.hpp"

#include <algorithm>

#include "kesi/errors.hpp"

namespace kesi {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

std::vector<double>& TensorStorage::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

void TensorStorage::accumulate(std::span<const double> g) {
  auto& buf = grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

}  // namespace detail

Tensor::Tensor() : storage_(std::make_shared<detail::TensorStorage>()) {}

Tensor::Tensor(std::shared_ptr<detail::TensorStorage> storage)
    : storage_(std::move(storage)) {}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : storage_(std::make_shared<detail::TensorStorage>()) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + to_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  storage_->shape = std::move(shape);
  storage_->value = std::move(values);
  storage_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     to_string(shape()));
  }
  return shape()[axis];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return storage_->value[0];
}

void Tensor::zero_grad() {
  std::fill(storage_->grad.begin(), storage_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  return Tensor(storage_->shape, storage_->value, storage_->requires_grad);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != size()) {
    throw ShapeError("cannot reshape " + to_string(this->shape()) + " to " +
                     to_string(shape));
  }
  auto view = std::make_shared<detail::TensorStorage>(*storage_);
  view->shape = std::move(shape);
  return Tensor(std::move(view));
}

bool Tape::should_record(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

void Tape::record(const Tensor& output, BackwardFn backward) {
  output.storage_->requires_grad = true;
  nodes_.push_back({output.storage_, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + to_string(loss.shape()));
  }
  if (nodes_.empty()) throw ParameterError("backward() on an empty tape");
  for (auto& node : nodes_) {
    std::fill(node.output->grad.begin(), node.output->grad.end(), 0.0);
  }
  loss.storage_->grad_buffer()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
}

}  // namespace kesi
