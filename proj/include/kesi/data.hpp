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
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "kesi/rng.hpp"
#include "kesi/tensor.hpp"

namespace kesi {

// In-memory labeled samples; features are row-major per sample.
struct Dataset {
  Shape sample_shape;
  std::vector<double> features;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return numel(sample_shape); }
  // Throws ParameterError on inconsistent sizes or out-of-range labels.
  void validate() const;

  // Samples [first, first + count).
  Dataset slice(std::size_t first, std::size_t count) const;
  // [B x sample_shape] batch of the given samples.
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
};

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
};

// Big-endian IDX parsing (magic 0x00000803 for images, 0x00000801 for
// labels). Errors are FormatError with the offending byte offset.
IdxImages parse_idx_images(std::string_view bytes);
std::vector<std::uint8_t> parse_idx_labels(std::string_view bytes);

// Images as [1 x rows x cols] samples with pixels scaled to [0, 1].
// num_classes is max(label) + 1 unless given.
Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         std::size_t num_classes = 0);

// Keeps the central size x size window of every image.
Dataset center_crop(const Dataset& data, std::size_t size);
// Non-overlapping factor x factor average pooling of every image.
Dataset downsample(const Dataset& data, std::size_t factor);

// Per-channel affine standardization fitted on a training split.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Standardizer fit(const Dataset& train);
  void apply(Dataset& data) const;
};

// Gaussian clusters around fixed, seed-independent centers. Samples are
// interleaved by class so every prefix is class balanced.
Dataset make_blobs(std::size_t num_classes, std::size_t dim, std::size_t samples_per_class,
                   double spread, std::uint64_t seed);

struct AugmentOptions {
  std::size_t crop_padding = 0;  // random crop after zero padding; 0 disables
  bool horizontal_flip = false;

  bool enabled() const { return crop_padding > 0 || horizontal_flip; }
};

// Applies crop/flip in place to one [C x H x W] sample.
void augment_sample(std::span<double> sample, const Shape& shape, const AugmentOptions& opts,
                    Rng& rng);

// Sample order for one epoch of a named stage.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::string_view stage,
                                     std::uint64_t epoch);

// Batch with per-(seed, stage, epoch, sample) deterministic augmentation.
Tensor augmented_batch(const Dataset& data, std::span<const std::size_t> indices,
                       const AugmentOptions& opts, std::uint64_t seed, std::string_view stage,
                       std::uint64_t epoch);

}  // namespace kesi
