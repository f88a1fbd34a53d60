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

#include "kesi/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>

#include "kesi/errors.hpp"

namespace kesi {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::uint32_t read_be32(std::string_view bytes, std::size_t offset, const char* what) {
  if (bytes.size() < offset + 4) {
    throw FormatError(std::string("IDX file truncated in ") + what, bytes.size());
  }
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  return v;
}

void check_magic(std::string_view bytes, std::uint32_t expected, const char* kind) {
  if (bytes.empty()) throw FormatError(std::string("empty IDX ") + kind + " file", 0);
  const auto magic = read_be32(bytes, 0, "magic number");
  if (magic != expected) {
    std::ostringstream msg;
    msg << "IDX " << kind << " file has magic 0x" << std::hex << magic << ", expected 0x"
        << expected;
    throw FormatError(msg.str(), 0);
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RunError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void require_image(const Dataset& data, const char* op) {
  if (data.sample_shape.size() != 3) {
    throw ShapeError(std::string(op) + " needs C x H x W samples, got " +
                     to_string(data.sample_shape));
  }
}

}  // namespace

void Dataset::validate() const {
  if (features.size() != labels.size() * sample_size()) {
    throw ParameterError("dataset has " + std::to_string(features.size()) + " feature values for " +
                         std::to_string(labels.size()) + " samples of shape " +
                         to_string(sample_shape));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw ParameterError("label " + std::to_string(labels[i]) + " of sample " +
                           std::to_string(i) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

Dataset Dataset::slice(std::size_t first, std::size_t count) const {
  if (first + count > size()) {
    throw ParameterError("slice [" + std::to_string(first) + ", " + std::to_string(first + count) +
                         ") exceeds " + std::to_string(size()) + " samples");
  }
  Dataset out{sample_shape, {}, {}, num_classes};
  const std::size_t s = sample_size();
  out.features.assign(features.begin() + static_cast<std::ptrdiff_t>(first * s),
                      features.begin() + static_cast<std::ptrdiff_t>((first + count) * s));
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(first),
                    labels.begin() + static_cast<std::ptrdiff_t>(first + count));
  return out;
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t s = sample_size();
  Shape shape{indices.size()};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  std::vector<double> values(indices.size() * s);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    std::copy_n(features.begin() + static_cast<std::ptrdiff_t>(indices[b] * s), s,
                values.begin() + static_cast<std::ptrdiff_t>(b * s));
  }
  return Tensor(std::move(shape), std::move(values));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels[i]);
  return out;
}

IdxImages parse_idx_images(std::string_view bytes) {
  check_magic(bytes, kIdxImagesMagic, "images");
  IdxImages img;
  img.count = read_be32(bytes, 4, "image count");
  img.rows = read_be32(bytes, 8, "row count");
  img.cols = read_be32(bytes, 12, "column count");
  const unsigned __int128 need =
      static_cast<unsigned __int128>(img.count) * img.rows * img.cols;
  if (need > bytes.size() - 16) {
    throw FormatError("IDX images truncated: header declares " + std::to_string(img.count) + "x" +
                          std::to_string(img.rows) + "x" + std::to_string(img.cols) +
                          " pixels, have " + std::to_string(bytes.size() - 16),
                      bytes.size());
  }
  const std::size_t expected = img.count * img.rows * img.cols;
  if (bytes.size() - 16 > expected) {
    throw FormatError("IDX images have trailing bytes", 16 + expected);
  }
  img.pixels.assign(bytes.begin() + 16, bytes.end());
  return img;
}

std::vector<std::uint8_t> parse_idx_labels(std::string_view bytes) {
  check_magic(bytes, kIdxLabelsMagic, "labels");
  const std::size_t count = read_be32(bytes, 4, "label count");
  if (bytes.size() - 8 < count) {
    throw FormatError("IDX labels truncated: need " + std::to_string(count) + " bytes, have " +
                          std::to_string(bytes.size() - 8),
                      bytes.size());
  }
  if (bytes.size() - 8 > count) throw FormatError("IDX labels have trailing bytes", 8 + count);
  return {bytes.begin() + 8, bytes.end()};
}

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         std::size_t num_classes) {
  const auto img = parse_idx_images(read_file(images));
  const auto lab = parse_idx_labels(read_file(labels));
  if (img.count != lab.size()) {
    throw FormatError("image count " + std::to_string(img.count) + " does not match label count " +
                          std::to_string(lab.size()),
                      4);
  }
  Dataset d;
  d.sample_shape = {1, img.rows, img.cols};
  d.features.resize(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) d.features[i] = img.pixels[i] / 255.0;
  d.labels.assign(lab.begin(), lab.end());
  const int top = lab.empty() ? 0 : *std::max_element(lab.begin(), lab.end());
  d.num_classes = num_classes ? num_classes : static_cast<std::size_t>(top) + 1;
  d.validate();
  return d;
}

Dataset center_crop(const Dataset& data, std::size_t size) {
  require_image(data, "center_crop");
  const std::size_t c = data.sample_shape[0], h = data.sample_shape[1], w = data.sample_shape[2];
  if (size == 0 || size > h || size > w) {
    throw ParameterError("crop size " + std::to_string(size) + " does not fit " +
                         to_string(data.sample_shape));
  }
  const std::size_t top = (h - size) / 2, left = (w - size) / 2;
  Dataset out{{c, size, size}, {}, data.labels, data.num_classes};
  out.features.reserve(data.size() * c * size * size);
  for (std::size_t n = 0; n < data.size(); ++n)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < size; ++i)
        for (std::size_t j = 0; j < size; ++j)
          out.features.push_back(data.features[((n * c + ch) * h + top + i) * w + left + j]);
  return out;
}

Dataset downsample(const Dataset& data, std::size_t factor) {
  require_image(data, "downsample");
  if (factor == 1) return data;
  const std::size_t c = data.sample_shape[0], h = data.sample_shape[1], w = data.sample_shape[2];
  if (factor == 0 || h % factor || w % factor) {
    throw ParameterError("downsample factor " + std::to_string(factor) + " does not divide " +
                         to_string(data.sample_shape));
  }
  const std::size_t oh = h / factor, ow = w / factor;
  Dataset out{{c, oh, ow}, std::vector<double>(data.size() * c * oh * ow), data.labels,
              data.num_classes};
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t p = 0; p < data.size() * c; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t a = 0; a < factor; ++a)
          for (std::size_t b = 0; b < factor; ++b)
            acc += data.features[(p * h + i * factor + a) * w + j * factor + b];
        out.features[(p * oh + i) * ow + j] = acc * inv;
      }
  return out;
}

Standardizer Standardizer::fit(const Dataset& train) {
  if (train.size() == 0) throw ParameterError("cannot fit standardization on an empty split");
  const std::size_t channels = train.sample_shape.size() == 3 ? train.sample_shape[0] : 1;
  const std::size_t per_channel = train.sample_size() / channels;
  Standardizer s;
  s.mean.assign(channels, 0.0);
  s.stddev.assign(channels, 0.0);
  const double count = static_cast<double>(train.size() * per_channel);
  for (std::size_t ch = 0; ch < channels; ++ch) {
    double acc = 0.0;
    for (std::size_t n = 0; n < train.size(); ++n)
      for (std::size_t k = 0; k < per_channel; ++k)
        acc += train.features[(n * channels + ch) * per_channel + k];
    const double mu = acc / count;
    double sq = 0.0;
    for (std::size_t n = 0; n < train.size(); ++n)
      for (std::size_t k = 0; k < per_channel; ++k) {
        const double d = train.features[(n * channels + ch) * per_channel + k] - mu;
        sq += d * d;
      }
    s.mean[ch] = mu;
    s.stddev[ch] = std::sqrt(sq / count);
    if (s.stddev[ch] == 0.0) s.stddev[ch] = 1.0;
  }
  return s;
}

void Standardizer::apply(Dataset& data) const {
  const std::size_t channels = mean.size();
  const std::size_t per_channel = data.sample_size() / channels;
  for (std::size_t n = 0; n < data.size(); ++n)
    for (std::size_t ch = 0; ch < channels; ++ch)
      for (std::size_t k = 0; k < per_channel; ++k) {
        auto& v = data.features[(n * channels + ch) * per_channel + k];
        v = (v - mean[ch]) / stddev[ch];
      }
}

Dataset make_blobs(std::size_t num_classes, std::size_t dim, std::size_t samples_per_class,
                   double spread, std::uint64_t seed) {
  if (num_classes == 0 || dim == 0 || samples_per_class == 0) {
    throw ParameterError("make_blobs needs positive class count, dimension and sample count");
  }
  if (!(spread >= 0.0)) throw ParameterError("make_blobs spread must be non-negative");
  Rng center_rng(0, "blob-centers", {num_classes, dim});
  std::vector<double> centers(num_classes * dim);
  for (auto& c : centers) c = center_rng.uniform(-4.0, 4.0);

  Rng rng(seed, "blobs");
  Dataset d{{dim}, {}, {}, num_classes};
  d.features.reserve(num_classes * samples_per_class * dim);
  for (std::size_t i = 0; i < samples_per_class; ++i) {
    for (std::size_t c = 0; c < num_classes; ++c) {
      for (std::size_t j = 0; j < dim; ++j) {
        d.features.push_back(centers[c * dim + j] + spread * rng.normal());
      }
      d.labels.push_back(static_cast<int>(c));
    }
  }
  return d;
}

void augment_sample(std::span<double> sample, const Shape& shape, const AugmentOptions& opts,
                    Rng& rng) {
  if (!opts.enabled()) return;
  if (shape.size() != 3) throw ShapeError("augmentation needs C x H x W samples");
  const std::size_t c = shape[0], h = shape[1], w = shape[2];
  const std::vector<double> src(sample.begin(), sample.end());
  const auto pad = static_cast<std::ptrdiff_t>(opts.crop_padding);
  const auto dy = static_cast<std::ptrdiff_t>(rng.below(2 * opts.crop_padding + 1)) - pad;
  const auto dx = static_cast<std::ptrdiff_t>(rng.below(2 * opts.crop_padding + 1)) - pad;
  const bool flip = opts.horizontal_flip && rng.below(2) == 1;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const std::size_t jj = flip ? w - 1 - j : j;
        const auto si = static_cast<std::ptrdiff_t>(i) + dy;
        const auto sj = static_cast<std::ptrdiff_t>(jj) + dx;
        const bool inside = si >= 0 && sj >= 0 && si < static_cast<std::ptrdiff_t>(h) &&
                            sj < static_cast<std::ptrdiff_t>(w);
        sample[(ch * h + i) * w + j] =
            inside ? src[(ch * h + static_cast<std::size_t>(si)) * w + static_cast<std::size_t>(sj)]
                   : 0.0;
      }
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::string_view stage,
                                     std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed, std::string("shuffle/") + std::string(stage), {epoch});
  rng.shuffle(order.begin(), order.end());
  return order;
}

Tensor augmented_batch(const Dataset& data, std::span<const std::size_t> indices,
                       const AugmentOptions& opts, std::uint64_t seed, std::string_view stage,
                       std::uint64_t epoch) {
  Tensor x = data.batch(indices);
  if (!opts.enabled()) return x;
  const std::size_t s = data.sample_size();
  const std::string stream = std::string("augment/") + std::string(stage);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    Rng rng(seed, stream, {epoch, indices[b]});
    augment_sample(x.data().subspan(b * s, s), data.sample_shape, opts, rng);
  }
  return x;
}

}  // namespace kesi
