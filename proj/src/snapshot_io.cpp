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

#include "kesi/snapshot_io.hpp"

#include <bit>
#include <charconv>
#include <fstream>
#include <sstream>

#include "kesi/errors.hpp"

namespace kesi {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string join_shape(const Shape& shape) {
  if (shape.empty()) return "-";
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(shape[i]);
  }
  return s;
}

void require_token(std::string_view what, const std::string& value) {
  if (value.empty() || value.find_first_of(" \t\r\n") != std::string::npos) {
    throw ParameterError(std::string(what) + " '" + value +
                         "' must be non-empty and free of whitespace");
  }
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return bytes_.size() - pos_; }

  std::string_view take(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw FormatError(std::string("truncated snapshot while reading ") + what, pos_);
    }
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::uint64_t u64(const char* what) {
    auto s = take(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[i]);
    return v;
  }

  std::uint32_t u32(const char* what) {
    auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[i]);
    return v;
  }

 private:
  std::string_view bytes_;
  std::uint64_t pos_ = 0;
};

// Line-oriented parser over the text header that reports absolute offsets.
class HeaderParser {
 public:
  HeaderParser(std::string_view text, std::uint64_t base) : text_(text), base_(base) {}

  std::istringstream line(std::string_view expected_key) {
    if (pos_ >= text_.size()) fail("header ended early, expected '" + std::string(expected_key) + "'");
    line_start_ = pos_;
    auto nl = text_.find('\n', pos_);
    if (nl == std::string_view::npos) nl = text_.size();
    std::string content(text_.substr(pos_, nl - pos_));
    pos_ = nl + 1;
    std::istringstream in(content);
    std::string key;
    in >> key;
    if (key != expected_key) fail("expected '" + std::string(expected_key) + "', found '" + key + "'");
    return in;
  }

  [[noreturn]] void fail(const std::string& why) const {
    throw FormatError("bad snapshot header: " + why, base_ + line_start_);
  }

  template <typename T>
  T value(std::istringstream& in, const char* what) {
    T v{};
    if (!(in >> v)) fail(std::string("cannot parse ") + what);
    return v;
  }

  double real(std::istringstream& in, const char* what) {
    std::string token = value<std::string>(in, what);
    double v = 0;
    auto [end, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
    if (ec != std::errc{} || end != token.data() + token.size()) {
      fail(std::string("cannot parse ") + what);
    }
    return v;
  }

  Shape shape(std::istringstream& in, const char* what) {
    std::string token = value<std::string>(in, what);
    Shape s;
    if (token == "-") return s;
    std::size_t start = 0;
    while (start <= token.size()) {
      auto comma = token.find(',', start);
      if (comma == std::string::npos) comma = token.size();
      std::size_t d = 0;
      auto [end, ec] = std::from_chars(token.data() + start, token.data() + comma, d);
      if (ec != std::errc{} || end != token.data() + comma) fail(std::string("bad shape for ") + what);
      s.push_back(d);
      start = comma + 1;
    }
    return s;
  }

  bool done() const { return pos_ >= text_.size(); }

 private:
  std::string_view text_;
  std::uint64_t base_;
  std::size_t pos_ = 0;
  std::size_t line_start_ = 0;
};

std::string encode_layer(const LayerSpec& l) {
  std::string inputs;
  for (std::size_t i = 0; i < l.inputs.size(); ++i) {
    if (i) inputs += ',';
    inputs += std::to_string(l.inputs[i]);
  }
  std::ostringstream s;
  s << "layer " << to_string(l.kind) << ' ' << l.name << ' ' << (inputs.empty() ? "-" : inputs)
    << ' ' << l.in << ' ' << l.out << ' ' << l.kernel << ' ' << l.stride << ' ' << l.padding
    << ' ' << (l.prunable ? 1 : 0) << '\n';
  return s.str();
}

}  // namespace

std::string encode_snapshot(const ModelSnapshot& model) {
  const auto& meta = model.meta();
  require_token("schedule name", meta.schedule_name);
  std::ostringstream h;
  h << "input_shape " << join_shape(model.input_shape()) << '\n';
  h << "cycle_index " << meta.cycle_index << '\n';
  h << "schedule_name " << meta.schedule_name << '\n';
  h << "eval_accuracy " << format_double(meta.eval_accuracy) << '\n';
  h << "param_count " << meta.param_count << '\n';
  h << "mac_count " << meta.mac_count << '\n';
  h << "seed " << meta.seed << '\n';
  h << "layers " << model.graph().size() << '\n';
  for (const auto& l : model.graph()) {
    require_token("layer name", l.name);
    h << encode_layer(l);
  }
  h << "params " << model.params().size() << '\n';
  for (const auto& p : model.params()) {
    require_token("parameter name", p.name);
    h << "param " << p.name << ' ' << join_shape(p.value.shape()) << '\n';
  }
  h << "buffers " << model.buffers().size() << '\n';
  for (const auto& b : model.buffers()) {
    require_token("buffer name", b.name);
    h << "buffer " << b.name << ' ' << join_shape(b.value.shape()) << '\n';
  }
  const std::string header = h.str();

  std::string out(kSnapshotMagic);
  put_u32(out, kSnapshotVersion);
  put_u64(out, header.size());
  out += header;
  for (const auto& p : model.params()) {
    for (double v : p.value.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    for (auto bit : p.mask.bits()) out.push_back(static_cast<char>(bit));
  }
  for (const auto& b : model.buffers()) {
    for (double v : b.value.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

ModelSnapshot decode_snapshot(std::string_view bytes) {
  Reader r(bytes);
  if (bytes.size() < kSnapshotMagic.size()) {
    throw FormatError("file too short for snapshot magic", 0);
  }
  if (r.take(kSnapshotMagic.size(), "magic") != kSnapshotMagic) {
    throw FormatError("wrong magic bytes, not a snapshot file", 0);
  }
  const auto version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kSnapshotVersion) {
    throw FormatError("unsupported snapshot version " + std::to_string(version), version_at);
  }
  const auto header_len = r.u64("header length");
  const auto header_at = r.offset();
  const auto header = r.take(header_len, "header");
  HeaderParser hp(header, header_at);

  auto in = hp.line("input_shape");
  const Shape input_shape = hp.shape(in, "input_shape");
  SnapshotMeta meta;
  in = hp.line("cycle_index");
  meta.cycle_index = hp.value<int>(in, "cycle_index");
  in = hp.line("schedule_name");
  meta.schedule_name = hp.value<std::string>(in, "schedule_name");
  in = hp.line("eval_accuracy");
  meta.eval_accuracy = hp.real(in, "eval_accuracy");
  in = hp.line("param_count");
  meta.param_count = hp.value<std::int64_t>(in, "param_count");
  in = hp.line("mac_count");
  meta.mac_count = hp.value<std::int64_t>(in, "mac_count");
  in = hp.line("seed");
  meta.seed = hp.value<std::uint64_t>(in, "seed");

  in = hp.line("layers");
  const auto n_layers = hp.value<std::size_t>(in, "layer count");
  std::vector<LayerSpec> graph;
  for (std::size_t i = 0; i < n_layers; ++i) {
    in = hp.line("layer");
    LayerSpec l;
    try {
      l.kind = parse_layer_kind(hp.value<std::string>(in, "layer kind"));
    } catch (const ParameterError& e) {
      hp.fail(e.what());
    }
    l.name = hp.value<std::string>(in, "layer name");
    const auto inputs = hp.value<std::string>(in, "layer inputs");
    if (inputs != "-") {
      std::istringstream parts(inputs);
      std::string part;
      while (std::getline(parts, part, ',')) {
        int idx = 0;
        auto [end, ec] = std::from_chars(part.data(), part.data() + part.size(), idx);
        if (ec != std::errc{} || end != part.data() + part.size()) hp.fail("bad layer input list");
        l.inputs.push_back(idx);
      }
    }
    l.in = hp.value<std::size_t>(in, "layer in");
    l.out = hp.value<std::size_t>(in, "layer out");
    l.kernel = hp.value<std::size_t>(in, "layer kernel");
    l.stride = hp.value<std::size_t>(in, "layer stride");
    l.padding = hp.value<std::size_t>(in, "layer padding");
    l.prunable = hp.value<int>(in, "layer prunable") != 0;
    graph.push_back(std::move(l));
  }

  in = hp.line("params");
  const auto n_params = hp.value<std::size_t>(in, "param count");
  std::vector<std::pair<std::string, Shape>> param_dir;
  for (std::size_t i = 0; i < n_params; ++i) {
    in = hp.line("param");
    auto name = hp.value<std::string>(in, "param name");
    param_dir.emplace_back(std::move(name), hp.shape(in, "param shape"));
  }
  in = hp.line("buffers");
  const auto n_buffers = hp.value<std::size_t>(in, "buffer count");
  std::vector<std::pair<std::string, Shape>> buffer_dir;
  for (std::size_t i = 0; i < n_buffers; ++i) {
    in = hp.line("buffer");
    auto name = hp.value<std::string>(in, "buffer name");
    buffer_dir.emplace_back(std::move(name), hp.shape(in, "buffer shape"));
  }
  if (!hp.done()) hp.fail("unexpected trailing header content");

  const auto read_values = [&](const Shape& shape, const char* what) {
    std::vector<double> values(numel(shape));
    for (auto& v : values) v = std::bit_cast<double>(r.u64(what));
    return values;
  };

  std::vector<Parameter> params;
  for (auto& [name, shape] : param_dir) {
    auto values = read_values(shape, "parameter values");
    PruneMask mask(shape);
    const auto mask_at = r.offset();
    const auto raw = r.take(mask.size(), "mask");
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (raw[i] == 0) {
        mask.prune(i);
      } else if (raw[i] != 1) {
        throw FormatError("mask entry of '" + name + "' is not 0 or 1", mask_at + i);
      }
    }
    params.push_back({name, Tensor(shape, std::move(values), true), std::move(mask)});
  }
  std::vector<Buffer> buffers;
  for (auto& [name, shape] : buffer_dir) {
    buffers.push_back({name, Tensor(shape, read_values(shape, "buffer values"))});
  }
  if (r.remaining() != 0) {
    throw FormatError("unexpected trailing bytes after snapshot payload", r.offset());
  }

  try {
    return ModelSnapshot(std::move(graph), input_shape, std::move(params), std::move(buffers),
                         std::move(meta));
  } catch (const ShapeError& e) {
    throw FormatError(std::string("inconsistent snapshot: ") + e.what(), header_at);
  } catch (const ParameterError& e) {
    throw FormatError(std::string("inconsistent snapshot: ") + e.what(), header_at);
  }
}

void save_snapshot(const ModelSnapshot& model, const std::filesystem::path& path) {
  const std::string bytes = encode_snapshot(model);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RunError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RunError("failed writing snapshot to '" + path.string() + "'");
}

ModelSnapshot load_snapshot(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RunError("cannot open snapshot '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_snapshot(buf.str());
}

}  // namespace kesi
