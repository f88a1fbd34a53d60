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
#include <string>
#include <string_view>

#include "kesi/model.hpp"

namespace kesi {

// Snapshot file layout (all integers little-endian):
//
//   bytes 0..7    magic "KESISNAP"
//   bytes 8..11   u32 format version
//   bytes 12..19  u64 header length H
//   H bytes       text header: input shape, meta, graph, tensor directory
//   payload       per parameter: f64 values then u8 mask entries;
//                 per buffer: f64 values
//
// Doubles are stored as raw IEEE-754 bits, so round trips are bit-exact.
inline constexpr std::string_view kSnapshotMagic = "KESISNAP";
inline constexpr std::uint32_t kSnapshotVersion = 1;

std::string encode_snapshot(const ModelSnapshot& model);
// Throws FormatError (with byte offset) on corrupt or truncated input.
ModelSnapshot decode_snapshot(std::string_view bytes);

void save_snapshot(const ModelSnapshot& model, const std::filesystem::path& path);
ModelSnapshot load_snapshot(const std::filesystem::path& path);

}  // namespace kesi
