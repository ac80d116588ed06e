// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// DWMF binary container:
//   "DWMF" | version byte 0x01 | u64 LE header length | UTF-8 JSON header |
//   raw little-endian tensor data in header order.
// The header lists (name, shape, dtype, offset, length) per tensor, offsets
// relative to the start of the data section. Used for model checkpoints,
// KTH keys (f64) and CTV masks (bit-packed "b1").

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace wmlab::lm {

inline constexpr char kContainerMagic[4] = {'D', 'W', 'M', 'F'};
inline constexpr uint8_t kContainerVersion = 0x01;

struct ContainerEntry {
  std::string name;
  std::vector<int64_t> shape;
  std::string dtype;  // "f32", "f64" or "b1"
  std::vector<uint8_t> bytes;
};

struct Container {
  nlohmann::json header = nlohmann::json::object();  // everything except "tensors"
  std::vector<ContainerEntry> entries;
};

// Bytes a tensor of `numel` elements occupies for a dtype.
uint64_t dtype_byte_length(const std::string& dtype, int64_t numel);

void write_container(const std::filesystem::path& path, const Container& container);
// Throws IoError, FormatError (magic/version/header/truncation) or
// LengthError (declared byte length disagrees with shape and dtype).
Container read_container(const std::filesystem::path& path);

std::vector<uint8_t> pack_f32(const std::vector<float>& v);
std::vector<float> unpack_f32(const std::vector<uint8_t>& b);
std::vector<uint8_t> pack_f64(const std::vector<double>& v);
std::vector<double> unpack_f64(const std::vector<uint8_t>& b);
// LSB-first bit packing.
std::vector<uint8_t> pack_bits(const std::vector<uint8_t>& flags);
std::vector<uint8_t> unpack_bits(const std::vector<uint8_t>& b, int64_t numel);

}  // namespace wmlab::lm
