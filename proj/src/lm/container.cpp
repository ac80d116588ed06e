// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/lm/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

#include "wmlab/error.hpp"
#include "wmlab/tensor.hpp"

namespace wmlab::lm {

static_assert(std::endian::native == std::endian::little, "DWMF I/O assumes a little-endian host");

uint64_t dtype_byte_length(const std::string& dtype, int64_t numel) {
  if (dtype == "f32") return static_cast<uint64_t>(numel) * 4;
  if (dtype == "f64") return static_cast<uint64_t>(numel) * 8;
  if (dtype == "b1") return static_cast<uint64_t>(numel + 7) / 8;
  throw FormatError(fmt::format("unknown dtype '{}'", dtype));
}

void write_container(const std::filesystem::path& path, const Container& container) {
  nlohmann::json header = container.header;
  nlohmann::json tensors = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& e : container.entries) {
    tensors.push_back({{"name", e.name},
                       {"shape", e.shape},
                       {"dtype", e.dtype},
                       {"offset", offset},
                       {"length", e.bytes.size()}});
    offset += e.bytes.size();
  }
  header["tensors"] = std::move(tensors);
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot write '{}'", path.string()));
    out.write(kContainerMagic, 4);
    out.put(static_cast<char>(kContainerVersion));
    const uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : container.entries) {
      out.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    }
    if (!out) throw IoError(fmt::format("short write to '{}'", path.string()));
  }
  std::filesystem::rename(tmp, path);
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read '{}'", path.string()));
  const std::vector<uint8_t> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (raw.size() < 13) throw FormatError(fmt::format("'{}' is truncated (no DWMF preamble)", path.string()));
  if (std::memcmp(raw.data(), kContainerMagic, 4) != 0) {
    throw FormatError(fmt::format("'{}' has bad magic bytes", path.string()));
  }
  if (raw[4] != kContainerVersion) {
    throw FormatError(fmt::format("'{}' has unsupported version {}", path.string(), raw[4]));
  }
  uint64_t header_len = 0;
  std::memcpy(&header_len, raw.data() + 5, 8);
  if (header_len > raw.size() - 13) throw FormatError(fmt::format("'{}' is truncated inside the header", path.string()));

  Container c;
  try {
    c.header = nlohmann::json::parse(raw.begin() + 13, raw.begin() + 13 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("'{}' header is not valid JSON: {}", path.string(), e.what()));
  }
  if (!c.header.is_object() || !c.header.contains("tensors") || !c.header["tensors"].is_array()) {
    throw FormatError(fmt::format("'{}' header lacks a tensor table", path.string()));
  }

  const uint64_t data_start = 13 + header_len;
  const uint64_t data_size = raw.size() - data_start;
  try {
    for (const auto& t : c.header["tensors"]) {
      ContainerEntry e;
      e.name = t.at("name").get<std::string>();
      e.shape = t.at("shape").get<std::vector<int64_t>>();
      e.dtype = t.at("dtype").get<std::string>();
      const uint64_t offset = t.at("offset").get<uint64_t>();
      const uint64_t length = t.at("length").get<uint64_t>();
      const uint64_t expected = dtype_byte_length(e.dtype, shape_numel(e.shape));
      if (length != expected) {
        throw LengthError(fmt::format("tensor '{}' declares {} bytes but shape {} of {} needs {}", e.name, length,
                                      shape_string(e.shape), e.dtype, expected));
      }
      if (offset > data_size || length > data_size - offset) {
        throw FormatError(fmt::format("'{}' is truncated inside tensor '{}'", path.string(), e.name));
      }
      e.bytes.assign(raw.begin() + static_cast<std::ptrdiff_t>(data_start + offset),
                     raw.begin() + static_cast<std::ptrdiff_t>(data_start + offset + length));
      c.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("'{}' tensor table is malformed: {}", path.string(), e.what()));
  }
  c.header.erase("tensors");
  return c;
}

std::vector<uint8_t> pack_f32(const std::vector<float>& v) {
  std::vector<uint8_t> b(v.size() * 4);
  std::memcpy(b.data(), v.data(), b.size());
  return b;
}

std::vector<float> unpack_f32(const std::vector<uint8_t>& b) {
  std::vector<float> v(b.size() / 4);
  std::memcpy(v.data(), b.data(), v.size() * 4);
  return v;
}

std::vector<uint8_t> pack_f64(const std::vector<double>& v) {
  std::vector<uint8_t> b(v.size() * 8);
  std::memcpy(b.data(), v.data(), b.size());
  return b;
}

std::vector<double> unpack_f64(const std::vector<uint8_t>& b) {
  std::vector<double> v(b.size() / 8);
  std::memcpy(v.data(), b.data(), v.size() * 8);
  return v;
}

std::vector<uint8_t> pack_bits(const std::vector<uint8_t>& flags) {
  std::vector<uint8_t> b((flags.size() + 7) / 8, 0);
  for (size_t i = 0; i < flags.size(); ++i) {
    if (flags[i]) b[i / 8] |= static_cast<uint8_t>(1u << (i % 8));
  }
  return b;
}

std::vector<uint8_t> unpack_bits(const std::vector<uint8_t>& b, int64_t numel) {
  std::vector<uint8_t> flags(static_cast<size_t>(numel));
  for (size_t i = 0; i < flags.size(); ++i) flags[i] = (b[i / 8] >> (i % 8)) & 1u;
  return flags;
}

}  // namespace wmlab::lm
