// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/lm/checkpoint.hpp"

#include <fmt/format.h>

#include "wmlab/error.hpp"
#include "wmlab/lm/container.hpp"

namespace wmlab::lm {

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  params.validate();
  Container c;
  c.header["kind"] = "model";
  c.header["config"] = to_json(params.config);
  c.header["seed"] = params.metadata.contains("seed") ? params.metadata["seed"] : nlohmann::json(nullptr);
  c.header["metadata"] = params.metadata;
  for (const auto& spec : tensor_specs(params.config)) {
    c.entries.push_back({spec.name, spec.shape, "f32", pack_f32(params.at(spec.name).data)});
  }
  write_container(path, c);
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.header.value("kind", std::string()) != "model") {
    throw FormatError(fmt::format("'{}' is not a model checkpoint", path.string()));
  }
  ModelParams p;
  try {
    p.config = config_from_json(c.header.at("config"));
  } catch (const ConfigError& e) {
    throw FormatError(fmt::format("'{}' has an invalid config: {}", path.string(), e.what()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("'{}' has no config: {}", path.string(), e.what()));
  }
  p.metadata = c.header.value("metadata", nlohmann::json::object());
  for (auto& e : c.entries) {
    if (e.dtype != "f32") throw FormatError(fmt::format("tensor '{}' has dtype {}, expected f32", e.name, e.dtype));
    Tensor t;
    t.shape = e.shape;
    t.data = unpack_f32(e.bytes);
    if (!p.tensors.emplace(e.name, std::move(t)).second) {
      throw FormatError(fmt::format("duplicate tensor '{}'", e.name));
    }
  }
  p.validate();
  return p;
}

}  // namespace wmlab::lm
