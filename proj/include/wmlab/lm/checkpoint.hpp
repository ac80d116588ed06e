// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>

#include "wmlab/lm/params.hpp"

namespace wmlab::lm {

// Writes a DWMF checkpoint: header carries the config, init seed and the
// params' metadata (lineage); tensors are f32 in canonical order.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);

// Bit-exact inverse of save_checkpoint. Throws FormatError/LengthError from
// the container layer and ShapeError when tensors disagree with the
// embedded config.
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace wmlab::lm
