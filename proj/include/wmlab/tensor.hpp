// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace wmlab {

// Dense row-major float tensor. Rank 1 or 2 in practice; 2-D weights follow
// the [out_features, in_features] convention.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape_, float fill = 0.0f);

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t rows() const { return shape.empty() ? 0 : shape.front(); }
  // Row length; for rank-1 tensors the whole vector is one row.
  int64_t cols() const { return shape.size() < 2 ? numel() : shape.back(); }
  int rank() const { return static_cast<int>(shape.size()); }

  std::span<float> row(int64_t r) { return {data.data() + r * cols(), static_cast<size_t>(cols())}; }
  std::span<const float> row(int64_t r) const {
    return {data.data() + r * cols(), static_cast<size_t>(cols())};
  }

  bool all_finite() const;
  bool operator==(const Tensor&) const = default;
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_string(const std::vector<int64_t>& shape);

}  // namespace wmlab
