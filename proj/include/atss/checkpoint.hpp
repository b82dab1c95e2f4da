// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Binary checkpoint format shared by the embedder and the separator.
// Layout (all integers little-endian):
//   magic   "ATSS" (4 bytes)
//   version u32 (currently 1)
//   config  u32 length + UTF-8 key=value snapshot
//   count   u32 tensor count
//   tensor  u16 name length + UTF-8 name, u8 ndim, u32 dims..., f32 data
//           (row-major)
// The tensor name table is part of the contract; see the README.

#ifndef ATSS_CHECKPOINT_HPP_
#define ATSS_CHECKPOINT_HPP_

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "atss/tensor.hpp"

namespace atss {

inline constexpr uint32_t kCheckpointVersion = 1;

struct TensorEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct CheckpointData {
  uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::vector<TensorEntry> tensors;

  const TensorEntry* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

void save_checkpoint(
    const std::string& path, const std::string& config_text,
    const std::vector<std::pair<std::string, Tensor<float>>>& named);

CheckpointData load_checkpoint(const std::string& path);

// Copies every named tensor of a model from the checkpoint, bitwise.
// Missing names or shape mismatches raise DataError.
void load_into(const CheckpointData& ckpt,
               std::vector<std::pair<std::string, Tensor<float>>> named);

}  // namespace atss

#endif  // ATSS_CHECKPOINT_HPP_
