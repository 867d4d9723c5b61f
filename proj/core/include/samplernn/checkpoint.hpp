#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "samplernn/tensor.hpp"

namespace samplernn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  DType dtype = DType::kFloat32;
  Shape shape;
  std::vector<double> values;  // exact for both stored dtypes
};

/// Named-tensor container written as: "SRNN" | version u32 | metadata length
/// u32 + key=value lines | tensor count u32 | per tensor: name length u16 +
/// name, dtype u8, ndim u8, dims u32..., raw values. All little-endian.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<CheckpointTensor> tensors;

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  /// Raises CheckpointError(kMetadata) when missing.
  const std::string& get(const std::string& key) const;

  const CheckpointTensor* find(const std::string& name) const;
  /// Raises CheckpointError(kMissingTensor) when missing.
  const CheckpointTensor& tensor(const std::string& name) const;

  template <typename T>
  void add(const std::string& name, const Tensor<T>& t) {
    add(name, kDTypeOf<T>, t.shape(), t.values());
  }
  template <typename T>
  void add(const std::string& name, DType dtype, Shape shape, std::span<const T> values) {
    tensors.push_back({name, dtype, std::move(shape), std::vector<double>(values.begin(), values.end())});
  }

  /// Copies a stored tensor into `dst`, checking its shape.
  template <typename T>
  void restore(const std::string& name, Tensor<T>& dst) const;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Writes atomically through a temporary file in the same directory.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace samplernn
