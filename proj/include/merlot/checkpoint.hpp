#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "merlot/tensor.hpp"

namespace merlot::harness {

struct MagicMismatchError : IoError {
  using IoError::IoError;
};
struct VersionMismatchError : IoError {
  using IoError::IoError;
};
struct TruncationError : IoError {
  using IoError::IoError;
};
struct CrcMismatchError : IoError {
  using IoError::IoError;
};

// Checkpoint file: magic MRLT | u32 version = 1 | length-prefixed UTF-8 config
// echo | u32 array count | per array: length-prefixed name, u32 rank, u64 dims,
// float64 little-endian payload | trailing CRC32 of everything after the magic.
struct Checkpoint {
  std::uint32_t version = 1;
  std::string config_echo;
  std::vector<std::pair<std::string, Tensor>> arrays;

  void add(const std::string& name, Tensor value) { arrays.emplace_back(name, std::move(value)); }
  const Tensor* find(const std::string& name) const;
  const Tensor& require(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

std::uint32_t crc32(const unsigned char* data, std::size_t size);

}  // namespace merlot::harness
