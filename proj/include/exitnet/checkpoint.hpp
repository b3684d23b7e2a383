#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "exitnet/tensor.hpp"

namespace exitnet {

// Binary weight snapshot. Layout, all little-endian:
//   "XNCK" | u32 version | u64 config_hash | u64 record count
//   per record: u32 path length | path bytes | u32 ndim | u64 dims... | f64 data
void save_checkpoint(const std::string& file, std::uint64_t config_hash,
                     const std::vector<std::pair<std::string, Tensor>>& params);

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::vector<std::pair<std::string, Tensor>> params;
};

// Throws FormatError, with the byte offset, on any structural problem.
Checkpoint load_checkpoint(const std::string& file);

// Same, but also requires the stored config hash to match.
Checkpoint load_checkpoint(const std::string& file, std::uint64_t expected_config_hash);

}  // namespace exitnet
