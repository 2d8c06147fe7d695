#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "loraxs/matrix.hpp"

namespace loraxs {

// Named f64 matrices in one file:
//   "LXSW" | u32 version | u64 metadata length | JSON metadata |
//   row-major little-endian f64 payload | SHA-256 of payload
// The metadata lists each tensor's name, shape and payload offset.
using TensorBundle = std::map<std::string, Matrix>;

inline constexpr std::uint32_t kBundleFormatVersion = 1;

std::vector<std::uint8_t> encode_tensor_bundle(const TensorBundle& tensors);
TensorBundle decode_tensor_bundle(std::span<const std::uint8_t> bytes);

void save_tensor_bundle(const TensorBundle& tensors, const std::filesystem::path& path);
TensorBundle load_tensor_bundle(const std::filesystem::path& path);

// Reads either a bundle holding exactly one tensor or a whitespace text matrix.
Matrix load_matrix_file(const std::filesystem::path& path);

// Writes through a temporary sibling file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace loraxs
