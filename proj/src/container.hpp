#pragma once

// Framing shared by the LXSW (tensor bundle) and LXSC (checkpoint) formats.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "loraxs/digest.hpp"

namespace loraxs::detail {

inline constexpr std::size_t kHeaderBytes = 16;  // magic + version + metadata length
inline constexpr std::size_t kTrailerBytes = 32;

std::vector<std::uint8_t> encode_container(std::string_view magic, std::uint32_t version,
                                           const nlohmann::json& metadata, std::span<const std::uint8_t> payload);

struct Container {
    std::uint32_t version = 0;
    nlohmann::json metadata;
    std::span<const std::uint8_t> payload;
    std::size_t payload_offset = 0;  // file offset of the first payload byte
    Digest stored_checksum{};
};

// Checks framing and parses metadata. Does not verify the checksum.
Container decode_container(std::span<const std::uint8_t> bytes, std::string_view magic, std::uint32_t max_version);

}  // namespace loraxs::detail
