#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "loraxs/matrix.hpp"

namespace loraxs {

using Digest = std::array<std::uint8_t, 32>;

Digest sha256(std::span<const std::uint8_t> bytes);

// Incremental SHA-256.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(std::span<const std::uint8_t> bytes);
    void update(const Matrix& m);
    Digest finish();

private:
    void* ctx_;
};

// SHA-256 over the canonical little-endian f64 bytes of the entries, row-major.
Digest matrix_digest(const Matrix& m);

std::string to_hex(const Digest& d);
// Throws FormatError unless `hex` is exactly 64 hex digits.
Digest digest_from_hex(std::string_view hex);

// Little-endian encoding helpers shared by the binary codecs.
void append_f64_le(std::vector<std::uint8_t>& out, double v);
void append_f32_le(std::vector<std::uint8_t>& out, float v);
void append_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v);
void append_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v);
double read_f64_le(const std::uint8_t* p) noexcept;
float read_f32_le(const std::uint8_t* p) noexcept;
std::uint32_t read_u32_le(const std::uint8_t* p) noexcept;
std::uint64_t read_u64_le(const std::uint8_t* p) noexcept;

}  // namespace loraxs
