#include "loraxs/digest.hpp"

#include <bit>
#include <cstring>

#include <fmt/format.h>
#include <openssl/evp.h>

#include "loraxs/errors.hpp"

namespace loraxs {

namespace {
EVP_MD_CTX* as_ctx(void* p) { return static_cast<EVP_MD_CTX*>(p); }
}  // namespace

Sha256::Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (ctx_ == nullptr || EVP_DigestInit_ex(as_ctx(ctx_), EVP_sha256(), nullptr) != 1) {
        throw Error("failed to initialise SHA-256 context");
    }
}

Sha256::~Sha256() { EVP_MD_CTX_free(as_ctx(ctx_)); }

void Sha256::update(std::span<const std::uint8_t> bytes) {
    if (!bytes.empty()) EVP_DigestUpdate(as_ctx(ctx_), bytes.data(), bytes.size());
}

void Sha256::update(const Matrix& m) {
    std::vector<std::uint8_t> buf;
    buf.reserve(m.size() * 8);
    for (double v : m.data()) append_f64_le(buf, v);
    update(buf);
}

Digest Sha256::finish() {
    Digest d{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(as_ctx(ctx_), d.data(), &len);
    return d;
}

Digest sha256(std::span<const std::uint8_t> bytes) {
    Sha256 h;
    h.update(bytes);
    return h.finish();
}

Digest matrix_digest(const Matrix& m) {
    Sha256 h;
    h.update(m);
    return h.finish();
}

std::string to_hex(const Digest& d) {
    std::string out;
    out.reserve(64);
    for (auto b : d) out += fmt::format("{:02x}", b);
    return out;
}

Digest digest_from_hex(std::string_view hex) {
    if (hex.size() != 64) throw FormatError(fmt::format("digest must be 64 hex digits, got {}", hex.size()));
    auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        return -1;
    };
    Digest d{};
    for (std::size_t i = 0; i < 32; ++i) {
        const int hi = nibble(hex[2 * i]);
        const int lo = nibble(hex[2 * i + 1]);
        if (hi < 0 || lo < 0) throw FormatError("digest contains a non-hex character");
        d[i] = static_cast<std::uint8_t>(hi * 16 + lo);
    }
    return d;
}

void append_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void append_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void append_f64_le(std::vector<std::uint8_t>& out, double v) { append_u64_le(out, std::bit_cast<std::uint64_t>(v)); }

void append_f32_le(std::vector<std::uint8_t>& out, float v) { append_u32_le(out, std::bit_cast<std::uint32_t>(v)); }

std::uint64_t read_u64_le(const std::uint8_t* p) noexcept {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::uint32_t read_u32_le(const std::uint8_t* p) noexcept {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

double read_f64_le(const std::uint8_t* p) noexcept { return std::bit_cast<double>(read_u64_le(p)); }

float read_f32_le(const std::uint8_t* p) noexcept { return std::bit_cast<float>(read_u32_le(p)); }

}  // namespace loraxs
