#include "loraxs/tensor_io.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>

#include <fmt/format.h>
#include <unistd.h>

#include "container.hpp"
#include "loraxs/errors.hpp"

namespace loraxs {

namespace detail {

std::vector<std::uint8_t> encode_container(std::string_view magic, std::uint32_t version,
                                           const nlohmann::json& metadata, std::span<const std::uint8_t> payload) {
    const std::string meta = metadata.dump();
    std::vector<std::uint8_t> out;
    out.reserve(kHeaderBytes + meta.size() + payload.size() + kTrailerBytes);
    out.insert(out.end(), magic.begin(), magic.end());
    append_u32_le(out, version);
    append_u64_le(out, meta.size());
    out.insert(out.end(), meta.begin(), meta.end());
    out.insert(out.end(), payload.begin(), payload.end());
    const Digest d = sha256(payload);
    out.insert(out.end(), d.begin(), d.end());
    return out;
}

Container decode_container(std::span<const std::uint8_t> bytes, std::string_view magic, std::uint32_t max_version) {
    if (bytes.size() < kHeaderBytes + kTrailerBytes) {
        throw FormatError(fmt::format("file truncated: {} bytes is shorter than the fixed framing", bytes.size()));
    }
    if (!std::equal(magic.begin(), magic.end(), bytes.begin())) {
        throw FormatError(fmt::format("bad magic: expected '{}'", magic));
    }
    Container c;
    c.version = read_u32_le(bytes.data() + 4);
    if (c.version == 0 || c.version > max_version) {
        throw FormatError(fmt::format("unsupported format version {} (supported up to {})", c.version, max_version));
    }
    const std::uint64_t meta_len = read_u64_le(bytes.data() + 8);
    if (meta_len > bytes.size() - kHeaderBytes - kTrailerBytes) {
        throw FormatError(fmt::format("file truncated: metadata length {} exceeds remaining {} bytes", meta_len,
                                      bytes.size() - kHeaderBytes - kTrailerBytes));
    }
    const auto* meta_begin = reinterpret_cast<const char*>(bytes.data() + kHeaderBytes);
    try {
        c.metadata = nlohmann::json::parse(meta_begin, meta_begin + meta_len);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(fmt::format("metadata is not valid JSON: {}", e.what()));
    }
    if (!c.metadata.is_object()) throw FormatError("metadata must be a JSON object");
    c.payload_offset = kHeaderBytes + meta_len;
    const std::size_t payload_len = bytes.size() - c.payload_offset - kTrailerBytes;
    c.payload = bytes.subspan(c.payload_offset, payload_len);
    std::copy_n(bytes.end() - kTrailerBytes, kTrailerBytes, c.stored_checksum.begin());
    return c;
}

}  // namespace detail

std::vector<std::uint8_t> encode_tensor_bundle(const TensorBundle& tensors) {
    if (tensors.empty()) throw ParameterError("tensor bundle must hold at least one tensor");
    nlohmann::json meta;
    meta["format_version"] = kBundleFormatVersion;
    meta["dtype"] = "f64";
    auto& list = meta["tensors"] = nlohmann::json::array();
    std::vector<std::uint8_t> payload;
    for (const auto& [name, m] : tensors) {
        const std::size_t offset = payload.size();
        for (double v : m.data()) append_f64_le(payload, v);
        list.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset},
                        {"length", payload.size() - offset}});
    }
    return detail::encode_container("LXSW", kBundleFormatVersion, meta, payload);
}

TensorBundle decode_tensor_bundle(std::span<const std::uint8_t> bytes) {
    const auto c = detail::decode_container(bytes, "LXSW", kBundleFormatVersion);
    if (sha256(c.payload) != c.stored_checksum) {
        throw IntegrityError(fmt::format("tensor bundle checksum mismatch over payload at byte offset {}",
                                         c.payload_offset),
                             c.payload_offset);
    }
    TensorBundle out;
    try {
        if (c.metadata.at("dtype").get<std::string>() != "f64") throw FormatError("tensor bundle dtype must be f64");
        std::size_t expected_offset = 0;
        for (const auto& t : c.metadata.at("tensors")) {
            const auto name = t.at("name").get<std::string>();
            const auto rows = t.at("rows").get<std::size_t>();
            const auto cols = t.at("cols").get<std::size_t>();
            const auto offset = t.at("offset").get<std::size_t>();
            const auto length = t.at("length").get<std::size_t>();
            if (rows == 0 || cols == 0 || length != rows * cols * 8 || offset != expected_offset ||
                offset + length > c.payload.size()) {
                throw FormatError(fmt::format("tensor '{}' has an inconsistent layout", name));
            }
            std::vector<double> data(rows * cols);
            for (std::size_t i = 0; i < data.size(); ++i) data[i] = read_f64_le(c.payload.data() + offset + 8 * i);
            if (!out.emplace(name, Matrix(rows, cols, std::move(data))).second) {
                throw FormatError(fmt::format("duplicate tensor name '{}'", name));
            }
            expected_offset = offset + length;
        }
        if (expected_offset != c.payload.size()) throw FormatError("payload length disagrees with metadata");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(fmt::format("malformed tensor bundle metadata: {}", e.what()));
    }
    if (out.empty()) throw FormatError("tensor bundle holds no tensors");
    return out;
}

void save_tensor_bundle(const TensorBundle& tensors, const std::filesystem::path& path) {
    write_file_atomic(path, encode_tensor_bundle(tensors));
}

TensorBundle load_tensor_bundle(const std::filesystem::path& path) { return decode_tensor_bundle(read_file_bytes(path)); }

Matrix load_matrix_file(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, "LXSW")) {
        auto bundle = decode_tensor_bundle(bytes);
        if (bundle.size() != 1) {
            throw FormatError(fmt::format("'{}' holds {} tensors, expected one", path.string(), bundle.size()));
        }
        return std::move(bundle.begin()->second);
    }
    return read_matrix_text_file(path.string());
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    static std::atomic<unsigned> counter{0};
    auto tmp = path;
    tmp += fmt::format(".tmp-{}-{}", ::getpid(), counter++);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError(fmt::format("cannot open '{}' for writing", tmp.string()));
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            std::error_code ignored;
            std::filesystem::remove(tmp, ignored);
            throw IoError(fmt::format("write to '{}' failed", tmp.string()));
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError(fmt::format("cannot move checkpoint into '{}'", path.string()));
    }
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError(fmt::format("cannot open '{}'", path.string()));
    const auto size = static_cast<std::size_t>(in.tellg());
    std::vector<std::uint8_t> bytes(size);
    in.seekg(0);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    if (!in) throw IoError(fmt::format("read of '{}' failed", path.string()));
    return bytes;
}

}  // namespace loraxs
