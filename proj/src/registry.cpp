#include "loraxs/registry.hpp"

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <limits>
#include <set>

#include <fcntl.h>
#include <fmt/format.h>
#include <unistd.h>

#include "container.hpp"
#include "loraxs/errors.hpp"
#include "loraxs/tensor_io.hpp"

namespace loraxs {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double round_to_dtype(double v, StorageDtype dtype, const std::string& module) {
    if (!std::isfinite(v)) throw SerializationError(fmt::format("module '{}': latent has a non-finite entry", module));
    if (dtype == StorageDtype::f64) return v;
    if (std::abs(v) > static_cast<double>(std::numeric_limits<float>::max())) {
        throw SerializationError(fmt::format("module '{}': latent entry {} overflows f32", module, v));
    }
    return static_cast<double>(static_cast<float>(v));
}

void append_value(std::vector<std::uint8_t>& out, double v, StorageDtype dtype) {
    if (dtype == StorageDtype::f64) {
        append_f64_le(out, v);
    } else {
        append_f32_le(out, static_cast<float>(v));
    }
}

struct EncodedPayload {
    std::vector<std::uint8_t> bytes;
    json entries = json::array();
};

EncodedPayload encode_payload(const AdapterCheckpoint& ck) {
    EncodedPayload out;
    for (const auto& e : ck.entries) {
        if (e.r_latent.rows() != e.rank || e.r_latent.cols() != e.rank) {
            throw SerializationError(fmt::format("module '{}': latent {} is not {}x{}", e.module_name,
                                                 e.r_latent.shape_string(), e.rank, e.rank));
        }
        const std::size_t offset = out.bytes.size();
        for (double v : e.r_latent.data()) append_value(out.bytes, v, ck.storage_dtype);
        const std::size_t length = out.bytes.size() - offset;
        json j = {{"module_name", e.module_name},
                  {"rank", e.rank},
                  {"alpha", e.alpha},
                  {"init_kind", std::string(to_string(e.init_kind))},
                  {"svd_seed", e.svd_seed},
                  {"n_iter", e.n_iter},
                  {"sigma", e.sigma},
                  {"a_digest", to_hex(e.a_digest)},
                  {"b_digest", to_hex(e.b_digest)},
                  {"offset", offset},
                  {"length", length},
                  {"sha256", to_hex(sha256(std::span(out.bytes).subspan(offset, length)))}};
        if (ck.self_contained) {
            if (!e.a_embedded || !e.b_embedded) {
                throw SerializationError(fmt::format("module '{}': self-contained checkpoint lacks A/B", e.module_name));
            }
            for (const auto& [key, m] : {std::pair{"a", &*e.a_embedded}, std::pair{"b", &*e.b_embedded}}) {
                const std::size_t off = out.bytes.size();
                for (double v : m->data()) append_f64_le(out.bytes, v);
                j[fmt::format("{}_offset", key)] = off;
                j[fmt::format("{}_rows", key)] = m->rows();
                j[fmt::format("{}_cols", key)] = m->cols();
            }
        }
        out.entries.push_back(std::move(j));
    }
    return out;
}

json checkpoint_metadata(const AdapterCheckpoint& ck, json entries) {
    return json{{"format_version", ck.format_version},
                {"base_model_id", ck.base_model_id},
                {"storage_dtype", std::string(to_string(ck.storage_dtype))},
                {"self_contained", ck.self_contained},
                {"digest_algorithm", "sha256-le-f64"},
                {"scaling", "alpha/rank"},
                {"oversampling", "r+min(10,min(m,n)-r)"},
                {"entries", std::move(entries)}};
}

std::string utc_now() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    return fmt::format("{:04}-{:02}-{:02}T{:02}:{:02}:{:02}Z", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday, tm.tm_hour,
                       tm.tm_min, tm.tm_sec);
}

// Exclusive writer lock held for the lifetime of the object.
class RegistryLock {
public:
    explicit RegistryLock(const fs::path& root) : path_(root / ".lock") {
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) {
            if (errno == EEXIST) {
                throw StateError(fmt::format("registry '{}' is locked by another writer ({} exists)", root.string(),
                                             path_.string()));
            }
            throw IoError(fmt::format("cannot create lock '{}': {}", path_.string(), std::strerror(errno)));
        }
    }
    ~RegistryLock() {
        ::close(fd_);
        ::unlink(path_.c_str());
    }
    RegistryLock(const RegistryLock&) = delete;
    RegistryLock& operator=(const RegistryLock&) = delete;

private:
    fs::path path_;
    int fd_ = -1;
};

}  // namespace

std::string_view to_string(StorageDtype d) noexcept { return d == StorageDtype::f32 ? "f32" : "f64"; }

StorageDtype parse_dtype(std::string_view text) {
    if (text == "f32") return StorageDtype::f32;
    if (text == "f64") return StorageDtype::f64;
    throw ParameterError(fmt::format("unknown storage dtype '{}', expected f32 or f64", text));
}

std::size_t dtype_bytes(StorageDtype d) noexcept { return d == StorageDtype::f32 ? 4 : 8; }

const CheckpointEntry* AdapterCheckpoint::find(std::string_view module) const {
    for (const auto& e : entries)
        if (e.module_name == module) return &e;
    return nullptr;
}

AdapterCheckpoint make_checkpoint(const AdapterSet& adapters, const CheckpointMeta& meta) {
    if (adapters.empty()) throw ParameterError("a checkpoint needs at least one adapter");
    AdapterCheckpoint ck;
    ck.base_model_id = meta.base_model_id;
    ck.storage_dtype = meta.storage_dtype;
    ck.self_contained = meta.self_contained;
    for (const auto& [name, a] : adapters) {
        CheckpointEntry e;
        e.module_name = name;
        e.rank = a.rank();
        e.alpha = a.alpha();
        e.init_kind = a.init_kind();
        e.svd_seed = a.init_seed();
        e.n_iter = a.n_iter();
        e.sigma = a.sigma();
        e.a_digest = matrix_digest(a.a_frozen());
        e.b_digest = matrix_digest(a.b_frozen());
        e.r_latent = a.latent();
        for (auto& v : e.r_latent.data()) v = round_to_dtype(v, meta.storage_dtype, name);
        if (meta.self_contained) {
            e.a_embedded = a.a_frozen();
            e.b_embedded = a.b_frozen();
        }
        ck.entries.push_back(std::move(e));
    }
    ck.payload_checksum = sha256(encode_payload(ck).bytes);
    return ck;
}

std::vector<std::uint8_t> encode_checkpoint(const AdapterCheckpoint& ck) {
    if (ck.entries.empty()) throw SerializationError("checkpoint has no entries");
    auto payload = encode_payload(ck);
    return detail::encode_container("LXSC", ck.format_version, checkpoint_metadata(ck, std::move(payload.entries)),
                                    payload.bytes);
}

AdapterCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    const auto c = detail::decode_container(bytes, "LXSC", kCheckpointFormatVersion);
    AdapterCheckpoint ck;
    ck.format_version = c.version;
    const auto& payload = c.payload;
    struct Segment {
        std::size_t offset;
        std::size_t length;
        Digest digest;
    };
    std::vector<Segment> segments;
    try {
        const auto& meta = c.metadata;
        ck.base_model_id = meta.at("base_model_id").get<std::string>();
        ck.storage_dtype = parse_dtype(meta.at("storage_dtype").get<std::string>());
        ck.self_contained = meta.at("self_contained").get<bool>();
        const std::size_t width = dtype_bytes(ck.storage_dtype);
        std::size_t cursor = 0;
        for (const auto& j : meta.at("entries")) {
            CheckpointEntry e;
            e.module_name = j.at("module_name").get<std::string>();
            e.rank = j.at("rank").get<std::size_t>();
            e.alpha = j.at("alpha").get<double>();
            e.init_kind = parse_init_kind(j.at("init_kind").get<std::string>());
            e.svd_seed = j.at("svd_seed").get<std::uint64_t>();
            e.n_iter = j.at("n_iter").get<int>();
            e.sigma = j.at("sigma").get<double>();
            e.a_digest = digest_from_hex(j.at("a_digest").get<std::string>());
            e.b_digest = digest_from_hex(j.at("b_digest").get<std::string>());
            const auto offset = j.at("offset").get<std::size_t>();
            const auto length = j.at("length").get<std::size_t>();
            if (e.rank == 0 || offset != cursor || length != e.rank * e.rank * width || offset + length > payload.size()) {
                throw FormatError(fmt::format("module '{}': latent layout disagrees with rank {}", e.module_name, e.rank));
            }
            segments.push_back({offset, length, digest_from_hex(j.at("sha256").get<std::string>())});
            std::vector<double> values(e.rank * e.rank);
            for (std::size_t i = 0; i < values.size(); ++i) {
                const auto* p = payload.data() + offset + i * width;
                values[i] = ck.storage_dtype == StorageDtype::f64 ? read_f64_le(p) : static_cast<double>(read_f32_le(p));
            }
            e.r_latent = Matrix(e.rank, e.rank, std::move(values));
            cursor = offset + length;
            if (ck.self_contained) {
                for (auto [key, slot] : {std::pair{"a", &e.a_embedded}, std::pair{"b", &e.b_embedded}}) {
                    const auto off = j.at(fmt::format("{}_offset", key)).get<std::size_t>();
                    const auto rows = j.at(fmt::format("{}_rows", key)).get<std::size_t>();
                    const auto cols = j.at(fmt::format("{}_cols", key)).get<std::size_t>();
                    if (off != cursor || rows == 0 || cols == 0 || off + rows * cols * 8 > payload.size()) {
                        throw FormatError(fmt::format("module '{}': embedded {} layout is inconsistent", e.module_name, key));
                    }
                    std::vector<double> data(rows * cols);
                    for (std::size_t i = 0; i < data.size(); ++i) data[i] = read_f64_le(payload.data() + off + 8 * i);
                    *slot = Matrix(rows, cols, std::move(data));
                    cursor = off + rows * cols * 8;
                }
            }
            ck.entries.push_back(std::move(e));
        }
        if (cursor != payload.size()) {
            throw FormatError(fmt::format("payload holds {} bytes but metadata describes {}", payload.size(), cursor));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(fmt::format("malformed checkpoint metadata: {}", e.what()));
    } catch (const ParameterError& e) {
        throw FormatError(fmt::format("malformed checkpoint metadata: {}", e.what()));
    }
    if (ck.entries.empty()) throw FormatError("checkpoint holds no entries");

    ck.payload_checksum = sha256(payload);
    if (ck.payload_checksum != c.stored_checksum) {
        for (const auto& s : segments) {
            if (sha256(payload.subspan(s.offset, s.length)) != s.digest) {
                const std::size_t at = c.payload_offset + s.offset;
                throw IntegrityError(fmt::format("checksum mismatch: latent block at byte offset {} is corrupted", at), at);
            }
        }
        const std::size_t at = bytes.size() - detail::kTrailerBytes;
        throw IntegrityError(fmt::format("checksum mismatch: payload at byte offset {} does not match the checksum "
                                         "block at byte offset {}",
                                         c.payload_offset, at),
                             c.payload_offset);
    }
    return ck;
}

std::string save_checkpoint(const AdapterCheckpoint& checkpoint, const fs::path& path) {
    write_file_atomic(path, encode_checkpoint(checkpoint));
    return checkpoint.id();
}

std::string save_checkpoint(const AdapterSet& adapters, const CheckpointMeta& meta, const fs::path& path) {
    return save_checkpoint(make_checkpoint(adapters, meta), path);
}

AdapterCheckpoint load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file_bytes(path)); }

AdapterSet attach_checkpoint(const AdapterCheckpoint& checkpoint, const WeightSet& base) {
    std::vector<std::string> missing;
    for (const auto& e : checkpoint.entries)
        if (!base.contains(e.module_name)) missing.push_back(e.module_name);
    if (!missing.empty()) {
        throw MissingModuleError(fmt::format("base weights lack module(s): {}", fmt::join(missing, ", ")));
    }
    AdapterSet out;
    for (const auto& e : checkpoint.entries) {
        const Matrix& w = base.at(e.module_name);
        Matrix a;
        Matrix b;
        if (checkpoint.self_contained && e.a_embedded && e.b_embedded) {
            a = *e.a_embedded;
            b = *e.b_embedded;
            if (a.cols() != w.cols() || b.rows() != w.rows()) {
                throw BaseMismatchError(fmt::format("module '{}': embedded projections do not fit base weight {}",
                                                    e.module_name, w.shape_string()));
            }
        } else {
            if (e.rank > std::min(w.rows(), w.cols())) {
                throw BaseMismatchError(fmt::format("module '{}': rank {} does not fit base weight {}", e.module_name,
                                                    e.rank, w.shape_string()));
            }
            std::tie(a, b) = regenerate_projections(w, e.rank, e.init_kind, e.svd_seed, e.n_iter);
        }
        if (matrix_digest(a) != e.a_digest || matrix_digest(b) != e.b_digest) {
            throw BaseMismatchError(fmt::format(
                "module '{}': rebuilt projections do not match the checkpoint digests (wrong or altered base weights)",
                e.module_name));
        }
        out.emplace(e.module_name,
                    LoraXsAdapter(std::move(a), std::move(b), e.r_latent, e.alpha, e.init_kind, e.svd_seed, e.sigma, e.n_iter));
    }
    return out;
}

void warm_start(AdapterSet& targets, const AdapterCheckpoint& source) {
    std::vector<std::string> missing;
    for (const auto& [name, _] : targets)
        if (!source.find(name)) missing.push_back(name);
    for (const auto& e : source.entries)
        if (!targets.contains(e.module_name)) missing.push_back(e.module_name);
    if (!missing.empty()) {
        throw MissingModuleError(fmt::format("warm start: module sets differ on: {}", fmt::join(missing, ", ")));
    }
    for (const auto& [name, adapter] : targets) {
        const auto* e = source.find(name);
        if (e->rank != adapter.rank()) {
            throw RankMismatchError(fmt::format("warm start: module '{}' has source rank {} but target rank {}", name,
                                                e->rank, adapter.rank()));
        }
    }
    for (auto& [name, adapter] : targets) adapter.set_latent(source.find(name)->r_latent);
}

Registry::Registry(fs::path root) : root_(std::move(root)) {
    if (!fs::is_directory(root_)) throw IoError(fmt::format("registry root '{}' does not exist", root_.string()));
}

Registry Registry::create(const fs::path& root) {
    fs::create_directories(root / "checkpoints");
    Registry r(root);
    if (!fs::exists(r.manifest_path())) r.write_manifest(RegistryManifest{});
    return r;
}

RegistryManifest Registry::manifest() const {
    RegistryManifest m;
    if (!fs::exists(manifest_path())) return m;
    const auto bytes = read_file_bytes(manifest_path());
    try {
        const auto j = json::parse(bytes.begin(), bytes.end());
        m.manifest_version = j.at("manifest_version").get<std::uint32_t>();
        std::set<std::string> seen;
        for (const auto& e : j.at("entries")) {
            ManifestEntry me{e.at("checkpoint_id").get<std::string>(), e.at("path").get<std::string>(),
                             e.at("base_model_id").get<std::string>(), e.at("created_at").get<std::string>(),
                             e.at("byte_size").get<std::uint64_t>()};
            if (!seen.insert(me.checkpoint_id).second) {
                throw FormatError(fmt::format("manifest lists checkpoint {} twice", me.checkpoint_id));
            }
            m.entries.push_back(std::move(me));
        }
    } catch (const json::exception& e) {
        throw FormatError(fmt::format("malformed manifest '{}': {}", manifest_path().string(), e.what()));
    }
    return m;
}

void Registry::write_manifest(const RegistryManifest& m) const {
    json entries = json::array();
    for (const auto& e : m.entries) {
        entries.push_back({{"checkpoint_id", e.checkpoint_id},
                           {"path", e.path},
                           {"base_model_id", e.base_model_id},
                           {"created_at", e.created_at},
                           {"byte_size", e.byte_size}});
    }
    const std::string text = json{{"manifest_version", m.manifest_version}, {"entries", std::move(entries)}}.dump(2) + "\n";
    write_file_atomic(manifest_path(), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

ManifestEntry Registry::add(const AdapterCheckpoint& checkpoint) {
    RegistryLock lock(root_);
    auto m = manifest();
    const std::string id = checkpoint.id();
    for (const auto& e : m.entries)
        if (e.checkpoint_id == id) return e;
    fs::create_directories(root_ / "checkpoints");
    const std::string rel = fmt::format("checkpoints/{}.lxsc", id);
    const auto bytes = encode_checkpoint(checkpoint);
    write_file_atomic(root_ / rel, bytes);
    ManifestEntry entry{id, rel, checkpoint.base_model_id, utc_now(), bytes.size()};
    m.entries.push_back(entry);
    write_manifest(m);
    return entry;
}

VerifyReport Registry::verify() const {
    VerifyReport report;
    for (const auto& e : manifest().entries) {
        ++report.checked;
        const fs::path p = root_ / e.path;
        if (!fs::exists(p)) {
            report.failures.push_back({e.checkpoint_id, fmt::format("file '{}' is missing", e.path)});
            continue;
        }
        const auto size = fs::file_size(p);
        if (size != e.byte_size) {
            report.failures.push_back(
                {e.checkpoint_id, fmt::format("size {} differs from manifest byte_size {}", size, e.byte_size)});
            continue;
        }
        try {
            const auto ck = load_checkpoint(p);
            if (ck.id() != e.checkpoint_id) {
                report.failures.push_back({e.checkpoint_id, fmt::format("content id is {}", ck.id())});
            } else if (ck.base_model_id != e.base_model_id) {
                report.failures.push_back({e.checkpoint_id, fmt::format("base model id is '{}', manifest says '{}'",
                                                                        ck.base_model_id, e.base_model_id)});
            }
        } catch (const Error& err) {
            report.failures.push_back({e.checkpoint_id, err.what()});
        }
    }
    return report;
}

GcReport Registry::gc(bool apply) {
    std::optional<RegistryLock> lock;
    if (apply) lock.emplace(root_);
    std::set<fs::path> referenced;
    for (const auto& e : manifest().entries) referenced.insert(fs::weakly_canonical(root_ / e.path));
    GcReport report;
    report.applied = apply;
    const fs::path dir = root_ / "checkpoints";
    if (fs::is_directory(dir)) {
        for (const auto& item : fs::directory_iterator(dir)) {
            if (!item.is_regular_file()) continue;
            if (!referenced.contains(fs::weakly_canonical(item.path()))) report.unreferenced.push_back(item.path());
        }
    }
    std::sort(report.unreferenced.begin(), report.unreferenced.end());
    if (apply)
        for (const auto& p : report.unreferenced) fs::remove(p);
    return report;
}

}  // namespace loraxs
