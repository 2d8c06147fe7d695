#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "loraxs/adapter.hpp"
#include "loraxs/digest.hpp"
#include "loraxs/matrix.hpp"

namespace loraxs {

enum class StorageDtype { f32, f64 };

std::string_view to_string(StorageDtype d) noexcept;
StorageDtype parse_dtype(std::string_view text);
std::size_t dtype_bytes(StorageDtype d) noexcept;

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct CheckpointEntry {
    std::string module_name;
    std::size_t rank = 0;
    double alpha = 0.0;
    InitKind init_kind = InitKind::svd;
    std::uint64_t svd_seed = 0;  // seed of the projections, for either init kind
    int n_iter = kDefaultPowerIterations;
    double sigma = 0.0;
    Digest a_digest{};
    Digest b_digest{};
    Matrix r_latent;  // values exactly representable in the storage dtype
    // Present only in self-contained checkpoints (stored as f64).
    std::optional<Matrix> a_embedded;
    std::optional<Matrix> b_embedded;

    friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

// Only the r x r latents plus what is needed to rebuild A and B from the
// base weights. Self-contained checkpoints also embed A and B.
struct AdapterCheckpoint {
    std::uint32_t format_version = kCheckpointFormatVersion;
    std::string base_model_id;
    StorageDtype storage_dtype = StorageDtype::f64;
    bool self_contained = false;
    std::vector<CheckpointEntry> entries;
    Digest payload_checksum{};

    // Content address: hex of the payload checksum.
    std::string id() const { return to_hex(payload_checksum); }
    const CheckpointEntry* find(std::string_view module) const;

    friend bool operator==(const AdapterCheckpoint&, const AdapterCheckpoint&) = default;
};

struct CheckpointMeta {
    std::string base_model_id;
    StorageDtype storage_dtype = StorageDtype::f64;
    bool self_contained = false;
};

using AdapterSet = std::map<std::string, LoraXsAdapter>;
using WeightSet = std::map<std::string, Matrix>;

// Builds the in-memory checkpoint, rounding latents to the storage dtype.
// Throws SerializationError if a latent does not fit the dtype.
AdapterCheckpoint make_checkpoint(const AdapterSet& adapters, const CheckpointMeta& meta);

std::vector<std::uint8_t> encode_checkpoint(const AdapterCheckpoint& checkpoint);
// Throws FormatError for malformed framing and IntegrityError (with the
// byte offset of the damaged region) on checksum mismatch.
AdapterCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

// Atomic write; returns the checkpoint id.
std::string save_checkpoint(const AdapterCheckpoint& checkpoint, const std::filesystem::path& path);
std::string save_checkpoint(const AdapterSet& adapters, const CheckpointMeta& meta, const std::filesystem::path& path);
AdapterCheckpoint load_checkpoint(const std::filesystem::path& path);

// Rebuilds A and B for every entry from `base`, checks them against the
// stored digests and installs the stored latents.
AdapterSet attach_checkpoint(const AdapterCheckpoint& checkpoint, const WeightSet& base);

// Copies the source latents into `targets`; A and B are left alone. Module
// names must match exactly and ranks must agree; nothing is modified on error.
void warm_start(AdapterSet& targets, const AdapterCheckpoint& source);

struct ManifestEntry {
    std::string checkpoint_id;
    std::string path;  // relative to the registry root
    std::string base_model_id;
    std::string created_at;
    std::uint64_t byte_size = 0;
};

struct RegistryManifest {
    std::uint32_t manifest_version = 1;
    std::vector<ManifestEntry> entries;
};

struct VerifyIssue {
    std::string checkpoint_id;
    std::string problem;
};

struct VerifyReport {
    std::size_t checked = 0;
    std::vector<VerifyIssue> failures;
    bool ok() const noexcept { return failures.empty(); }
};

struct GcReport {
    std::vector<std::filesystem::path> unreferenced;
    bool applied = false;
};

// Directory of checkpoints with a `manifest.json` index. Writers take an
// exclusive lock file; readers never lock.
class Registry {
public:
    // Opens an existing registry root (IoError if it is missing).
    explicit Registry(std::filesystem::path root);
    // Creates the root and an empty manifest when absent.
    static Registry create(const std::filesystem::path& root);

    const std::filesystem::path& root() const noexcept { return root_; }
    RegistryManifest manifest() const;

    // Stores the checkpoint under checkpoints/<id>.lxsc and records it.
    // Adding an id that is already present is a no-op returning that entry.
    ManifestEntry add(const AdapterCheckpoint& checkpoint);
    VerifyReport verify() const;
    // Lists (and with apply = true deletes) files under checkpoints/ that
    // the manifest does not reference.
    GcReport gc(bool apply);

private:
    std::filesystem::path manifest_path() const { return root_ / "manifest.json"; }
    void write_manifest(const RegistryManifest& m) const;

    std::filesystem::path root_;
};

}  // namespace loraxs
