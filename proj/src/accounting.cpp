#include "loraxs/accounting.hpp"

#include <array>
#include <numeric>

#include <fmt/format.h>

#include "loraxs/errors.hpp"

namespace loraxs {

namespace {

constexpr std::uint64_t kMaxBytes = std::uint64_t{1} << 63;

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b, const char* what) {
    std::uint64_t out = 0;
    if (__builtin_mul_overflow(a, b, &out)) throw RangeError(fmt::format("{} overflows 64 bits", what));
    return out;
}

std::uint64_t checked_add(std::uint64_t a, std::uint64_t b, const char* what) {
    std::uint64_t out = 0;
    if (__builtin_add_overflow(a, b, &out)) throw RangeError(fmt::format("{} overflows 64 bits", what));
    return out;
}

std::string scaled(double value, std::uint64_t base, const std::array<const char*, 7>& units) {
    std::size_t i = 0;
    while (value >= static_cast<double>(base) && i + 1 < units.size()) {
        value /= static_cast<double>(base);
        ++i;
    }
    if (i == 0) return fmt::format("{:.0f} {}", value, units[0]);
    return fmt::format("{:.1f} {}", value, units[i]);
}

}  // namespace

std::string_view to_string(Method m) noexcept {
    switch (m) {
    case Method::lora: return "lora";
    case Method::vera: return "vera";
    default: return "loraxs";
    }
}

Method parse_method(std::string_view text) {
    if (text == "lora") return Method::lora;
    if (text == "vera") return Method::vera;
    if (text == "loraxs" || text == "lora-xs") return Method::loraxs;
    throw ParameterError(fmt::format("unknown method '{}', expected lora, vera or loraxs", text));
}

void ModelSpec::validate() const {
    if (layers == 0) throw ParameterError("layers must be positive");
    if (modules_per_layer == 0) throw ParameterError("modules per layer must be positive");
    if (hidden == 0) throw ParameterError("hidden dimension must be positive");
    if (rank == 0) throw ParameterError("rank must be positive");
    if (bytes_per_param == 0) throw ParameterError("bytes per parameter must be positive");
    if (out_dim && *out_dim == 0) throw ParameterError("output dimension must be positive");
    const std::uint64_t min_dim = out_dim ? std::min(*out_dim, hidden) : hidden;
    if (rank > min_dim) throw ParameterError(fmt::format("rank {} exceeds matrix dimension {}", rank, min_dim));
}

std::uint64_t count_params(Method method, const ModelSpec& spec) {
    spec.validate();
    const std::uint64_t modules = checked_mul(spec.layers, spec.modules_per_layer, "module count");
    std::uint64_t per_module = 0;
    switch (method) {
    case Method::lora: {
        const std::uint64_t m = spec.out_dim.value_or(spec.hidden);
        per_module = checked_mul(spec.rank, checked_add(m, spec.hidden, "m + n"), "LoRA module count");
        break;
    }
    case Method::vera:
        per_module = checked_add(spec.out_dim.value_or(spec.hidden), spec.rank, "VeRA module count");
        break;
    case Method::loraxs:
        per_module = checked_mul(spec.rank, spec.rank, "LoRA-XS module count");
        break;
    }
    return checked_mul(modules, per_module, "parameter count");
}

Ratio param_ratio(Method a, Method b, const ModelSpec& spec) {
    const std::uint64_t num = count_params(a, spec);
    const std::uint64_t den = count_params(b, spec);
    const std::uint64_t g = std::gcd(num, den);
    return Ratio{num / g, den / g};
}

BudgetReport storage_budget(std::uint64_t params, std::uint64_t bytes_per_param, std::uint64_t n_models) {
    if (params == 0 || bytes_per_param == 0 || n_models == 0) {
        throw ParameterError("params, bytes per param and model count must all be positive");
    }
    BudgetReport r;
    r.params = params;
    r.bytes_per_param = bytes_per_param;
    r.n_models = n_models;
    r.bytes_per_checkpoint = checked_mul(params, bytes_per_param, "checkpoint size");
    r.fleet_bytes = checked_mul(r.bytes_per_checkpoint, n_models, "fleet size");
    if (r.bytes_per_checkpoint > kMaxBytes || r.fleet_bytes > kMaxBytes) {
        throw RangeError("storage budget exceeds 2^63 bytes");
    }
    return r;
}

std::string format_binary(std::uint64_t bytes) {
    return scaled(static_cast<double>(bytes), 1024, {"B", "KiB", "MiB", "GiB", "TiB", "PiB", "EiB"});
}

std::string format_decimal(std::uint64_t bytes) {
    return scaled(static_cast<double>(bytes), 1000, {"B", "KB", "MB", "GB", "TB", "PB", "EB"});
}

std::string format_fleet_nominal(const BudgetReport& report) {
    static constexpr std::array<const char*, 7> kUnits = {"B", "KB", "MB", "GB", "TB", "PB", "EB"};
    double value = static_cast<double>(report.bytes_per_checkpoint);
    std::size_t prefix = 0;
    while (value >= 1024.0 && prefix + 1 < kUnits.size()) {
        value /= 1024.0;
        ++prefix;
    }
    value *= static_cast<double>(report.n_models);
    while (value >= 1000.0 && prefix + 1 < kUnits.size()) {
        value /= 1000.0;
        ++prefix;
    }
    return fmt::format("{:.1f} {}", value, kUnits[prefix]);
}

}  // namespace loraxs
