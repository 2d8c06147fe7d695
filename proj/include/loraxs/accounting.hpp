#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace loraxs {

enum class Method { lora, vera, loraxs };

std::string_view to_string(Method m) noexcept;
Method parse_method(std::string_view text);

// L fine-tuned layers, each with q adapted n x n matrices. Setting `out_dim`
// switches to rectangular m x n modules (LoRA counts r (m + n)).
struct ModelSpec {
    std::uint64_t layers = 1;
    std::uint64_t modules_per_layer = 1;
    std::uint64_t hidden = 1;
    std::uint64_t rank = 1;
    std::uint64_t bytes_per_param = 2;
    std::optional<std::uint64_t> out_dim;

    // Throws ParameterError for non-positive fields or rank > hidden.
    void validate() const;
};

// Trainable adapter parameters, classifier heads excluded:
//   LoRA    L q r 2n
//   VeRA    L q (n + r)
//   LoRA-XS L q r^2
// Throws RangeError if the count does not fit in 64 bits.
std::uint64_t count_params(Method method, const ModelSpec& spec);

struct Ratio {
    std::uint64_t numerator = 0;
    std::uint64_t denominator = 1;
    double value() const noexcept { return static_cast<double>(numerator) / static_cast<double>(denominator); }
};

// count_params(a) / count_params(b), reduced.
Ratio param_ratio(Method a, Method b, const ModelSpec& spec);

struct BudgetReport {
    std::optional<Method> method;
    std::uint64_t params = 0;
    std::uint64_t bytes_per_param = 0;
    std::uint64_t bytes_per_checkpoint = 0;
    std::uint64_t n_models = 0;
    std::uint64_t fleet_bytes = 0;
};

// Throws ParameterError for zero inputs and RangeError once bytes exceed 2^63.
BudgetReport storage_budget(std::uint64_t params, std::uint64_t bytes_per_param, std::uint64_t n_models);

// "144.0 MiB": largest binary prefix keeping the value >= 1, one decimal.
std::string format_binary(std::uint64_t bytes);
// "151.0 MB": same with decimal prefixes.
std::string format_decimal(std::uint64_t bytes);
// Fleet size as the per-checkpoint figure in binary units multiplied by the
// model count, with each factor of 1000 promoted to the next prefix: 144 MiB
// across 10^6 models reads "144.0 TB". This is how storage figures are
// usually quoted for large fleets; the exact byte count is always reported
// next to it.
std::string format_fleet_nominal(const BudgetReport& report);

}  // namespace loraxs
