#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <variant>

#include "loraxs/linalg.hpp"
#include "loraxs/matrix.hpp"

namespace loraxs {

enum class InitKind { svd, random };

std::string_view to_string(InitKind kind) noexcept;
// Throws ParameterError for anything other than "svd" or "random".
InitKind parse_init_kind(std::string_view text);

inline constexpr double kDefaultLatentSigma = 1e-5;

// LoRA-XS adapter for one m x n weight: delta W = (alpha / rank) * B R A,
// with B (m x r) and A (r x n) frozen and only the r x r latent R trainable.
// B carries U_r diag(S_r) and A carries V_r^T for SVD initialization.
class LoraXsAdapter {
public:
    // Assembles an adapter from existing parts; validates shapes and alpha.
    LoraXsAdapter(Matrix a_frozen, Matrix b_frozen, Matrix r_latent, double alpha, InitKind init_kind,
                  std::uint64_t init_seed, double sigma, int n_iter = kDefaultPowerIterations);

    const Matrix& a_frozen() const noexcept { return a_; }
    const Matrix& b_frozen() const noexcept { return b_; }
    const Matrix& latent() const noexcept { return r_; }
    Matrix& latent() noexcept { return r_; }
    // Replaces R; must stay rank x rank.
    void set_latent(Matrix r);

    std::size_t rank() const noexcept { return r_.rows(); }
    std::size_t out_dim() const noexcept { return b_.rows(); }
    std::size_t in_dim() const noexcept { return a_.cols(); }
    double alpha() const noexcept { return alpha_; }
    double scaling() const noexcept { return alpha_ / static_cast<double>(rank()); }
    InitKind init_kind() const noexcept { return init_kind_; }
    // Seed of the truncated SVD sketch (svd) or of the Kaiming draws (random).
    std::uint64_t init_seed() const noexcept { return init_seed_; }
    double sigma() const noexcept { return sigma_; }
    int n_iter() const noexcept { return n_iter_; }
    std::size_t trainable_count() const noexcept { return r_.size(); }

private:
    Matrix a_;
    Matrix b_;
    Matrix r_;
    double alpha_;
    InitKind init_kind_;
    std::uint64_t init_seed_;
    double sigma_;
    int n_iter_;
};

// Plain LoRA baseline: delta W = (alpha / rank) * B A with both trainable.
struct LoraAdapter {
    Matrix a_train;  // rank x n
    Matrix b_train;  // m x rank
    double alpha = 1.0;

    std::size_t rank() const noexcept { return a_train.rows(); }
    std::size_t out_dim() const noexcept { return b_train.rows(); }
    std::size_t in_dim() const noexcept { return a_train.cols(); }
    double scaling() const noexcept { return alpha / static_cast<double>(rank()); }
    std::size_t trainable_count() const noexcept { return a_train.size() + b_train.size(); }
};

using Adapter = std::variant<LoraXsAdapter, LoraAdapter>;

LoraXsAdapter init_loraxs_svd(const Matrix& w, std::size_t rank, double alpha, double sigma,
                              std::uint64_t svd_seed, std::uint64_t r_seed, int n_iter = kDefaultPowerIterations);

// A and B drawn Kaiming-uniform (bound sqrt(6 / fan_in)), R ~ N(0, sigma^2).
// A, B and R use separate streams derived from `seed`.
LoraXsAdapter init_loraxs_random(std::size_t m, std::size_t n, std::size_t rank, double alpha, double sigma,
                                 std::uint64_t seed);

// Regenerates the frozen projections of an adapter from its recorded
// provenance. Used by checkpoint attachment.
std::pair<Matrix, Matrix> regenerate_projections(const Matrix& w, std::size_t rank, InitKind kind,
                                                 std::uint64_t init_seed, int n_iter);

// B = 0, A Kaiming-uniform.
LoraAdapter init_lora_baseline(std::size_t m, std::size_t n, std::size_t rank, double alpha, std::uint64_t seed);

Matrix delta_weight(const LoraXsAdapter& adapter);
Matrix delta_weight(const LoraAdapter& adapter);
Matrix delta_weight(const Adapter& adapter);

// h = w x + delta_weight x without materializing delta W.
Matrix forward_adapted(const Matrix& w, const Adapter& adapter, const Matrix& x);

// w + delta_weight(adapter); w itself is untouched.
Matrix merge(const Matrix& w, const Adapter& adapter);

std::size_t trainable_count(const Adapter& adapter) noexcept;
std::size_t adapter_in_dim(const Adapter& adapter) noexcept;
std::size_t adapter_out_dim(const Adapter& adapter) noexcept;

}  // namespace loraxs
