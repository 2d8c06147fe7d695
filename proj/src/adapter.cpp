#include "loraxs/adapter.hpp"

#include <cmath>

#include <fmt/format.h>

#include "loraxs/errors.hpp"
#include "loraxs/rng.hpp"

namespace loraxs {

namespace {

void check_rank(std::size_t m, std::size_t n, std::size_t rank) {
    if (m == 0 || n == 0) throw ParameterError(fmt::format("adapter dimensions must be positive, got {}x{}", m, n));
    if (rank < 1 || rank > std::min(m, n)) {
        throw ParameterError(fmt::format("rank {} outside [1, {}] for a {}x{} weight", rank, std::min(m, n), m, n));
    }
}

void check_alpha(double alpha) {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ParameterError(fmt::format("alpha must be positive, got {}", alpha));
}

void check_sigma(double sigma) {
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ParameterError(fmt::format("sigma must be >= 0, got {}", sigma));
}

Matrix kaiming_uniform(Rng& rng, std::size_t rows, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    return rng.uniform_matrix(rows, fan_in, -bound, bound);
}

Matrix gaussian_latent(std::size_t rank, double sigma, std::uint64_t seed) {
    if (sigma == 0.0) return Matrix(rank, rank);
    Rng rng(seed, streams::kLatent);
    return rng.gaussian(rank, rank, sigma);
}

Matrix lowrank_apply(const Matrix& w, const Matrix& x, const Matrix& correction) {
    Matrix h = matmul(w, x);
    h += correction;
    return h;
}

}  // namespace

std::string_view to_string(InitKind kind) noexcept { return kind == InitKind::svd ? "svd" : "random"; }

InitKind parse_init_kind(std::string_view text) {
    if (text == "svd") return InitKind::svd;
    if (text == "random") return InitKind::random;
    throw ParameterError(fmt::format("unknown init kind '{}', expected svd or random", text));
}

LoraXsAdapter::LoraXsAdapter(Matrix a_frozen, Matrix b_frozen, Matrix r_latent, double alpha, InitKind init_kind,
                             std::uint64_t init_seed, double sigma, int n_iter)
    : a_(std::move(a_frozen)),
      b_(std::move(b_frozen)),
      r_(std::move(r_latent)),
      alpha_(alpha),
      init_kind_(init_kind),
      init_seed_(init_seed),
      sigma_(sigma),
      n_iter_(n_iter) {
    const std::size_t r = r_.rows();
    if (r == 0 || r_.cols() != r || a_.rows() != r || b_.cols() != r) {
        throw ShapeError(fmt::format("inconsistent LoRA-XS shapes: B {}, R {}, A {}", b_.shape_string(),
                                     r_.shape_string(), a_.shape_string()));
    }
    check_alpha(alpha);
    check_sigma(sigma);
}

void LoraXsAdapter::set_latent(Matrix r) {
    if (r.rows() != rank() || r.cols() != rank()) {
        throw ShapeError(fmt::format("latent must be {}x{}, got {}", rank(), rank(), r.shape_string()));
    }
    r_ = std::move(r);
}

std::pair<Matrix, Matrix> regenerate_projections(const Matrix& w, std::size_t rank, InitKind kind,
                                                 std::uint64_t init_seed, int n_iter) {
    const std::size_t m = w.rows();
    const std::size_t n = w.cols();
    check_rank(m, n, rank);
    if (kind == InitKind::svd) {
        SvdFactors f = truncated_svd(w, rank, n_iter, init_seed);
        Matrix b = std::move(f.u);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < rank; ++j) b(i, j) *= f.s[j];
        return {f.v.transpose(), std::move(b)};
    }
    Rng rng_a(init_seed, streams::kAdapterA);
    Rng rng_b(init_seed, streams::kAdapterB);
    Matrix a = kaiming_uniform(rng_a, rank, n);
    Matrix b = kaiming_uniform(rng_b, m, rank);
    return {std::move(a), std::move(b)};
}

LoraXsAdapter init_loraxs_svd(const Matrix& w, std::size_t rank, double alpha, double sigma,
                              std::uint64_t svd_seed, std::uint64_t r_seed, int n_iter) {
    check_alpha(alpha);
    check_sigma(sigma);
    auto [a, b] = regenerate_projections(w, rank, InitKind::svd, svd_seed, n_iter);
    return LoraXsAdapter(std::move(a), std::move(b), gaussian_latent(rank, sigma, r_seed), alpha, InitKind::svd,
                         svd_seed, sigma, n_iter);
}

LoraXsAdapter init_loraxs_random(std::size_t m, std::size_t n, std::size_t rank, double alpha, double sigma,
                                 std::uint64_t seed) {
    check_rank(m, n, rank);
    check_alpha(alpha);
    check_sigma(sigma);
    Rng rng_a(seed, streams::kAdapterA);
    Rng rng_b(seed, streams::kAdapterB);
    Matrix a = kaiming_uniform(rng_a, rank, n);
    Matrix b = kaiming_uniform(rng_b, m, rank);
    return LoraXsAdapter(std::move(a), std::move(b), gaussian_latent(rank, sigma, seed), alpha, InitKind::random, seed,
                         sigma, kDefaultPowerIterations);
}

LoraAdapter init_lora_baseline(std::size_t m, std::size_t n, std::size_t rank, double alpha, std::uint64_t seed) {
    check_rank(m, n, rank);
    check_alpha(alpha);
    Rng rng(seed, streams::kAdapterA);
    return LoraAdapter{kaiming_uniform(rng, rank, n), Matrix(m, rank), alpha};
}

Matrix delta_weight(const LoraXsAdapter& adapter) {
    Matrix d = matmul(matmul(adapter.b_frozen(), adapter.latent()), adapter.a_frozen());
    d *= adapter.scaling();
    return d;
}

Matrix delta_weight(const LoraAdapter& adapter) {
    Matrix d = matmul(adapter.b_train, adapter.a_train);
    d *= adapter.scaling();
    return d;
}

Matrix delta_weight(const Adapter& adapter) {
    return std::visit([](const auto& a) { return delta_weight(a); }, adapter);
}

std::size_t trainable_count(const Adapter& adapter) noexcept {
    return std::visit([](const auto& a) { return a.trainable_count(); }, adapter);
}

std::size_t adapter_in_dim(const Adapter& adapter) noexcept {
    return std::visit([](const auto& a) { return a.in_dim(); }, adapter);
}

std::size_t adapter_out_dim(const Adapter& adapter) noexcept {
    return std::visit([](const auto& a) { return a.out_dim(); }, adapter);
}

Matrix forward_adapted(const Matrix& w, const Adapter& adapter, const Matrix& x) {
    if (x.rows() != w.cols()) {
        throw ShapeError(fmt::format("forward: weight {} cannot take input {}", w.shape_string(), x.shape_string()));
    }
    if (adapter_in_dim(adapter) != w.cols() || adapter_out_dim(adapter) != w.rows()) {
        throw ShapeError(fmt::format("forward: adapter {}x{} does not fit weight {}", adapter_out_dim(adapter),
                                     adapter_in_dim(adapter), w.shape_string()));
    }
    Matrix correction = std::visit(
        [&](const auto& a) -> Matrix {
            using T = std::decay_t<decltype(a)>;
            if constexpr (std::is_same_v<T, LoraXsAdapter>) {
                return matmul(a.b_frozen(), matmul(a.latent(), matmul(a.a_frozen(), x)));
            } else {
                return matmul(a.b_train, matmul(a.a_train, x));
            }
        },
        adapter);
    const double s = std::visit([](const auto& a) { return a.scaling(); }, adapter);
    correction *= s;
    return lowrank_apply(w, x, correction);
}

Matrix merge(const Matrix& w, const Adapter& adapter) {
    if (adapter_in_dim(adapter) != w.cols() || adapter_out_dim(adapter) != w.rows()) {
        throw ShapeError(fmt::format("merge: adapter {}x{} does not fit weight {}", adapter_out_dim(adapter),
                                     adapter_in_dim(adapter), w.shape_string()));
    }
    const Matrix delta = delta_weight(adapter);
    Matrix merged = w;
    // Zero entries are skipped so a zero update returns w bit-for-bit (-0.0 stays -0.0).
    for (std::size_t i = 0; i < merged.size(); ++i) {
        if (delta.data()[i] != 0.0) merged.data()[i] += delta.data()[i];
    }
    return merged;
}

}  // namespace loraxs
