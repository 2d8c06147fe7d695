#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "loraxs/matrix.hpp"

namespace loraxs {

// Truncated factorization w ~ U diag(S) V^T with k columns in U and V.
struct SvdFactors {
    Matrix u;               // m x k, orthonormal columns
    std::vector<double> s;  // k values, nonincreasing, >= 0
    Matrix v;               // n x k, orthonormal columns
    std::size_t rank_k = 0;

    // U diag(S) V^T
    Matrix reconstruct() const;
    // Leading `r` triplets.
    SvdFactors truncated(std::size_t r) const;
};

struct QrResult {
    Matrix q;  // m x n; columns orthonormal except the flagged zero columns
    Matrix r;  // n x n upper triangular, nonnegative diagonal
    // Columns found linearly dependent on their predecessors. The matching
    // column of q is zero and r(j, j) == 0.
    std::vector<std::size_t> deficient_columns;
};

inline constexpr std::size_t kDefaultSvdCap = 512;
inline constexpr int kJacobiMaxSweeps = 60;
inline constexpr double kJacobiTolerance = 1e-12;
inline constexpr std::size_t kMaxOversampling = 10;
inline constexpr int kDefaultPowerIterations = 10;

Matrix matmul(const Matrix& a, const Matrix& b);
// a^T b without forming the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// a b^T without forming the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& a) noexcept;

// Thin QR by Gram-Schmidt with reorthogonalization. Requires rows >= cols.
QrResult qr_thin(const Matrix& a);

// Replaces the listed (zero) columns of `q` with unit vectors orthogonal to
// every other column. The remaining columns must already be orthonormal.
void complete_orthonormal(Matrix& q, const std::vector<std::size_t>& zero_columns);

// Full thin SVD by one-sided Jacobi, k = min(m, n). Throws NumericError if
// the sweeps do not converge and ParameterError if min(m, n) exceeds `cap`.
SvdFactors svd_dense(const Matrix& a, std::size_t cap = kDefaultSvdCap);

// Oversampling width used by truncated_svd for a target rank `r`.
std::size_t oversampled_width(std::size_t rows, std::size_t cols, std::size_t r) noexcept;

// Rank-r randomized SVD: Gaussian sketch of width r + oversampling,
// `n_iter` subspace iterations each re-orthonormalized by QR, then a dense
// SVD of the projected matrix. Bit-identical output for equal inputs.
SvdFactors truncated_svd(const Matrix& w, std::size_t r, int n_iter, std::uint64_t seed);

// Flips singular-vector pairs so that the largest-magnitude entry of every
// U column is positive.
void normalize_signs(SvdFactors& f);

}  // namespace loraxs
