#include "loraxs/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "loraxs/errors.hpp"
#include "loraxs/rng.hpp"

namespace loraxs {

namespace {

double dot(std::span<const double> a, std::span<const double> b) noexcept {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) noexcept {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

double norm2(std::span<const double> a) noexcept { return std::sqrt(dot(a, a)); }

// Orthonormal basis for the range of `a` with deficient directions replaced
// by completion vectors, so the result always has orthonormal columns.
Matrix orthonormal_basis(const Matrix& a) {
    auto qr = qr_thin(a);
    complete_orthonormal(qr.q, qr.deficient_columns);
    return std::move(qr.q);
}

void require_finite(const Matrix& a, const char* op) {
    if (!a.all_finite()) throw NumericError(fmt::format("{}: input {} has non-finite entries", op, a.shape_string()));
}

}  // namespace

Matrix SvdFactors::reconstruct() const {
    Matrix us = u;
    for (std::size_t i = 0; i < us.rows(); ++i)
        for (std::size_t j = 0; j < rank_k; ++j) us(i, j) *= s[j];
    return matmul_nt(us, v);
}

SvdFactors SvdFactors::truncated(std::size_t r) const {
    if (r == 0 || r > rank_k) throw ParameterError(fmt::format("cannot truncate rank-{} factors to rank {}", rank_k, r));
    if (r == rank_k) return *this;
    return SvdFactors{u.column_block(0, r), std::vector<double>(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(r)),
                      v.column_block(0, r), r};
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError(fmt::format("matmul: shapes {} and {} do not chain", a.shape_string(), b.shape_string()));
    }
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto crow = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik != 0.0) axpy(aik, b.row(k), crow);
        }
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError(fmt::format("matmul_tn: shapes {}^T and {} do not chain", a.shape_string(), b.shape_string()));
    }
    Matrix c(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        auto brow = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki != 0.0) axpy(aki, brow, c.row(i));
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError(fmt::format("matmul_nt: shapes {} and {}^T do not chain", a.shape_string(), b.shape_string()));
    }
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot(a.row(i), b.row(j));
    return c;
}

double frobenius_norm(const Matrix& a) noexcept {
    // Scaled accumulation keeps huge or tiny entries from overflowing.
    double scale = 0.0;
    for (double v : a.data()) scale = std::max(scale, std::abs(v));
    if (scale == 0.0 || !std::isfinite(scale)) return scale;
    double sum = 0.0;
    for (double v : a.data()) {
        const double t = v / scale;
        sum += t * t;
    }
    return scale * std::sqrt(sum);
}

QrResult qr_thin(const Matrix& a) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    if (m < n) throw ShapeError(fmt::format("qr_thin needs rows >= cols, got {}", a.shape_string()));

    // Columns held as rows of the transpose for contiguous access.
    Matrix qt(n, m);
    Matrix r(n, n);
    std::vector<bool> zero(n, false);
    QrResult out;

    for (std::size_t j = 0; j < n; ++j) {
        auto v = qt.row(j);
        for (std::size_t i = 0; i < m; ++i) v[i] = a(i, j);
        const double original = norm2(v);
        double current = original;
        // Repeat projection while it removes a large share of the vector
        // (Kahan-Parlett); two passes almost always suffice.
        for (int pass = 0; pass < 3 && j > 0; ++pass) {
            for (std::size_t i = 0; i < j; ++i) {
                if (zero[i]) continue;
                const double c = dot(qt.row(i), v);
                r(i, j) += c;
                axpy(-c, qt.row(i), v);
            }
            const double after = norm2(v);
            const bool settled = after > 0.7 * current;
            current = after;
            if (settled && pass > 0) break;
        }
        if (original == 0.0 || current <= 1e-12 * original) {
            zero[j] = true;
            std::fill(v.begin(), v.end(), 0.0);
            out.deficient_columns.push_back(j);
            continue;
        }
        for (auto& x : v) x /= current;
        r(j, j) = current;
    }
    out.q = qt.transpose();
    out.r = std::move(r);
    return out;
}

void complete_orthonormal(Matrix& q, const std::vector<std::size_t>& zero_columns) {
    if (zero_columns.empty()) return;
    const std::size_t m = q.rows();
    Matrix qt = q.transpose();
    std::vector<bool> filled(q.cols(), true);
    for (auto c : zero_columns) filled[c] = false;

    std::vector<double> best(m);
    std::vector<double> trial(m);
    for (auto c : zero_columns) {
        // Pick the coordinate vector with the largest component outside the
        // current span; at least one has norm >= 1/sqrt(m).
        double best_norm = -1.0;
        for (std::size_t t = 0; t < m; ++t) {
            std::fill(trial.begin(), trial.end(), 0.0);
            trial[t] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t i = 0; i < qt.rows(); ++i) {
                    if (!filled[i]) continue;
                    axpy(-dot(qt.row(i), trial), qt.row(i), trial);
                }
            }
            const double nrm = norm2(trial);
            if (nrm > best_norm) {
                best_norm = nrm;
                best = trial;
            }
        }
        if (best_norm <= 1e-8) throw NumericError("orthonormal completion failed: no room left in the column space");
        auto dst = qt.row(c);
        for (std::size_t i = 0; i < m; ++i) dst[i] = best[i] / best_norm;
        filled[c] = true;
    }
    q = qt.transpose();
}

void normalize_signs(SvdFactors& f) {
    for (std::size_t j = 0; j < f.rank_k; ++j) {
        std::size_t arg = 0;
        double biggest = -1.0;
        for (std::size_t i = 0; i < f.u.rows(); ++i) {
            const double mag = std::abs(f.u(i, j));
            if (mag > biggest) {
                biggest = mag;
                arg = i;
            }
        }
        if (f.u(arg, j) < 0.0) {
            for (std::size_t i = 0; i < f.u.rows(); ++i) f.u(i, j) = -f.u(i, j);
            for (std::size_t i = 0; i < f.v.rows(); ++i) f.v(i, j) = -f.v(i, j);
        }
    }
}

SvdFactors svd_dense(const Matrix& a, std::size_t cap) {
    if (a.empty()) throw ShapeError("svd_dense: empty matrix");
    require_finite(a, "svd_dense");
    const std::size_t k = std::min(a.rows(), a.cols());
    if (k > cap) throw ParameterError(fmt::format("svd_dense: min dimension {} exceeds cap {}", k, cap));

    if (a.rows() < a.cols()) {
        SvdFactors t = svd_dense(a.transpose(), cap);
        SvdFactors out{std::move(t.v), std::move(t.s), std::move(t.u), t.rank_k};
        normalize_signs(out);
        return out;
    }

    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    Matrix work = a.transpose();  // row j is column j of a
    Matrix vt = Matrix::identity(n);

    bool converged = false;
    int sweep = 0;
    for (; sweep < kJacobiMaxSweeps && !converged; ++sweep) {
        converged = true;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                auto cp = work.row(p);
                auto cq = work.row(q);
                const double alpha = dot(cp, cp);
                const double beta = dot(cq, cq);
                const double gamma = dot(cp, cq);
                if (gamma == 0.0 || std::abs(gamma) <= kJacobiTolerance * std::sqrt(alpha * beta)) continue;
                converged = false;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double x = cp[i];
                    const double y = cq[i];
                    cp[i] = c * x - s * y;
                    cq[i] = s * x + c * y;
                }
                auto vp = vt.row(p);
                auto vq = vt.row(q);
                for (std::size_t i = 0; i < n; ++i) {
                    const double x = vp[i];
                    const double y = vq[i];
                    vp[i] = c * x - s * y;
                    vq[i] = s * x + c * y;
                }
            }
        }
    }
    if (!converged) {
        throw NumericError(fmt::format("svd_dense: Jacobi did not converge after {} sweeps", sweep));
    }

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) sigma[j] = norm2(work.row(j));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    SvdFactors out{Matrix(m, n), std::vector<double>(n), Matrix(n, n), n};
    Matrix ut(n, m);
    std::vector<std::size_t> zero_cols;
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        out.s[j] = sigma[src];
        for (std::size_t i = 0; i < n; ++i) out.v(i, j) = vt(src, i);
        auto uj = ut.row(j);
        if (sigma[src] == 0.0) {
            zero_cols.push_back(j);
            continue;
        }
        auto col = work.row(src);
        for (std::size_t i = 0; i < m; ++i) uj[i] = col[i] / sigma[src];
        // Columns for tiny singular values carry rounding noise; clean them
        // against the stronger directions and drop any that collapse.
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t i = 0; i < j; ++i) {
                if (std::find(zero_cols.begin(), zero_cols.end(), i) != zero_cols.end()) continue;
                axpy(-dot(ut.row(i), uj), ut.row(i), uj);
            }
        }
        const double nrm = norm2(uj);
        if (nrm < 0.5) {
            std::fill(uj.begin(), uj.end(), 0.0);
            zero_cols.push_back(j);
            continue;
        }
        for (auto& x : uj) x /= nrm;
    }
    out.u = ut.transpose();
    complete_orthonormal(out.u, zero_cols);
    normalize_signs(out);
    return out;
}

std::size_t oversampled_width(std::size_t rows, std::size_t cols, std::size_t r) noexcept {
    const std::size_t k = std::min(rows, cols);
    return r + std::min(kMaxOversampling, k - r);
}

SvdFactors truncated_svd(const Matrix& w, std::size_t r, int n_iter, std::uint64_t seed) {
    if (w.empty()) throw ShapeError("truncated_svd: empty matrix");
    const std::size_t k = std::min(w.rows(), w.cols());
    if (r < 1 || r > k) {
        throw ParameterError(fmt::format("truncated_svd: rank {} outside [1, {}] for {}", r, k, w.shape_string()));
    }
    if (n_iter < 0) throw ParameterError(fmt::format("truncated_svd: n_iter must be >= 0, got {}", n_iter));
    require_finite(w, "truncated_svd");

    const std::size_t width = oversampled_width(w.rows(), w.cols(), r);
    Rng rng(seed, streams::kSketch);
    const Matrix sketch = rng.gaussian(w.cols(), width);

    Matrix q = orthonormal_basis(matmul(w, sketch));
    for (int it = 0; it < n_iter; ++it) {
        const Matrix z = orthonormal_basis(matmul_tn(w, q));
        q = orthonormal_basis(matmul(w, z));
    }

    const Matrix projected = matmul_tn(q, w);  // width x n
    SvdFactors small = svd_dense(projected);
    SvdFactors full{matmul(q, small.u), std::move(small.s), std::move(small.v), small.rank_k};
    SvdFactors out = full.truncated(r);
    normalize_signs(out);
    return out;
}

}  // namespace loraxs
