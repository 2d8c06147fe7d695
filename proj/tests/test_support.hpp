#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "loraxs/linalg.hpp"
#include "loraxs/matrix.hpp"
#include "loraxs/rng.hpp"

namespace loraxs::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    Rng rng(seed, 0x7e57);
    return rng.gaussian(rows, cols);
}

inline double rel_frobenius(const Matrix& a, const Matrix& b) {
    const double denom = frobenius_norm(b);
    return frobenius_norm(a - b) / (denom == 0.0 ? 1.0 : denom);
}

inline double orthonormality_error(const Matrix& q) {
    return frobenius_norm(matmul_tn(q, q) - Matrix::identity(q.cols()));
}

// Fresh scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("loraxs-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace loraxs::testing
