#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "loraxs/matrix.hpp"

namespace loraxs {

// Mixes a seed with a stream tag so that independent consumers of one user
// seed (A, B, R, batch order, ...) draw from uncorrelated generators.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept;

// Well-known stream tags.
namespace streams {
inline constexpr std::uint64_t kSketch = 0x736b6574;      // randomized SVD test matrix
inline constexpr std::uint64_t kAdapterA = 0x41;
inline constexpr std::uint64_t kAdapterB = 0x42;
inline constexpr std::uint64_t kLatent = 0x52;
inline constexpr std::uint64_t kShuffle = 0x73687566;
inline constexpr std::uint64_t kTask = 0x7461736b;
}  // namespace streams

// mt19937_64 with distribution code written out here, so sequences do not
// depend on the standard library's (unspecified) distribution algorithms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    Rng(std::uint64_t seed, std::uint64_t stream) : engine_(derive_seed(seed, stream)) {}

    std::uint64_t next_u64() { return engine_(); }
    // Uniform in [0, 1) with 53 random bits.
    double uniform01();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }
    // Uniform integer in [0, bound).
    std::uint64_t below(std::uint64_t bound);
    // Standard normal via Box-Muller.
    double normal();

    Matrix gaussian(std::size_t rows, std::size_t cols, double stddev = 1.0);
    Matrix uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi);
    std::vector<std::size_t> permutation(std::size_t n);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace loraxs
