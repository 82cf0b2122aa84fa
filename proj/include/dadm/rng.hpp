#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace dadm {

/// Seeded counter-based generator. Output i is a pure function of
/// (seed, stream, i), so streams can be forked per record or per thread and
/// runs are bit-reproducible on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

    std::uint64_t next_u64();
    /// Uniform on [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi);
    /// Standard normal via Box-Muller (no cached second variate).
    double normal();
    double normal(double mean, double stddev);
    /// Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    /// Independent generator derived from this one's key and `stream`.
    Rng fork(std::uint64_t stream) const;

    std::vector<std::size_t> permutation(std::size_t n);
    /// Permutation with no fixed points for n >= 2 (rejection sampling).
    std::vector<std::size_t> derangement(std::size_t n);

    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace dadm
