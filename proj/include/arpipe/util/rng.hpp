#pragma once

#include <cstdint>
#include <vector>

namespace arpipe::util {

/// xoshiro256** seeded through splitmix64. Hand-rolled because standard
/// library distributions and std::shuffle are not bit-identical across
/// implementations, and reproducibility here is a contract, not a nicety.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next();

    /// Uniform in [0, n). Rejection sampling, unbiased. n must be > 0.
    std::uint64_t bounded(std::uint64_t n);

    /// Uniform in [lo, hi] inclusive.
    std::int64_t range(std::int64_t lo, std::int64_t hi);

    /// Uniform in [0, 1).
    double unit();

    /// Fisher-Yates, deterministic for a given seed and input size.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = static_cast<std::size_t>(bounded(i + 1));
            using std::swap;
            swap(v[i], v[j]);
        }
    }

private:
    std::uint64_t s_[4];
};

} // namespace arpipe::util
