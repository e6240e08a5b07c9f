#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "cutout/error.hpp"

namespace cutout {

// Pinned generator so golden values are portable across compilers and
// standard libraries:
//   derivation: SplitMix64 finalizer chained over (seed, domain, epoch, index)
//   stream:     xoshiro256** seeded by four SplitMix64 outputs
//   bounded:    Lemire multiply-shift with rejection
//   unit float: top 24 bits scaled by 2^-24

inline std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t splitmix64_next(std::uint64_t& state) noexcept {
    state += 0x9e3779b97f4a7c15ULL;
    return splitmix64_mix(state);
}

/// Stream domains keep e.g. shuffle and augmentation draws for the same
/// (seed, epoch) independent of each other.
enum class RngDomain : std::uint64_t {
    augment = 0x61756780,
    shuffle = 0x73687566,
    dropout = 0x64726f70,
    init = 0x696e6974,
    split = 0x73706c74,
    synthetic = 0x73796e74,
    misc = 0x6d697363,
};

inline std::uint64_t derive_seed(std::uint64_t global_seed, std::uint64_t epoch, std::uint64_t index,
                                 RngDomain domain = RngDomain::augment) noexcept {
    std::uint64_t h = splitmix64_mix(global_seed + 0x9e3779b97f4a7c15ULL);
    h = splitmix64_mix(h ^ static_cast<std::uint64_t>(domain));
    h = splitmix64_mix(h + epoch * 0xd1b54a32d192ed03ULL);
    h = splitmix64_mix(h ^ (index * 0x8cb92ba72f3d8dd7ULL));
    return h;
}

class RngStream {
public:
    explicit RngStream(std::uint64_t seed = 0) noexcept {
        std::uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64_next(sm);
    }

    static RngStream derive(std::uint64_t global_seed, std::uint64_t epoch, std::uint64_t index,
                            RngDomain domain = RngDomain::augment) noexcept {
        return RngStream(derive_seed(global_seed, epoch, index, domain));
    }

    std::uint64_t next_u64() noexcept {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform integer in [0, bound).
    std::uint64_t uniform_below(std::uint64_t bound) {
        if (bound == 0) throw ArgumentError("uniform_below: bound must be positive");
        unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * bound;
        auto low = static_cast<std::uint64_t>(m);
        if (low < bound) {
            const std::uint64_t threshold = (0 - bound) % bound;
            while (low < threshold) {
                m = static_cast<unsigned __int128>(next_u64()) * bound;
                low = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    /// Uniform float in [0, 1).
    float uniform01() noexcept { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

    /// Uniform double in [0, 1).
    double uniform01_double() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    bool coin() noexcept { return (next_u64() >> 63) != 0; }

    bool bernoulli(double p) noexcept { return uniform01_double() < p; }

    /// Standard normal via Box-Muller (one value per call, pair discarded).
    double normal() noexcept {
        double u1 = uniform01_double();
        while (u1 <= 0.0) u1 = uniform01_double();
        const double u2 = uniform01_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    friend bool operator==(const RngStream&, const RngStream&) = default;

private:
    static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

    std::array<std::uint64_t, 4> s_{};
};

/// Fisher-Yates permutation of [0, n).
template <typename Index = std::size_t>
std::vector<Index> shuffled_indices(std::size_t n, RngStream& rng) {
    std::vector<Index> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<Index>(i);
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_below(i));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

} // namespace cutout
