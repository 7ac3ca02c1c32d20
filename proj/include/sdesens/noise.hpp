#pragma once

#include <cmath>
#include <cstdint>

#include "sdesens/vec.hpp"

namespace sdesens {

namespace detail {

/// SplitMix64 finalizer; used to spread (master_seed, path_index) into
/// uncorrelated key/counter material.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline void philox_mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi,
                           std::uint32_t& lo) {
    const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
    hi = static_cast<std::uint32_t>(p >> 32);
    lo = static_cast<std::uint32_t>(p);
}

/// One Philox-4x32 block (10 rounds). Salmon et al., SC'11.
inline void philox4x32(const std::uint32_t key[2], const std::uint32_t ctr[4],
                       std::uint32_t out[4]) {
    constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
    constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
    std::uint32_t x0 = ctr[0], x1 = ctr[1], x2 = ctr[2], x3 = ctr[3];
    std::uint32_t k0 = key[0], k1 = key[1];
    for (int round = 0; round < 10; ++round) {
        std::uint32_t hi0, lo0, hi1, lo1;
        philox_mulhilo(kM0, x0, hi0, lo0);
        philox_mulhilo(kM1, x2, hi1, lo1);
        const std::uint32_t y0 = hi1 ^ x1 ^ k0;
        const std::uint32_t y1 = lo1;
        const std::uint32_t y2 = hi0 ^ x3 ^ k1;
        const std::uint32_t y3 = lo0;
        x0 = y0;
        x1 = y1;
        x2 = y2;
        x3 = y3;
        k0 += kW0;
        k1 += kW1;
    }
    out[0] = x0;
    out[1] = x1;
    out[2] = x2;
    out[3] = x3;
}

}  // namespace detail

/// Counter-based Gaussian stream for one simulated path.
///
/// The stream is keyed on (master_seed, path_index): identical pairs
/// reproduce the identical draw sequence regardless of how many other
/// streams run concurrently, and distinct path indices give statistically
/// independent streams. reset() rewinds to the first draw, which lets a
/// caller re-drive several simulations with bit-identical increments.
class NoiseStream {
public:
    NoiseStream(std::uint64_t master_seed, std::uint64_t path_index)
        : master_seed_(master_seed), path_index_(path_index) {
        const std::uint64_t a = detail::splitmix64(master_seed ^ 0x8000000000000000ULL);
        const std::uint64_t b = detail::splitmix64(a + path_index);
        const std::uint64_t c = detail::splitmix64(b);
        key_[0] = static_cast<std::uint32_t>(b);
        key_[1] = static_cast<std::uint32_t>(b >> 32);
        ctr_hi_[0] = static_cast<std::uint32_t>(c);
        ctr_hi_[1] = static_cast<std::uint32_t>(c >> 32);
        reset();
    }

    std::uint64_t master_seed() const { return master_seed_; }
    std::uint64_t path_index() const { return path_index_; }

    /// Rewind to the first draw of the stream.
    void reset() {
        block_ = 0;
        buf_pos_ = 2;
        have_spare_ = false;
        spare_ = 0.0;
    }

    /// Uniform draw in [0, 1).
    double uniform() {
        if (buf_pos_ >= 2) refill();
        const std::uint64_t bits = buf_[buf_pos_++];
        return static_cast<double>(bits >> 11) * 0x1.0p-53;
    }

    /// Standard normal draw (Marsaglia polar method).
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        have_spare_ = true;
        return u * f;
    }

    /// Vector of independent standard normals.
    template <std::size_t N>
    Vec<N> gaussian_vec() {
        Vec<N> g{};
        for (std::size_t i = 0; i < N; ++i) g[i] = gaussian();
        return g;
    }

private:
    void refill() {
        const std::uint32_t ctr[4] = {static_cast<std::uint32_t>(block_),
                                      static_cast<std::uint32_t>(block_ >> 32),
                                      ctr_hi_[0], ctr_hi_[1]};
        std::uint32_t out[4];
        detail::philox4x32(key_, ctr, out);
        buf_[0] = (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
        buf_[1] = (static_cast<std::uint64_t>(out[3]) << 32) | out[2];
        buf_pos_ = 0;
        ++block_;
    }

    std::uint64_t master_seed_;
    std::uint64_t path_index_;
    std::uint32_t key_[2];
    std::uint32_t ctr_hi_[2];
    std::uint64_t block_ = 0;
    std::uint64_t buf_[2] = {0, 0};
    int buf_pos_ = 2;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace sdesens
