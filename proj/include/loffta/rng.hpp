// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace loffta {

/// SplitMix64 finalizer.
constexpr uint64_t mix64(uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seeded random stream with a platform-independent draw sequence.
///
/// Counter based: word k is mix64(key + k * golden gamma), i.e. SplitMix64
/// started at a key hashed from the seed. Distributions are implemented here
/// because the std ones are not portable.
class RngStream {
public:
    explicit RngStream(uint64_t seed = 0) : key_(mix64(seed)), seed_(seed) {}

    /// Independent stream keyed by (seed, keys...), e.g. (seed, epoch, record).
    static RngStream derive(uint64_t seed, std::initializer_list<uint64_t> keys) {
        uint64_t h = mix64(seed);
        for (uint64_t k : keys) h = mix64(h ^ mix64(k + 0x632be59bd9b4e019ULL));
        return RngStream(h);
    }

    uint64_t seed() const noexcept { return seed_; }
    /// Number of 64-bit words drawn so far.
    uint64_t counter() const noexcept { return counter_; }

    uint64_t next_u64() noexcept { return mix64(key_ + 0x9e3779b97f4a7c15ULL * counter_++); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    bool bernoulli(double p) { return uniform() < p; }
    /// Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        __extension__ using u128 = unsigned __int128;
        return static_cast<uint64_t>((static_cast<u128>(next_u64()) * n) >> 64);
    }
    /// Standard normal via a 256-layer ziggurat; usually one word per draw.
    double normal();
    /// v += sigma * z for each element with z standard normal at float
    /// precision; two draws per word, so not the same sequence as normal().
    void add_normal(std::span<float> values, double sigma);

private:
    uint64_t key_;
    uint64_t seed_;
    uint64_t counter_ = 0;
};

/// Fisher-Yates permutation of [0, n).
std::vector<uint64_t> permutation(uint64_t n, RngStream& rng);

}  // namespace loffta
