// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#include "loffta/rng.hpp"

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <utility>

namespace loffta {

namespace {

// 256-layer ziggurat for the standard normal (Marsaglia and Tsang).
constexpr double kZigR = 3.6541528853610088;
constexpr double kZigV = 0.00492867323399;

double gauss(double x) { return std::exp(-0.5 * x * x); }

struct Ziggurat {
    std::array<double, 257> x{};
    std::array<double, 257> f{};

    Ziggurat() {
        x[0] = kZigV / gauss(kZigR);
        x[1] = kZigR;
        for (int i = 1; i < 255; ++i) x[i + 1] = std::sqrt(-2.0 * std::log(kZigV / x[i] + gauss(x[i])));
        x[256] = 0.0;
        for (int i = 0; i < 257; ++i) f[i] = gauss(x[i]);
    }
};

const Ziggurat& ziggurat() {
    static const Ziggurat z;
    return z;
}

// Rejection path for draws outside the rectangle of layer i.
[[gnu::noinline]] double ziggurat_slow(RngStream& rng, const Ziggurat& z, std::size_t i, double x, double sign) {
    if (i == 0) {
        // Tail beyond R.
        double t, y;
        do {
            t = std::log(1.0 - rng.uniform()) / kZigR;
            y = std::log(1.0 - rng.uniform());
        } while (-2.0 * y < t * t);
        return sign * (kZigR - t);
    }
    if (z.f[i + 1] + (z.f[i] - z.f[i + 1]) * rng.uniform() < gauss(x)) return sign * x;
    return std::numeric_limits<double>::quiet_NaN();
}

inline double ziggurat_draw(RngStream& rng, const Ziggurat& z) {
    for (;;) {
        const uint64_t bits = rng.next_u64();
        const std::size_t i = bits & 0xff;
        // Bit 8 picks the sign without a branch; (0, 1) from the top 52 bits.
        const double sign = 1.0 - 2.0 * static_cast<double>((bits >> 8) & 1);
        const double u = (static_cast<double>(bits >> 12) + 0.5) * 0x1.0p-52;
        const double x = u * z.x[i];
        if (x < z.x[i + 1]) [[likely]]
            return sign * x;
        const double r = ziggurat_slow(rng, z, i, x, sign);
        if (!std::isnan(r)) return r;
    }
}

}  // namespace

double RngStream::normal() { return ziggurat_draw(*this, ziggurat()); }

namespace {

// Single-precision draw from 32 bits: layer, sign, then a 23-bit uniform.
// A rejected candidate falls back to the double path, which is a fresh
// independent draw, so the result is still exactly normal up to rounding.
inline double ziggurat_draw32(RngStream& rng, const Ziggurat& z, uint32_t bits) {
    const std::size_t i = bits & 0xff;
    const double sign = 1.0 - 2.0 * static_cast<double>((bits >> 8) & 1);
    const double u = (static_cast<double>(bits >> 9) + 0.5) * 0x1.0p-23;
    const double x = u * z.x[i];
    if (x < z.x[i + 1]) [[likely]]
        return sign * x;
    const double r = ziggurat_slow(rng, z, i, x, sign);
    return std::isnan(r) ? ziggurat_draw(rng, z) : r;
}

}  // namespace

void RngStream::add_normal(std::span<float> values, double sigma) {
    const Ziggurat& z = ziggurat();
    std::size_t k = 0;
    for (; k + 1 < values.size(); k += 2) {
        const uint64_t w = next_u64();
        const double a = ziggurat_draw32(*this, z, static_cast<uint32_t>(w));
        const double b = ziggurat_draw32(*this, z, static_cast<uint32_t>(w >> 32));
        values[k] = static_cast<float>(values[k] + sigma * a);
        values[k + 1] = static_cast<float>(values[k + 1] + sigma * b);
    }
    if (k < values.size()) values[k] = static_cast<float>(values[k] + sigma * ziggurat_draw32(*this, z, static_cast<uint32_t>(next_u64())));
}

std::vector<uint64_t> permutation(uint64_t n, RngStream& rng) {
    std::vector<uint64_t> p(n);
    std::iota(p.begin(), p.end(), uint64_t{0});
    for (uint64_t i = n; i > 1; --i) {
        const uint64_t j = rng.below(i);
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

}  // namespace loffta
