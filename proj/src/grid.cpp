// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#include "loffta/grid.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "loffta/error.hpp"

namespace loffta {

FeatureGrid::FeatureGrid(uint32_t rows, uint32_t cols, uint32_t channels)
    : h(rows), w(cols), d(channels), values(static_cast<std::size_t>(rows) * cols * channels, 0.0f) {}

FeatureGrid::FeatureGrid(uint32_t rows, uint32_t cols, uint32_t channels, std::span<const float> data)
    : h(rows), w(cols), d(channels), values(data.begin(), data.end()) {
    if (values.size() != static_cast<std::size_t>(rows) * cols * channels) {
        throw ShapeMismatch("grid data length " + std::to_string(values.size()) + " != " +
                            std::to_string(rows) + "x" + std::to_string(cols) + "x" +
                            std::to_string(channels));
    }
}

void FeatureGrid::validate() const {
    if (h == 0 || w == 0 || d == 0) {
        throw ShapeMismatch("grid dimensions must be >= 1, got " + std::to_string(h) + "x" +
                            std::to_string(w) + "x" + std::to_string(d));
    }
    if (values.size() != static_cast<std::size_t>(h) * w * d) {
        throw ShapeMismatch("grid holds " + std::to_string(values.size()) + " values, expected " +
                            std::to_string(static_cast<std::size_t>(h) * w * d));
    }
    for (float v : values) {
        if (!std::isfinite(v)) throw InvalidValue("grid contains a non-finite value");
    }
}

void FeatureRecord::validate() const {
    grid.validate();
    if (cls.size() != grid.d) {
        throw ShapeMismatch("cls width " + std::to_string(cls.size()) + " != grid channels " +
                            std::to_string(grid.d));
    }
    for (float v : cls) {
        if (!std::isfinite(v)) throw InvalidValue("cls contains a non-finite value");
    }
}

bool bit_equal(const FeatureGrid& a, const FeatureGrid& b) noexcept {
    return a.same_shape(b) && a.values.size() == b.values.size() &&
           std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)) == 0;
}

bool bit_equal(const FeatureRecord& a, const FeatureRecord& b) noexcept {
    return a.label == b.label && a.cls.size() == b.cls.size() &&
           std::memcmp(a.cls.data(), b.cls.data(), a.cls.size() * sizeof(float)) == 0 &&
           bit_equal(a.grid, b.grid);
}

}  // namespace loffta
