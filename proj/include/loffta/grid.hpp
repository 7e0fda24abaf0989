// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "loffta/tracking.hpp"

namespace loffta {

/// Spatial feature tokens laid out row-major as (row, col, channel).
struct FeatureGrid {
    uint32_t h = 0;
    uint32_t w = 0;
    uint32_t d = 0;
    tracked_vector<float> values;

    FeatureGrid() = default;
    /// Zero-filled grid.
    FeatureGrid(uint32_t rows, uint32_t cols, uint32_t channels);
    FeatureGrid(uint32_t rows, uint32_t cols, uint32_t channels, std::span<const float> data);

    std::size_t size() const noexcept { return values.size(); }
    std::size_t index(uint32_t r, uint32_t c, uint32_t ch = 0) const noexcept {
        return (static_cast<std::size_t>(r) * w + c) * d + ch;
    }
    float& at(uint32_t r, uint32_t c, uint32_t ch) noexcept { return values[index(r, c, ch)]; }
    float at(uint32_t r, uint32_t c, uint32_t ch) const noexcept { return values[index(r, c, ch)]; }

    std::span<float> cell(uint32_t r, uint32_t c) noexcept { return {values.data() + index(r, c), d}; }
    std::span<const float> cell(uint32_t r, uint32_t c) const noexcept {
        return {values.data() + index(r, c), d};
    }

    bool same_shape(const FeatureGrid& o) const noexcept { return h == o.h && w == o.w && d == o.d; }

    /// Throws ShapeMismatch for inconsistent dimensions and InvalidValue for NaN/Inf.
    void validate() const;
};

struct FeatureRecord {
    tracked_vector<float> cls;
    FeatureGrid grid;
    uint32_t label = 0;

    /// Grid invariants plus cls width; label range is checked against a manifest elsewhere.
    void validate() const;
};

/// Bitwise equality of values (distinguishes -0.0 from 0.0).
bool bit_equal(const FeatureGrid& a, const FeatureGrid& b) noexcept;
bool bit_equal(const FeatureRecord& a, const FeatureRecord& b) noexcept;

}  // namespace loffta
