// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>

#include <nlohmann/json.hpp>

#include "loffta/grid.hpp"
#include "loffta/rng.hpp"

// Spatial and noise augmentations on cached feature grids. A grid is treated
// as an h x w image with d channels. Geometric operators keep (h, w, d) and
// fill cells whose source falls outside the grid with the zero vector.
namespace loffta::augment {

enum class FlipAxis { Horizontal, Vertical };

/// Horizontal mirrors columns, vertical mirrors rows.
FeatureGrid flip(const FeatureGrid& g, FlipAxis axis);

/// Nearest-neighbour rotation about ((h-1)/2, (w-1)/2) by inverse mapping.
/// Positive angles turn the content clockwise in row-down coordinates.
FeatureGrid rotate(const FeatureGrid& g, double degrees);

/// Nearest-neighbour shear:
///   src_col = c - tan(angle_x) * (r - cy),  src_row = r - tan(angle_y) * (c - cx).
/// Requires |angle| < 90.
FeatureGrid shear(const FeatureGrid& g, double angle_x_deg, double angle_y_deg);

/// out(r, c) = in(r - dr, c - dc) when in range, else zero.
FeatureGrid translate(const FeatureGrid& g, int64_t dr, int64_t dc);

/// Bilinear resample (half-pixel centres) to round(h*s) x round(w*s), then
/// centre-crop or symmetric zero-pad back to h x w.
FeatureGrid resize(const FeatureGrid& g, double scale);

struct Noised {
    FeatureGrid grid;
    tracked_vector<float> cls;
};

/// Adds i.i.d. N(0, sigma^2) to every grid and cls element, where
/// sigma = sigma_rel * population std of all the record's values. Grid
/// elements draw first, in storage order, then cls.
Noised add_noise(const FeatureGrid& g, std::span<const float> cls, double sigma_rel, RngStream& rng);

/// Rounding rule for nearest-neighbour sampling: nearest integer, ties toward
/// -inf, with a 1e-9 tolerance so that trig round-off does not flip ties.
int64_t nearest_index(double coord) noexcept;

struct EnabledTransforms {
    bool flip_h = true;
    bool flip_v = true;
    bool rotate = true;
    bool shear = true;
    bool resize = true;
    bool translate = true;
    bool noise = true;
};

struct AugmentationPolicy {
    double p_flip_h = 0.5;
    double p_flip_v = 0.5;
    double rotate_max_deg = 15.0;
    double shear_max_deg = 10.0;
    double translate_max_frac = 0.1;
    double scale_lo = 0.8;
    double scale_hi = 1.25;
    double noise_sigma_rel = 0.1;
    EnabledTransforms enabled;

    /// Policy that leaves every record unchanged.
    static AugmentationPolicy none();
    /// Throws InvalidParameter.
    void validate() const;
};

void to_json(nlohmann::json& j, const AugmentationPolicy& p);
/// Missing fields keep their defaults.
void from_json(const nlohmann::json& j, AugmentationPolicy& p);

/// Concrete parameters drawn from a policy for one record.
struct AugmentationDraw {
    bool flip_h = false;
    bool flip_v = false;
    double rotate_deg = 0.0;
    double shear_x_deg = 0.0;
    double shear_y_deg = 0.0;
    double scale = 1.0;
    int64_t dr = 0;
    int64_t dc = 0;
    double noise_sigma_rel = 0.0;
};

/// Draws in the fixed order flip_h, flip_v, rotate, shear (x then y), resize,
/// translate (rows then cols). Disabled transforms draw nothing.
AugmentationDraw draw_parameters(const AugmentationPolicy& policy, uint32_t h, uint32_t w, RngStream& rng);

/// Applies a draw in the order flip_h, flip_v, rotate, shear, resize,
/// translate, noise. Noise consumes `rng`.
FeatureRecord apply_draw(const FeatureRecord& rec, const AugmentationDraw& draw, RngStream& rng);

/// draw_parameters followed by apply_draw on the same stream.
FeatureRecord apply_policy(const FeatureRecord& rec, const AugmentationPolicy& policy, RngStream& rng);

}  // namespace loffta::augment
