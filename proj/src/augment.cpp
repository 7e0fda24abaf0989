// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#include "loffta/augment.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <string>
#include <tuple>

#include "loffta/error.hpp"

namespace loffta::augment {

namespace {

struct SinCos {
    double sin;
    double cos;
};

// Exact values at multiples of 90 degrees so that rotate(0) and rotate(180)
// are exact index maps.
SinCos sincos_deg(double deg) {
    const double r = std::fmod(deg, 360.0);
    const double q = r < 0 ? r + 360.0 : r;
    if (q == 0.0) return {0.0, 1.0};
    if (q == 90.0) return {1.0, 0.0};
    if (q == 180.0) return {0.0, -1.0};
    if (q == 270.0) return {-1.0, 0.0};
    const double rad = deg * std::numbers::pi / 180.0;
    return {std::sin(rad), std::cos(rad)};
}

double tan_deg(double deg) {
    if (deg == 0.0) return 0.0;
    if (deg == 45.0) return 1.0;
    if (deg == -45.0) return -1.0;
    return std::tan(deg * std::numbers::pi / 180.0);
}

void copy_cell(const FeatureGrid& src, int64_t sr, int64_t sc, FeatureGrid& dst, uint32_t r, uint32_t c) {
    if (sr < 0 || sc < 0 || sr >= src.h || sc >= src.w) return;  // stays zero
    const auto from = src.cell(static_cast<uint32_t>(sr), static_cast<uint32_t>(sc));
    std::memcpy(dst.cell(r, c).data(), from.data(), from.size() * sizeof(float));
}

void require_valid(const FeatureGrid& g) {
    if (g.h == 0 || g.w == 0 || g.d == 0 || g.values.size() != static_cast<std::size_t>(g.h) * g.w * g.d) {
        throw ShapeMismatch("augmentation input is not a valid grid");
    }
}

}  // namespace

int64_t nearest_index(double coord) noexcept {
    return static_cast<int64_t>(std::ceil(coord - 0.5 - 1e-9));
}

FeatureGrid flip(const FeatureGrid& g, FlipAxis axis) {
    require_valid(g);
    FeatureGrid out(g.h, g.w, g.d);
    for (uint32_t r = 0; r < g.h; ++r) {
        for (uint32_t c = 0; c < g.w; ++c) {
            const uint32_t sr = axis == FlipAxis::Vertical ? g.h - 1 - r : r;
            const uint32_t sc = axis == FlipAxis::Horizontal ? g.w - 1 - c : c;
            copy_cell(g, sr, sc, out, r, c);
        }
    }
    return out;
}

FeatureGrid rotate(const FeatureGrid& g, double degrees) {
    require_valid(g);
    if (!std::isfinite(degrees)) throw InvalidParameter("rotation angle must be finite");
    const auto [s, co] = sincos_deg(degrees);
    const double cy = (g.h - 1) / 2.0;
    const double cx = (g.w - 1) / 2.0;
    FeatureGrid out(g.h, g.w, g.d);
    for (uint32_t r = 0; r < g.h; ++r) {
        for (uint32_t c = 0; c < g.w; ++c) {
            const double y = r - cy;
            const double x = c - cx;
            const double sx = co * x + s * y;
            const double sy = -s * x + co * y;
            copy_cell(g, nearest_index(sy + cy), nearest_index(sx + cx), out, r, c);
        }
    }
    return out;
}

FeatureGrid shear(const FeatureGrid& g, double angle_x_deg, double angle_y_deg) {
    require_valid(g);
    if (!std::isfinite(angle_x_deg) || !std::isfinite(angle_y_deg) || std::fabs(angle_x_deg) >= 90.0 ||
        std::fabs(angle_y_deg) >= 90.0) {
        throw InvalidParameter("shear angles must be finite with magnitude < 90 degrees");
    }
    const double tx = tan_deg(angle_x_deg);
    const double ty = tan_deg(angle_y_deg);
    const double cy = (g.h - 1) / 2.0;
    const double cx = (g.w - 1) / 2.0;
    FeatureGrid out(g.h, g.w, g.d);
    for (uint32_t r = 0; r < g.h; ++r) {
        for (uint32_t c = 0; c < g.w; ++c) {
            const double sc = c - tx * (r - cy);
            const double sr = r - ty * (c - cx);
            copy_cell(g, nearest_index(sr), nearest_index(sc), out, r, c);
        }
    }
    return out;
}

FeatureGrid translate(const FeatureGrid& g, int64_t dr, int64_t dc) {
    require_valid(g);
    FeatureGrid out(g.h, g.w, g.d);
    for (uint32_t r = 0; r < g.h; ++r) {
        for (uint32_t c = 0; c < g.w; ++c) copy_cell(g, int64_t{r} - dr, int64_t{c} - dc, out, r, c);
    }
    return out;
}

FeatureGrid resize(const FeatureGrid& g, double scale) {
    require_valid(g);
    if (!std::isfinite(scale) || scale <= 0.0) throw InvalidParameter("resize scale must be finite and > 0");
    const double rh = std::round(g.h * scale);
    const double rw = std::round(g.w * scale);
    if (rh < 1.0 || rw < 1.0) {
        throw InvalidParameter("resize scale " + std::to_string(scale) + " collapses the grid to zero size");
    }
    if (rh > 1e6 || rw > 1e6) throw InvalidParameter("resize scale too large");
    const auto H = static_cast<uint32_t>(rh);
    const auto W = static_cast<uint32_t>(rw);
    if (H == g.h && W == g.w) return g;

    // Bilinear sampling, align_corners = false: src = (dst + 0.5) * in/out - 0.5, clamped.
    auto axis_weights = [](uint32_t out_len, uint32_t in_len, uint32_t i) {
        double s = (i + 0.5) * static_cast<double>(in_len) / out_len - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in_len - 1));
        const auto i0 = static_cast<uint32_t>(std::floor(s));
        const uint32_t i1 = std::min(i0 + 1, in_len - 1);
        return std::tuple<uint32_t, uint32_t, double>{i0, i1, s - i0};
    };

    // Placement of the resampled H x W block inside the h x w output:
    // positive shift crops centrally, negative shift pads symmetrically.
    const int64_t shift_r = H >= g.h ? (int64_t{H} - g.h) / 2 : -((int64_t{g.h} - H) / 2);
    const int64_t shift_c = W >= g.w ? (int64_t{W} - g.w) / 2 : -((int64_t{g.w} - W) / 2);
    FeatureGrid out(g.h, g.w, g.d);
    for (uint32_t r = 0; r < g.h; ++r) {
        const int64_t R = r + shift_r;
        if (R < 0 || R >= H) continue;
        const auto [y0, y1, fy] = axis_weights(H, g.h, static_cast<uint32_t>(R));
        for (uint32_t c = 0; c < g.w; ++c) {
            const int64_t C = c + shift_c;
            if (C < 0 || C >= W) continue;
            const auto [x0, x1, fx] = axis_weights(W, g.w, static_cast<uint32_t>(C));
            const float* a = g.cell(y0, x0).data();
            const float* b = g.cell(y0, x1).data();
            const float* cc = g.cell(y1, x0).data();
            const float* dd = g.cell(y1, x1).data();
            float* dst = out.cell(r, c).data();
            for (uint32_t k = 0; k < g.d; ++k) {
                const double top = (1.0 - fx) * a[k] + fx * b[k];
                const double bot = (1.0 - fx) * cc[k] + fx * dd[k];
                dst[k] = static_cast<float>((1.0 - fy) * top + fy * bot);
            }
        }
    }
    return out;
}

namespace {

// Sum of v (or of (v - mean)^2) with eight interleaved double accumulators,
// combined in a fixed order.
double lane_sum(std::span<const float> v, double mean, bool squares) {
    constexpr std::size_t L = 8;
    double acc[L] = {};
    std::size_t i = 0;
    for (; i + L <= v.size(); i += L) {
        for (std::size_t l = 0; l < L; ++l) {
            const double x = static_cast<double>(v[i + l]) - mean;
            acc[l] += squares ? x * x : x;
        }
    }
    for (; i < v.size(); ++i) {
        const double x = static_cast<double>(v[i]) - mean;
        acc[i % L] += squares ? x * x : x;
    }
    double total = 0.0;
    for (double a : acc) total += a;
    return total;
}

}  // namespace

Noised add_noise(const FeatureGrid& g, std::span<const float> cls, double sigma_rel, RngStream& rng) {
    require_valid(g);
    if (!(sigma_rel >= 0.0) || !std::isfinite(sigma_rel)) throw InvalidParameter("sigma_rel must be finite and >= 0");
    Noised out{g, tracked_vector<float>(cls.begin(), cls.end())};
    if (sigma_rel == 0.0) return out;

    const double n = static_cast<double>(g.values.size() + cls.size());
    const double mean = (lane_sum(g.values, 0.0, false) + lane_sum(cls, 0.0, false)) / n;
    const double sq = lane_sum(g.values, mean, true) + lane_sum(cls, mean, true);
    const double sigma = sigma_rel * std::sqrt(sq / n);
    if (sigma == 0.0) return out;

    rng.add_normal(out.grid.values, sigma);
    rng.add_normal(out.cls, sigma);
    return out;
}

AugmentationPolicy AugmentationPolicy::none() {
    AugmentationPolicy p;
    p.p_flip_h = 0.0;
    p.p_flip_v = 0.0;
    p.rotate_max_deg = 0.0;
    p.shear_max_deg = 0.0;
    p.translate_max_frac = 0.0;
    p.scale_lo = 1.0;
    p.scale_hi = 1.0;
    p.noise_sigma_rel = 0.0;
    p.enabled = EnabledTransforms{false, false, false, false, false, false, false};
    return p;
}

void AugmentationPolicy::validate() const {
    auto prob = [](double p, const char* name) {
        if (!(p >= 0.0 && p <= 1.0)) throw InvalidParameter(std::string(name) + " must be in [0, 1]");
    };
    prob(p_flip_h, "p_flip_h");
    prob(p_flip_v, "p_flip_v");
    for (double v : {rotate_max_deg, shear_max_deg, translate_max_frac, scale_lo, scale_hi, noise_sigma_rel}) {
        if (!std::isfinite(v)) throw InvalidParameter("augmentation magnitudes must be finite");
    }
    if (rotate_max_deg < 0.0) throw InvalidParameter("rotate_max_deg must be >= 0");
    if (shear_max_deg < 0.0 || shear_max_deg >= 90.0) throw InvalidParameter("shear_max_deg must be in [0, 90)");
    if (translate_max_frac < 0.0 || translate_max_frac >= 1.0) {
        throw InvalidParameter("translate_max_frac must be in [0, 1)");
    }
    if (!(scale_lo > 0.0 && scale_lo <= 1.0 && scale_hi >= 1.0)) {
        throw InvalidParameter("scale_range must satisfy 0 < lo <= 1 <= hi");
    }
    if (noise_sigma_rel < 0.0) throw InvalidParameter("noise_sigma_rel must be >= 0");
}

void to_json(nlohmann::json& j, const AugmentationPolicy& p) {
    j = nlohmann::json{{"p_flip_h", p.p_flip_h},
                       {"p_flip_v", p.p_flip_v},
                       {"rotate_max_deg", p.rotate_max_deg},
                       {"shear_max_deg", p.shear_max_deg},
                       {"translate_max_frac", p.translate_max_frac},
                       {"scale_range", {p.scale_lo, p.scale_hi}},
                       {"noise_sigma_rel", p.noise_sigma_rel},
                       {"enabled",
                        {{"flip_h", p.enabled.flip_h},
                         {"flip_v", p.enabled.flip_v},
                         {"rotate", p.enabled.rotate},
                         {"shear", p.enabled.shear},
                         {"resize", p.enabled.resize},
                         {"translate", p.enabled.translate},
                         {"noise", p.enabled.noise}}}};
}

void from_json(const nlohmann::json& j, AugmentationPolicy& p) {
    p.p_flip_h = j.value("p_flip_h", p.p_flip_h);
    p.p_flip_v = j.value("p_flip_v", p.p_flip_v);
    p.rotate_max_deg = j.value("rotate_max_deg", p.rotate_max_deg);
    p.shear_max_deg = j.value("shear_max_deg", p.shear_max_deg);
    p.translate_max_frac = j.value("translate_max_frac", p.translate_max_frac);
    if (j.contains("scale_range")) {
        const auto& s = j.at("scale_range");
        if (!s.is_array() || s.size() != 2) throw InvalidParameter("scale_range must be [lo, hi]");
        p.scale_lo = s[0].get<double>();
        p.scale_hi = s[1].get<double>();
    }
    p.noise_sigma_rel = j.value("noise_sigma_rel", p.noise_sigma_rel);
    if (j.contains("enabled")) {
        const auto& e = j.at("enabled");
        p.enabled.flip_h = e.value("flip_h", p.enabled.flip_h);
        p.enabled.flip_v = e.value("flip_v", p.enabled.flip_v);
        p.enabled.rotate = e.value("rotate", p.enabled.rotate);
        p.enabled.shear = e.value("shear", p.enabled.shear);
        p.enabled.resize = e.value("resize", p.enabled.resize);
        p.enabled.translate = e.value("translate", p.enabled.translate);
        p.enabled.noise = e.value("noise", p.enabled.noise);
    }
}

AugmentationDraw draw_parameters(const AugmentationPolicy& policy, uint32_t h, uint32_t w, RngStream& rng) {
    AugmentationDraw d;
    if (policy.enabled.flip_h) d.flip_h = rng.bernoulli(policy.p_flip_h);
    if (policy.enabled.flip_v) d.flip_v = rng.bernoulli(policy.p_flip_v);
    if (policy.enabled.rotate) d.rotate_deg = rng.uniform(-policy.rotate_max_deg, policy.rotate_max_deg);
    if (policy.enabled.shear) {
        d.shear_x_deg = rng.uniform(-policy.shear_max_deg, policy.shear_max_deg);
        d.shear_y_deg = rng.uniform(-policy.shear_max_deg, policy.shear_max_deg);
    }
    if (policy.enabled.resize) d.scale = rng.uniform(policy.scale_lo, policy.scale_hi);
    if (policy.enabled.translate) {
        const double f = policy.translate_max_frac;
        d.dr = static_cast<int64_t>(std::round(rng.uniform(-f, f) * h));
        d.dc = static_cast<int64_t>(std::round(rng.uniform(-f, f) * w));
    }
    if (policy.enabled.noise) d.noise_sigma_rel = policy.noise_sigma_rel;
    return d;
}

FeatureRecord apply_draw(const FeatureRecord& rec, const AugmentationDraw& draw, RngStream& rng) {
    FeatureRecord out;
    out.label = rec.label;
    FeatureGrid g = rec.grid;
    if (draw.flip_h) g = flip(g, FlipAxis::Horizontal);
    if (draw.flip_v) g = flip(g, FlipAxis::Vertical);
    if (draw.rotate_deg != 0.0) g = rotate(g, draw.rotate_deg);
    if (draw.shear_x_deg != 0.0 || draw.shear_y_deg != 0.0) g = shear(g, draw.shear_x_deg, draw.shear_y_deg);
    if (draw.scale != 1.0) g = resize(g, draw.scale);
    if (draw.dr != 0 || draw.dc != 0) g = translate(g, draw.dr, draw.dc);
    if (draw.noise_sigma_rel > 0.0) {
        auto noised = add_noise(g, rec.cls, draw.noise_sigma_rel, rng);
        out.grid = std::move(noised.grid);
        out.cls = std::move(noised.cls);
    } else {
        out.grid = std::move(g);
        out.cls = rec.cls;
    }
    return out;
}

FeatureRecord apply_policy(const FeatureRecord& rec, const AugmentationPolicy& policy, RngStream& rng) {
    policy.validate();
    const auto draw = draw_parameters(policy, rec.grid.h, rec.grid.w, rng);
    return apply_draw(rec, draw, rng);
}

}  // namespace loffta::augment
