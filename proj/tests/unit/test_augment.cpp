// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>
#include <vector>

#include <catch_amalgamated.hpp>

#include "loffta/augment.hpp"
#include "loffta/error.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace loffta;
using namespace loffta::augment;
using loffta::testing::random_grid;
using loffta::testing::random_record;

namespace {

FeatureGrid from_rows(uint32_t h, uint32_t w, std::vector<float> v) { return FeatureGrid(h, w, 1, v); }

std::vector<float> flat(const FeatureGrid& g) { return {g.values.begin(), g.values.end()}; }

}  // namespace

TEST_CASE("flips mirror the right axis and are involutions", "[augment]") {
    const auto g = from_rows(1, 2, {1.f, 2.f});
    CHECK(flat(flip(g, FlipAxis::Horizontal)) == std::vector<float>{2.f, 1.f});
    CHECK(flat(flip(g, FlipAxis::Vertical)) == std::vector<float>{1.f, 2.f});

    std::mt19937 gen(1);
    const auto x = random_grid(gen, 5, 7, 3);
    CHECK(bit_equal(flip(x, FlipAxis::Vertical), oracle::flip_v(x)));
    CHECK(bit_equal(flip(x, FlipAxis::Horizontal), oracle::flip_h(x)));
    CHECK(bit_equal(flip(flip(x, FlipAxis::Horizontal), FlipAxis::Horizontal), x));
    CHECK(bit_equal(flip(flip(x, FlipAxis::Vertical), FlipAxis::Vertical), x));
}

TEST_CASE("rotation identities and quarter turns", "[augment]") {
    std::mt19937 gen(2);
    for (auto [h, w] : {std::pair{1u, 1u}, {2u, 3u}, {4u, 4u}, {5u, 6u}, {7u, 7u}}) {
        const auto x = random_grid(gen, h, w, 2);
        CHECK(bit_equal(rotate(x, 0.0), x));
        CHECK(bit_equal(rotate(x, 360.0), x));
        CHECK(bit_equal(rotate(x, 180.0), flip(flip(x, FlipAxis::Horizontal), FlipAxis::Vertical)));
        CHECK(bit_equal(rotate(x, -180.0), rotate(x, 180.0)));
    }
    // Clockwise: the top-left value ends at the top-right.
    const auto g = from_rows(3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    CHECK(flat(rotate(g, 90.0)) == std::vector<float>{7, 4, 1, 8, 5, 2, 9, 6, 3});
    CHECK(flat(rotate(g, -90.0)) == std::vector<float>{3, 6, 9, 2, 5, 8, 1, 4, 7});
    CHECK(bit_equal(rotate(rotate(g, 90.0), 90.0), rotate(g, 180.0)));
}

TEST_CASE("rotation at arbitrary angles matches the inverse-map oracle", "[augment]") {
    std::mt19937 gen(3);
    std::uniform_real_distribution<double> ang(-180.0, 180.0);
    for (int t = 0; t < 50; ++t) {
        const auto x = random_grid(gen, 2 + t % 7, 3 + t % 5, 3);
        const double a = ang(gen);
        INFO("angle " << a);
        CHECK(bit_equal(rotate(x, a), oracle::rotate(x, a)));
    }
}

TEST_CASE("shear identities, examples and limits", "[augment]") {
    std::mt19937 gen(4);
    const auto x = random_grid(gen, 6, 5, 2);
    CHECK(bit_equal(shear(x, 0.0, 0.0), x));

    // tan 45 = 1 on a 2x2: row 0 pulls from c + 0.5, row 1 from c - 0.5.
    const auto g = from_rows(2, 2, {1, 2, 3, 4});
    CHECK(flat(shear(g, 45.0, 0.0)) == std::vector<float>{1, 2, 0, 3});

    // Steeper shear pushes more cells out of range.
    FeatureGrid ones(8, 8, 1);
    for (auto& v : ones.values) v = 1.f;
    int prev = -1;
    for (double a : {0.0, 15.0, 30.0, 45.0}) {
        const auto s = shear(ones, a, 0.0);
        int zeros = 0;
        for (float v : s.values) zeros += v == 0.f;
        CHECK(zeros >= prev);
        prev = zeros;
    }
    CHECK(prev > 0);

    CHECK_THROWS_AS(shear(x, 90.0, 0.0), InvalidParameter);
    CHECK_THROWS_AS(shear(x, 0.0, -95.0), InvalidParameter);

    std::uniform_real_distribution<double> ang(-60.0, 60.0);
    for (int t = 0; t < 50; ++t) {
        const auto y = random_grid(gen, 3 + t % 6, 2 + t % 7, 2);
        const double ax = ang(gen), ay = ang(gen);
        CHECK(bit_equal(shear(y, ax, ay), oracle::shear(y, ax, ay)));
    }
}

TEST_CASE("translate shifts content and fills with zeros", "[augment]") {
    std::mt19937 gen(5);
    const auto x = random_grid(gen, 4, 5, 3);
    CHECK(bit_equal(translate(x, 0, 0), x));
    CHECK(bit_equal(translate(x, 2, -1), oracle::translate(x, 2, -1)));
    for (float v : translate(x, 4, 0).values) CHECK(v == 0.f);
    for (float v : translate(x, 0, -5).values) CHECK(v == 0.f);

    const auto g = from_rows(2, 2, {1, 2, 3, 4});
    CHECK(flat(translate(g, 1, 0)) == std::vector<float>{0, 0, 1, 2});
    CHECK(flat(translate(g, 0, -1)) == std::vector<float>{2, 0, 4, 0});

    // Shifting back restores every cell that stayed inside.
    const auto back = translate(translate(x, 1, 2), -1, -2);
    for (uint32_t r = 0; r + 1 < x.h; ++r)
        for (uint32_t c = 0; c + 2 < x.w; ++c)
            for (uint32_t k = 0; k < x.d; ++k) CHECK(back.at(r, c, k) == x.at(r, c, k));
}

TEST_CASE("resize keeps shape and matches the bilinear oracle", "[augment]") {
    std::mt19937 gen(6);
    const auto x = random_grid(gen, 5, 4, 2);
    CHECK(bit_equal(resize(x, 1.0), x));

    // Upscaling a constant grid stays constant.
    const auto c = from_rows(2, 2, {3, 3, 3, 3});
    CHECK(flat(resize(c, 2.0)) == std::vector<float>{3, 3, 3, 3});

    // 4x4 ramp 4r + c halved: 2x2 samples at source (0.5, 0.5) steps, padded by 1.
    std::vector<float> ramp(16);
    for (int i = 0; i < 16; ++i) ramp[i] = float(i);
    const auto small = resize(from_rows(4, 4, ramp), 0.5);
    CHECK(flat(small) == std::vector<float>{0, 0, 0, 0, 0, 2.5f, 4.5f, 0, 0, 10.5f, 12.5f, 0, 0, 0, 0, 0});

    std::uniform_real_distribution<double> sc(0.5, 2.0);
    for (int t = 0; t < 40; ++t) {
        const auto y = random_grid(gen, 2 + t % 7, 2 + (t * 3) % 7, 3);
        const double s = sc(gen);
        const auto out = resize(y, s);
        REQUIRE(out.same_shape(y));
        INFO("scale " << s);
        CHECK(oracle::max_abs_diff(out, oracle::resize(y, s)) <= 1e-6);
    }

    CHECK_THROWS_AS(resize(x, 0.0), InvalidParameter);
    CHECK_THROWS_AS(resize(x, 0.05), InvalidParameter);
    CHECK_THROWS_AS(resize(x, std::nan("")), InvalidParameter);
}

TEST_CASE("noise scales with the record's spread", "[augment]") {
    std::mt19937 gen(7);
    const auto rec = random_record(gen, 3, 3, 4, 0);
    RngStream r0(1);
    const auto same = add_noise(rec.grid, rec.cls, 0.0, r0);
    CHECK(bit_equal(same.grid, rec.grid));
    CHECK(same.cls == rec.cls);
    CHECK(r0.counter() == 0);

    RngStream a(5), b(5);
    const auto na = add_noise(rec.grid, rec.cls, 0.3, a);
    const auto nb = add_noise(rec.grid, rec.cls, 0.3, b);
    CHECK(bit_equal(na.grid, nb.grid));
    CHECK(na.cls == nb.cls);
    CHECK_FALSE(bit_equal(na.grid, rec.grid));

    // Unit-spread input of a million elements: residual std is sigma_rel.
    FeatureGrid big(1000, 1000, 1);
    for (std::size_t i = 0; i < big.values.size(); ++i) big.values[i] = (i % 2) ? 1.f : -1.f;
    std::vector<float> cls;
    RngStream r(11);
    const auto nz = add_noise(big, cls, 0.5, r);
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < big.values.size(); ++i) {
        const double e = double(nz.grid.values[i]) - big.values[i];
        s += e;
        s2 += e * e;
    }
    const double n = double(big.values.size());
    CHECK(std::fabs(s / n) < 4 * 0.5 / 1000);
    CHECK(std::fabs(std::sqrt(s2 / n) / 0.5 - 1) < 0.02);

    CHECK_THROWS_AS(add_noise(rec.grid, rec.cls, -0.1, r), InvalidParameter);
}

TEST_CASE("nearest index rounds ties downward", "[augment]") {
    CHECK(nearest_index(2.5) == 2);
    CHECK(nearest_index(-0.5) == -1);
    CHECK(nearest_index(2.5 + 1e-12) == 2);
    CHECK(nearest_index(2.51) == 3);
    CHECK(nearest_index(2.49) == 2);
    CHECK(nearest_index(-1.2) == -1);
}

TEST_CASE("policy application is a replay of its draw", "[augment]") {
    std::mt19937 gen(8);
    const auto rec = random_record(gen, 6, 6, 4, 3);

    RngStream r(0);
    const auto untouched = apply_policy(rec, AugmentationPolicy::none(), r);
    CHECK(bit_equal(untouched, rec));

    auto only_flip = AugmentationPolicy::none();
    only_flip.enabled.flip_h = true;
    only_flip.p_flip_h = 1.0;
    const auto flipped = apply_policy(rec, only_flip, r);
    CHECK(bit_equal(flipped.grid, oracle::flip_h(rec.grid)));
    CHECK(flipped.cls == rec.cls);
    CHECK(flipped.label == rec.label);

    const AugmentationPolicy policy;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        RngStream live(seed);
        const auto got = apply_policy(rec, policy, live);

        RngStream replay(seed);
        const auto d = draw_parameters(policy, rec.grid.h, rec.grid.w, replay);
        CHECK(std::fabs(d.rotate_deg) <= policy.rotate_max_deg);
        CHECK(std::fabs(d.shear_x_deg) <= policy.shear_max_deg);
        CHECK(d.scale >= policy.scale_lo);
        CHECK(d.scale <= policy.scale_hi);
        CHECK(std::llabs(d.dr) <= 1);
        FeatureGrid g = rec.grid;
        if (d.flip_h) g = oracle::flip_h(g);
        if (d.flip_v) g = oracle::flip_v(g);
        g = oracle::rotate(g, d.rotate_deg);
        g = oracle::shear(g, d.shear_x_deg, d.shear_y_deg);
        g = resize(g, d.scale);
        g = oracle::translate(g, d.dr, d.dc);
        const auto n = add_noise(g, rec.cls, d.noise_sigma_rel, replay);
        CHECK(bit_equal(got.grid, n.grid));
        CHECK(got.cls == n.cls);
        CHECK(got.label == rec.label);
        CHECK(live.counter() == replay.counter());
    }
}

TEST_CASE("geometric policy keeps labels, shapes and source values", "[augment]") {
    std::mt19937 gen(9);
    auto policy = AugmentationPolicy();
    policy.enabled.resize = false;
    policy.enabled.noise = false;
    for (uint64_t seed = 0; seed < 200; ++seed) {
        const auto rec = random_record(gen, 2 + seed % 6, 3 + seed % 4, 3, uint32_t(seed % 5));
        RngStream r(seed);
        const auto out = apply_policy(rec, policy, r);
        REQUIRE(out.grid.same_shape(rec.grid));
        CHECK(out.label == rec.label);
        CHECK(out.cls == rec.cls);
        // Nearest-neighbour ops only move whole cells around.
        for (uint32_t rr = 0; rr < out.grid.h; ++rr)
            for (uint32_t cc = 0; cc < out.grid.w; ++cc) {
                const auto cell = out.grid.cell(rr, cc);
                bool zero = true;
                for (float v : cell) zero = zero && v == 0.f;
                if (zero) continue;
                bool found = false;
                for (uint32_t sr = 0; sr < rec.grid.h && !found; ++sr)
                    for (uint32_t sc = 0; sc < rec.grid.w && !found; ++sc) {
                        const auto src = rec.grid.cell(sr, sc);
                        found = std::equal(src.begin(), src.end(), cell.begin());
                    }
                CHECK(found);
            }
    }
}

TEST_CASE("policy validation and JSON round trip", "[augment]") {
    AugmentationPolicy p;
    CHECK_NOTHROW(p.validate());
    CHECK_NOTHROW(AugmentationPolicy::none().validate());

    auto bad = p;
    bad.p_flip_h = 1.5;
    CHECK_THROWS_AS(bad.validate(), InvalidParameter);
    bad = p;
    bad.shear_max_deg = 90.0;
    CHECK_THROWS_AS(bad.validate(), InvalidParameter);
    bad = p;
    bad.translate_max_frac = 1.0;
    CHECK_THROWS_AS(bad.validate(), InvalidParameter);
    bad = p;
    bad.scale_lo = 1.1;
    CHECK_THROWS_AS(bad.validate(), InvalidParameter);
    bad = p;
    bad.noise_sigma_rel = -1;
    CHECK_THROWS_AS(bad.validate(), InvalidParameter);
    RngStream r(0);
    std::mt19937 gen(10);
    CHECK_THROWS_AS(apply_policy(random_record(gen, 2, 2, 2, 0), bad, r), InvalidParameter);

    p.p_flip_v = 0.25;
    p.scale_lo = 0.9;
    p.enabled.shear = false;
    const nlohmann::json j = p;
    CHECK(j.at("scale_range") == nlohmann::json::array({0.9, 1.25}));
    const auto q = j.get<AugmentationPolicy>();
    CHECK(nlohmann::json(q) == j);
    CHECK_FALSE(q.enabled.shear);

    const auto partial = nlohmann::json{{"rotate_max_deg", 5.0}}.get<AugmentationPolicy>();
    CHECK(partial.rotate_max_deg == 5.0);
    CHECK(partial.p_flip_h == 0.5);
    CHECK_THROWS_AS((nlohmann::json{{"scale_range", {1.0}}}.get<AugmentationPolicy>()), InvalidParameter);
}
