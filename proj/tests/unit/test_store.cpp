// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <thread>
#include <vector>

#include <catch_amalgamated.hpp>
#include <nlohmann/json.hpp>

#include "loffta/error.hpp"
#include "loffta/half.hpp"
#include "loffta/manifest.hpp"
#include "loffta/provider.hpp"
#include "loffta/store.hpp"
#include "test_support.hpp"

using namespace loffta;
using loffta::testing::TempDir;

namespace {

std::vector<FeatureRecord> make_records(std::size_t n, uint32_t d, uint32_t h, uint32_t w, uint32_t seed = 1) {
    std::mt19937 gen(seed);
    std::vector<FeatureRecord> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(testing::random_record(gen, h, w, d, static_cast<uint32_t>(i % 3)));
    return out;
}

std::vector<unsigned char> slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

template <class T>
T le_at(const std::vector<unsigned char>& b, std::size_t off) {
    T v{};
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(b[off + i]) << (8 * i));
    return v;
}

// Reference binary16 decoder written from the format definition.
double half_value(uint16_t bits) {
    const int sign = bits >> 15;
    const int exp = (bits >> 10) & 0x1f;
    const int mant = bits & 0x3ff;
    double v;
    if (exp == 0) {
        v = std::ldexp(static_cast<double>(mant), -24);
    } else if (exp == 31) {
        v = mant ? std::numeric_limits<double>::quiet_NaN() : std::numeric_limits<double>::infinity();
    } else {
        v = std::ldexp(1.0 + mant / 1024.0, exp - 15);
    }
    return sign ? -v : v;
}

// Nearest finite half by search over every non-negative finite encoding;
// ties go to the even mantissa.
uint16_t half_oracle(float x) {
    static const std::vector<std::pair<double, uint16_t>> table = [] {
        std::vector<std::pair<double, uint16_t>> t;
        for (uint32_t b = 0; b < 0x7c00; ++b) t.emplace_back(half_value(static_cast<uint16_t>(b)), static_cast<uint16_t>(b));
        return t;
    }();
    const double a = std::fabs(static_cast<double>(x));
    const uint16_t sign = std::signbit(x) ? 0x8000 : 0;
    auto it = std::lower_bound(table.begin(), table.end(), std::make_pair(a, uint16_t{0}),
                               [](const auto& l, const auto& r) { return l.first < r.first; });
    if (it == table.end()) {
        // Above 65504 the next step would be 65536 (not representable): values
        // below the 65520 midpoint round down, the rest overflow.
        return sign | (a < 65520.0 ? 0x7bff : 0x7c00);
    }
    if (it == table.begin() || it->first == a) return sign | it->second;
    const auto lo = *(it - 1), hi = *it;
    const double dlo = a - lo.first, dhi = hi.first - a;
    if (dlo < dhi) return sign | lo.second;
    if (dhi < dlo) return sign | hi.second;
    return sign | ((lo.second & 1) ? hi.second : lo.second);
}

}  // namespace

TEST_CASE("f32 shard round-trips bit-exactly", "[store]") {
    TempDir dir;
    const auto recs = make_records(3, 4, 2, 2);
    const auto summary = write_shard(recs, DType::F32, dir / "train-0000.lfta");
    CHECK(summary.record_count == 3);
    ShardReader reader(dir / "train-0000.lfta");
    REQUIRE(reader.record_count() == 3);
    for (uint64_t i = 0; i < 3; ++i) CHECK(bit_equal(reader.read(i), recs[i]));
    CHECK(bit_equal(read_record(reader, 1), recs[1]));
}

TEST_CASE("record size and offsets follow the byte layout", "[store]") {
    // label u32 + (cls d + grid h*w*d) f32 values: 4 + (4 + 16) * 4 = 84.
    ShardHeader hdr;
    hdr.d = 4;
    hdr.h = 2;
    hdr.w = 2;
    hdr.dtype = DType::F32;
    CHECK(hdr.record_bytes() == 84);
    CHECK(hdr.record_offset(2) == 32 + 168);
    hdr.dtype = DType::F16;
    CHECK(hdr.record_bytes() == 4 + 20 * 2);

    TempDir dir;
    const auto recs = make_records(3, 4, 2, 2);
    const auto summary = write_shard(recs, DType::F32, dir / "s.lfta");
    const auto bytes = slurp(dir / "s.lfta");
    REQUIRE(bytes.size() == summary.byte_length);
    REQUIRE(bytes.size() == 32 + 3 * 84);
    CHECK(std::memcmp(bytes.data(), "LFTA", 4) == 0);
    CHECK(le_at<uint32_t>(bytes, 4) == 1);
    CHECK(bytes[8] == 0);
    CHECK(bytes[9] == 0);
    CHECK(bytes[10] == 0);
    CHECK(bytes[11] == 0);
    CHECK(le_at<uint32_t>(bytes, 12) == 4);
    CHECK(le_at<uint32_t>(bytes, 16) == 2);
    CHECK(le_at<uint32_t>(bytes, 20) == 2);
    CHECK(le_at<uint64_t>(bytes, 24) == 3);
    // Seek straight to record 2 and decode it by hand.
    const std::size_t off = 32 + 2 * 84;
    CHECK(le_at<uint32_t>(bytes, off) == recs[2].label);
    for (uint32_t c = 0; c < 4; ++c)
        CHECK(std::bit_cast<float>(le_at<uint32_t>(bytes, off + 4 + 4 * c)) == recs[2].cls[c]);
    for (std::size_t i = 0; i < 16; ++i)
        CHECK(std::bit_cast<float>(le_at<uint32_t>(bytes, off + 20 + 4 * i)) == recs[2].grid.values[i]);
}

TEST_CASE("write_shard rejects mixed shapes and non-finite values", "[store]") {
    TempDir dir;
    auto recs = make_records(3, 4, 2, 2);
    std::mt19937 gen(5);
    recs.push_back(testing::random_record(gen, 2, 2, 3, 0));
    CHECK_THROWS_AS(write_shard(recs, DType::F32, dir / "bad.lfta"), ShapeMismatch);
    CHECK_FALSE(std::filesystem::exists(dir / "bad.lfta"));

    auto nan_recs = make_records(2, 4, 2, 2);
    nan_recs[1].grid.values[3] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(write_shard(nan_recs, DType::F32, dir / "nan.lfta"), InvalidValue);
    auto inf_recs = make_records(2, 4, 2, 2);
    inf_recs[0].cls[0] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(write_shard(inf_recs, DType::F32, dir / "inf.lfta"), InvalidValue);

    CHECK_THROWS_AS(write_shard(make_records(1, 4, 2, 2), DType::F32, dir / "no-such-dir" / "x.lfta"), StorageError);
}

TEST_CASE("read_record index bounds and truncation", "[store]") {
    TempDir dir;
    write_shard(make_records(2, 4, 2, 2), DType::F32, dir / "s.lfta");
    ShardReader reader(dir / "s.lfta");
    CHECK_THROWS_AS(reader.read(2), IndexError);
    CHECK_THROWS_AS(reader.read_label(2), IndexError);

    // Truncation may be caught on open or on the read that crosses the end.
    std::filesystem::resize_file(dir / "s.lfta", 32 + 84 + 10);
    CHECK_THROWS_AS(
        [&] {
            ShardReader cut(dir / "s.lfta");
            (void)cut.read(1);
        }(),
        CorruptShard);

    std::filesystem::resize_file(dir / "s.lfta", 20);
    CHECK_THROWS_AS(ShardReader(dir / "s.lfta"), CorruptShard);
}

TEST_CASE("binary16 conversion agrees with a search oracle", "[store][f16]") {
    // Every encoding decodes to the reference value.
    for (uint32_t b = 0; b < 0x10000; ++b) {
        const double ref = half_value(static_cast<uint16_t>(b));
        const float got = half_to_float(static_cast<uint16_t>(b));
        if (std::isnan(ref)) {
            CHECK(std::isnan(got));
        } else {
            REQUIRE(static_cast<double>(got) == ref);
            REQUIRE(std::signbit(got) == static_cast<bool>(b & 0x8000));
        }
    }
    // Encoding picks the nearest half, ties to even, including subnormals and midpoints.
    std::mt19937 gen(11);
    std::uniform_int_distribution<uint32_t> bits(0, 0xffffffffu);
    std::vector<float> probes = {0.0f, -0.0f, 1.0f, 65504.0f, 65519.99f, 5.9604645e-8f, 2.9802322e-8f,
                                 2.9802326e-8f, 1.00048828125f, 1.000732421875f, 6.1035156e-5f};
    for (uint32_t b = 0; b < 0x7c00; ++b) {
        // Midpoints between consecutive halves stress the tie rule.
        const double lo = half_value(static_cast<uint16_t>(b)), hi = half_value(static_cast<uint16_t>(b + 1));
        probes.push_back(static_cast<float>((lo + hi) / 2));
        probes.push_back(static_cast<float>(lo));
    }
    for (int i = 0; i < 200000; ++i) {
        const float f = std::bit_cast<float>(bits(gen));
        if (std::isfinite(f) && std::fabs(f) <= 65504.0f) probes.push_back(f);
    }
    for (float f : probes) REQUIRE(float_to_half(f) == half_oracle(f));
    CHECK(float_to_half(std::numeric_limits<float>::infinity()) == 0x7c00);
}

TEST_CASE("f16 shard stays within half-precision quantization", "[store][f16]") {
    TempDir dir;
    auto recs = make_records(4, 5, 3, 2);
    recs[0].grid.values[0] = 1000.25f;
    recs[1].cls[2] = 3.0e-6f;
    write_shard(recs, DType::F16, dir / "h.lfta");
    ShardReader reader(dir / "h.lfta");
    CHECK(reader.header().dtype == DType::F16);
    for (uint64_t i = 0; i < recs.size(); ++i) {
        const auto got = reader.read(i);
        CHECK(got.label == recs[i].label);
        auto check = [](float orig, float back) {
            const double q = half_value(half_oracle(orig));
            REQUIRE(static_cast<double>(back) == q);
        };
        for (std::size_t k = 0; k < got.cls.size(); ++k) check(recs[i].cls[k], got.cls[k]);
        for (std::size_t k = 0; k < got.grid.values.size(); ++k) check(recs[i].grid.values[k], got.grid.values[k]);
    }
    auto big = make_records(1, 2, 1, 1);
    big[0].grid.values[0] = 70000.0f;
    CHECK_THROWS_AS(write_shard(big, DType::F16, dir / "big.lfta"), InvalidValue);
}

TEST_CASE("concurrent readers see the same records as serial reads", "[store]") {
    TempDir dir;
    const auto recs = make_records(64, 6, 3, 3);
    write_shard(recs, DType::F32, dir / "s.lfta");
    const ShardReader reader(dir / "s.lfta");
    std::vector<int> ok(4, 1);
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t) {
        threads.emplace_back([&, t] {
            for (int rep = 0; rep < 20; ++rep)
                for (uint64_t i = static_cast<uint64_t>(t); i < recs.size(); i += 3)
                    if (!bit_equal(reader.read(i), recs[i])) ok[t] = 0;
        });
    }
    for (auto& th : threads) th.join();
    CHECK(std::all_of(ok.begin(), ok.end(), [](int v) { return v == 1; }));
}

TEST_CASE("a read holds at most two records of tracked memory", "[store]") {
    TempDir dir;
    const auto recs = make_records(8, 16, 4, 4);
    write_shard(recs, DType::F16, dir / "s.lfta");
    const ShardReader reader(dir / "s.lfta");
    const std::size_t record_bytes = reader.header().record_bytes();
    const std::size_t base = mem::live_bytes();
    mem::reset_peak();
    auto r = reader.read(5);
    CHECK(mem::peak_bytes() - base <= 2 * (4 + (16 + 16 * 16) * 4));
    CHECK(record_bytes == 4 + (16 + 256) * 2);
}

TEST_CASE("validate_cache accepts fresh caches and reports corruption", "[store][validate]") {
    TempDir dir;
    auto spec = testing::small_spec();
    provider::build_cache(spec, dir.path());
    CHECK(validate_cache(dir.path()).errors.empty());

    SECTION("corrupted magic names the shard") {
        const auto shard = dir / "val-0000.lfta";
        {
            std::fstream f(shard, std::ios::in | std::ios::out | std::ios::binary);
            f.seekp(0);
            f.write("XXXX", 4);
        }
        const auto rep = validate_cache(dir.path());
        REQUIRE(rep.errors.size() == 1);
        CHECK(rep.errors[0].find("val-0000.lfta") != std::string::npos);
    }
    SECTION("manifest count off by one") {
        auto m = load_manifest(dir.path());
        m.splits["train"] += 1;
        save_manifest(dir.path(), m);
        const auto rep = validate_cache(dir.path());
        REQUIRE_FALSE(rep.errors.empty());
        CHECK(rep.errors[0].find("count mismatch") != std::string::npos);
    }
    SECTION("missing manifest is reported, not thrown") {
        std::filesystem::remove(dir / kManifestFile);
        const auto rep = validate_cache(dir.path());
        REQUIRE(rep.errors.size() == 1);
        CHECK(rep.errors[0].find("ManifestMissing") != std::string::npos);
    }
    SECTION("shape mismatch between manifest and header") {
        auto m = load_manifest(dir.path());
        m.d += 1;
        save_manifest(dir.path(), m);
        const auto rep = validate_cache(dir.path());
        REQUIRE_FALSE(rep.errors.empty());
        CHECK(rep.errors[0].find("shape mismatch") != std::string::npos);
    }
    SECTION("label out of range") {
        auto m = load_manifest(dir.path());
        m.class_names.pop_back();
        save_manifest(dir.path(), m);
        const auto rep = validate_cache(dir.path());
        REQUIRE_FALSE(rep.errors.empty());
        bool found = false;
        for (const auto& e : rep.errors) found |= e.find("label out of range") != std::string::npos;
        CHECK(found);
    }
    SECTION("truncated shard") {
        const auto shard = dir / "test-0000.lfta";
        std::filesystem::resize_file(shard, std::filesystem::file_size(shard) - 7);
        const auto rep = validate_cache(dir.path());
        REQUIRE(rep.errors.size() == 1);
        CHECK(rep.errors[0].find("truncated") != std::string::npos);
    }
}

TEST_CASE("manifest JSON round-trips", "[store]") {
    TempDir dir;
    const auto m = provider::build_cache(testing::small_spec(), dir.path());
    const auto back = load_manifest(dir.path());
    CHECK(nlohmann::json(m) == nlohmann::json(back));
    CHECK(back.splits.at("train") == 24);
    CHECK(back.shards.at("train").at(0).file == "train-0000.lfta");
    CHECK(shard_filename("val", 12) == "val-0012.lfta");
    CHECK(back.normalization.has_value());
    CHECK(back.normalization->mean.size() == back.d);
}

TEST_CASE("Cache indexes across shards", "[store]") {
    TempDir dir;
    auto spec = testing::small_spec(20);
    provider::SyntheticProvider src(spec);
    provider::BuildOptions opts;
    opts.dataset_name = "multi";
    opts.records_per_shard = 7;
    provider::build_cache(src, dir.path(), opts);
    REQUIRE(validate_cache(dir.path()).errors.empty());
    const Cache cache(dir.path());
    CHECK(cache.manifest().shards.at("train").size() == 9);
    CHECK(cache.split_size("train") == 60);
    // Index 15 is record 1 of the third shard.
    ShardReader third(dir / "train-0002.lfta");
    CHECK(bit_equal(cache.read("train", 15), third.read(1)));
    CHECK(cache.label("train", 15) == third.read_label(1));
    CHECK_THROWS_AS(cache.read("train", 60), IndexError);
    CHECK_THROWS_AS(Cache(dir / "missing"), CacheError);
}
