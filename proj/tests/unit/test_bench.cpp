// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <numeric>
#include <vector>

#include <catch_amalgamated.hpp>

#include "loffta/bench.hpp"
#include "loffta/error.hpp"
#include "loffta/provider.hpp"
#include "test_support.hpp"

using namespace loffta;
using namespace loffta::bench;
using loffta::testing::TempDir;

namespace {

train::TrainConfig bench_config(uint32_t batch) {
    train::TrainConfig c;
    c.batch_size = batch;
    c.model.embed_dim = 16;
    c.model.depth = 1;
    c.model.heads = 2;
    c.model.mlp_ratio = 2;
    return c;
}

}  // namespace

TEST_CASE("median", "[bench]") {
    CHECK(median({3, 1, 2}) == 2);
    CHECK(median({4, 1, 2, 3}) == 2.5);
    CHECK(median({}) == 0);
}

TEST_CASE("training and inference reports", "[bench]") {
    TempDir dir("bench");
    auto spec = loffta::testing::small_spec(24, 8, 4, 4);
    spec.test_per_class = 24;
    provider::build_cache(spec, dir / "a");

    const auto before = provider::invocation_count();
    const auto tr = bench_train(dir / "a", bench_config(16), 12);
    CHECK(provider::invocation_count() == before);
    CHECK(tr.mode == "train");
    CHECK(tr.measured_steps == 12 - kWarmupSteps);
    CHECK(tr.step_ms.size() == tr.measured_steps);
    CHECK(tr.batch_size == 16);
    CHECK(tr.d == 8);
    CHECK(tr.images_per_sec > 0);
    CHECK(tr.peak_tensor_bytes > 0);
    uint64_t in_hist = 0;
    for (const auto& b : tr.histogram) in_hist += b.count;
    CHECK(in_hist == tr.measured_steps);

    const nlohmann::json j = tr;
    for (const char* key : {"mode", "provider", "batch_size", "images_per_sec", "median_step_ms", "peak_tensor_bytes"})
        CHECK(j.contains(key));
    const auto table = to_table(tr);
    CHECK(table.find("images_per_sec") != std::string::npos);
    CHECK(std::count(table.begin(), table.end(), '\n') >= 5);

    CHECK_THROWS_AS(bench_train(dir / "a", bench_config(16), 9), InvalidParameter);
    CHECK_THROWS_AS(bench_train(dir / "missing", bench_config(16), 12), CacheError);

    // Forward-only passes are cheaper than full training steps.
    train::Trainer trainer(Cache(dir / "a"), bench_config(16));
    const auto ckpt = model::Checkpoint::from_classifier(trainer.model(), 0, 0);
    const auto inf = bench_infer(dir / "a", ckpt, 16, 30);
    CHECK(inf.mode == "infer");
    CHECK(inf.measured_steps == 30 - kWarmupSteps);
    CHECK(inf.images_per_sec > tr.images_per_sec);

    // Working memory grows with the batch.
    uint64_t prev = 0;
    for (uint32_t b : {8u, 32u, 64u}) {
        const auto r = bench_infer(dir / "a", ckpt, b, 10);
        CHECK(r.batch_size == b);
        CHECK(r.peak_tensor_bytes > prev);
        prev = r.peak_tensor_bytes;
    }
}

TEST_CASE("the provider descriptor does not change the work done", "[bench]") {
    TempDir dir("descriptor");
    auto spec = loffta::testing::small_spec(16, 8, 4, 4);
    provider::build_cache(spec, dir / "small");
    spec.descriptor = {"vit-giant", 1'100'000'000, 14, 224, "last layer"};
    provider::build_cache(spec, dir / "giant");

    const auto a = bench_train(dir / "small", bench_config(8), 10);
    const auto b = bench_train(dir / "giant", bench_config(8), 10);
    CHECK(a.provider == "synthetic");
    CHECK(b.provider == "vit-giant");
    CHECK(a.peak_tensor_bytes == b.peak_tensor_bytes);

    const auto ra = train::train(dir / "small", [] {
        auto c = bench_config(8);
        c.max_steps = 10;
        return c;
    }());
    const auto rb = train::train(dir / "giant", [] {
        auto c = bench_config(8);
        c.max_steps = 10;
        return c;
    }());
    CHECK(ra.step_losses == rb.step_losses);
}
