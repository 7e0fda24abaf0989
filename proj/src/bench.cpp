// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#include "loffta/bench.hpp"

#include <sys/resource.h>
#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "loffta/error.hpp"
#include "loffta/tracking.hpp"

namespace loffta::bench {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

void tune_allocator() noexcept {
#if defined(__GLIBC__)
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
#endif
}

namespace {

uint64_t peak_rss() {
    rusage ru{};
    if (getrusage(RUSAGE_SELF, &ru) != 0) return 0;
    return static_cast<uint64_t>(ru.ru_maxrss) * 1024u;
}

std::vector<HistogramBucket> histogram(const std::vector<double>& ms, std::size_t buckets = 8) {
    if (ms.empty()) return {};
    const auto [mn, mx] = std::minmax_element(ms.begin(), ms.end());
    const double lo = *mn, width = std::max((*mx - lo) / static_cast<double>(buckets), 1e-9);
    std::vector<HistogramBucket> out(buckets);
    for (std::size_t i = 0; i < buckets; ++i) out[i] = {lo + width * i, lo + width * (i + 1), 0};
    for (double v : ms) {
        auto b = static_cast<std::size_t>((v - lo) / width);
        ++out[std::min(b, buckets - 1)].count;
    }
    return out;
}

void finish(Report& r, std::vector<double> ms) {
    r.measured_steps = ms.size();
    const double total_ms = std::accumulate(ms.begin(), ms.end(), 0.0);
    r.images_per_sec = total_ms > 0 ? r.batch_size * static_cast<double>(ms.size()) * 1000.0 / total_ms : 0.0;
    r.mean_step_ms = ms.empty() ? 0.0 : total_ms / static_cast<double>(ms.size());
    r.median_step_ms = median(ms);
    r.histogram = histogram(ms);
    r.step_ms = std::move(ms);
    r.peak_rss_bytes = peak_rss();
}

double elapsed_ms(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

}  // namespace

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    if (v.size() % 2) return v[mid];
    const double hi = v[mid];
    return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
}

Report bench_train(const std::filesystem::path& cache_root, const train::TrainConfig& cfg, uint32_t steps) {
    if (steps < 10) throw InvalidParameter("bench needs at least 10 steps, got " + std::to_string(steps));
    tune_allocator();
    if (!std::filesystem::exists(cache_root)) throw CacheError("cache directory not found: " + cache_root.string());
    const Cache cache(cache_root);
    const auto base = mem::live_bytes();
    mem::reset_peak();

    train::Trainer trainer(cache, cfg);
    std::vector<double> ms;
    ms.reserve(steps);
    for (uint32_t i = 0; i < steps; ++i) {
        const auto t0 = Clock::now();
        trainer.step();
        const double dt = elapsed_ms(t0);
        if (i >= kWarmupSteps) ms.push_back(dt);
    }

    Report r;
    r.mode = "train";
    r.provider = cache.manifest().provider.name;
    r.batch_size = cfg.batch_size;
    r.d = cache.manifest().d;
    r.h = cache.manifest().h;
    r.w = cache.manifest().w;
    r.peak_tensor_bytes = mem::peak_bytes() > base ? mem::peak_bytes() - base : 0;
    finish(r, std::move(ms));
    return r;
}

Report bench_infer(const std::filesystem::path& cache_root, const model::Checkpoint& ckpt, uint32_t batch_size,
                   uint32_t steps, const std::string& split) {
    if (batch_size < 1) throw InvalidParameter("batch_size must be >= 1");
    tune_allocator();
    if (steps <= kWarmupSteps) throw InvalidParameter("bench needs more than " + std::to_string(kWarmupSteps) + " steps");
    if (!std::filesystem::exists(cache_root)) throw CacheError("cache directory not found: " + cache_root.string());
    const Cache cache(cache_root);
    if (!cache.has_split(split)) throw CacheError("cache has no split '" + split + "'");
    const uint64_t n = cache.split_size(split);
    if (n == 0) throw EmptySplit("split '" + split + "' is empty");
    const auto cfg = train::resolve_model(cache.manifest(), ckpt.config);
    if (cfg.in_dim != ckpt.config.in_dim || cfg.grid_h != ckpt.config.grid_h || cfg.grid_w != ckpt.config.grid_w) {
        throw ShapeMismatch("checkpoint input shape does not match the cache");
    }
    const auto base = mem::live_bytes();
    mem::reset_peak();
    const auto net = ckpt.to_classifier<float>();

    std::vector<double> ms;
    std::vector<uint64_t> idx(batch_size);
    uint64_t cursor = 0;
    for (uint32_t i = 0; i < steps; ++i) {
        for (auto& v : idx) v = cursor++ % n;
        const auto t0 = Clock::now();
        const auto batch = train::prepare_batch(cache, split, idx, 0, 0, {}, false);
        const auto logits = net.forward(batch);
        const double dt = elapsed_ms(t0);
        if (i >= kWarmupSteps) ms.push_back(dt);
    }
    Report r;
    r.mode = "infer";
    r.provider = cache.manifest().provider.name;
    r.batch_size = batch_size;
    r.d = cache.manifest().d;
    r.h = cache.manifest().h;
    r.w = cache.manifest().w;
    r.peak_tensor_bytes = mem::peak_bytes() > base ? mem::peak_bytes() - base : 0;
    finish(r, std::move(ms));
    return r;
}

void to_json(json& j, const Report& r) {
    json hist = json::array();
    for (const auto& b : r.histogram) hist.push_back({{"lo_ms", b.lo_ms}, {"hi_ms", b.hi_ms}, {"count", b.count}});
    j = json{{"mode", r.mode},
             {"provider", r.provider},
             {"batch_size", r.batch_size},
             {"d", r.d},
             {"h", r.h},
             {"w", r.w},
             {"measured_steps", r.measured_steps},
             {"images_per_sec", r.images_per_sec},
             {"median_step_ms", r.median_step_ms},
             {"mean_step_ms", r.mean_step_ms},
             {"peak_tensor_bytes", r.peak_tensor_bytes},
             {"peak_rss_bytes", r.peak_rss_bytes},
             {"per_step_ms", r.step_ms},
             {"histogram", std::move(hist)}};
}

std::string to_table(const Report& r) {
    std::vector<std::pair<std::string, std::string>> rows;
    auto fmt = [](double v, int prec) {
        std::ostringstream os;
        os << std::fixed << std::setprecision(prec) << v;
        return os.str();
    };
    rows.emplace_back("mode", r.mode);
    rows.emplace_back("provider", r.provider);
    rows.emplace_back("shape (d, h, w)",
                      std::to_string(r.d) + ", " + std::to_string(r.h) + ", " + std::to_string(r.w));
    rows.emplace_back("batch_size", std::to_string(r.batch_size));
    rows.emplace_back("measured_steps", std::to_string(r.measured_steps));
    rows.emplace_back("images_per_sec", fmt(r.images_per_sec, 1));
    rows.emplace_back("median_step_ms", fmt(r.median_step_ms, 3));
    rows.emplace_back("mean_step_ms", fmt(r.mean_step_ms, 3));
    rows.emplace_back("peak_tensor_bytes", std::to_string(r.peak_tensor_bytes));
    rows.emplace_back("peak_rss_bytes", std::to_string(r.peak_rss_bytes));
    for (const auto& b : r.histogram) {
        rows.emplace_back("  [" + fmt(b.lo_ms, 2) + ", " + fmt(b.hi_ms, 2) + ") ms", std::to_string(b.count));
    }
    std::size_t width = 0;
    for (const auto& [k, _] : rows) width = std::max(width, k.size());
    std::ostringstream os;
    for (const auto& [k, v] : rows) os << std::left << std::setw(static_cast<int>(width + 2)) << k << v << '\n';
    return os.str();
}

}  // namespace loffta::bench
