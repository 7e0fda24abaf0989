// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loffta/model.hpp"
#include "loffta/trainer.hpp"

namespace loffta::bench {

struct HistogramBucket {
    double lo_ms = 0.0;
    double hi_ms = 0.0;
    uint64_t count = 0;
};

struct Report {
    std::string mode;  // "train" or "infer"
    std::string provider;
    uint32_t batch_size = 0;
    uint32_t d = 0, h = 0, w = 0;
    uint64_t measured_steps = 0;
    /// batch_size * measured_steps / summed wall time of the measured steps.
    double images_per_sec = 0.0;
    double median_step_ms = 0.0;
    double mean_step_ms = 0.0;
    /// Peak tracked numeric-buffer bytes above the level at bench start.
    uint64_t peak_tensor_bytes = 0;
    /// Process peak RSS; informational.
    uint64_t peak_rss_bytes = 0;
    std::vector<double> step_ms;
    std::vector<HistogramBucket> histogram;
};

void to_json(nlohmann::json& j, const Report& r);
/// Two-column aligned text table.
std::string to_table(const Report& r);

inline constexpr uint32_t kWarmupSteps = 3;

/// Stops glibc from returning freed heap to the kernel, so buffers freed and
/// reallocated every step do not page-fault again. Process-wide; no-op on
/// other C libraries. Called by the bench entry points and the CLI.
void tune_allocator() noexcept;

/// Runs `steps` trainer steps (the first kWarmupSteps untimed in the
/// report) with the trainer's own read + augment + update path and no
/// epoch-end evaluation. Throws InvalidParameter when steps < 10 and
/// CacheError for an invalid cache.
Report bench_train(const std::filesystem::path& cache_root, const train::TrainConfig& cfg, uint32_t steps);

/// Forward-only throughput over `split` (default test), no augmentation.
/// Batches wrap around the split until `steps` batches ran; the first
/// kWarmupSteps are discarded.
Report bench_infer(const std::filesystem::path& cache_root, const model::Checkpoint& ckpt, uint32_t batch_size,
                   uint32_t steps = 20, const std::string& split = "test");

/// Median of a sample; 0 for empty input.
double median(std::vector<double> v);

}  // namespace loffta::bench
