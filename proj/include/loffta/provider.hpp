// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loffta/grid.hpp"
#include "loffta/manifest.hpp"
#include "loffta/rng.hpp"

namespace loffta::provider {

/// One record pulled from a provider.
struct ProvidedRecord {
    uint64_t sample_id = 0;
    std::string split;
    FeatureRecord record;
};

/// Source of feature records for cache construction. Implementations are
/// pull iterators; a real foundation-model extractor writes the same format.
class FeatureProvider {
public:
    virtual ~FeatureProvider() = default;
    virtual ProviderDescriptor descriptor() const = 0;
    virtual std::vector<std::string> class_names() const = 0;
    virtual uint32_t d() const = 0;
    virtual uint32_t h() const = 0;
    virtual uint32_t w() const = 0;
    /// Next record, or nullopt when exhausted.
    virtual std::optional<ProvidedRecord> next() = 0;
};

/// Total number of records produced by any provider in this process. Code
/// that must never touch a provider (the training loop) asserts it is unchanged.
uint64_t invocation_count() noexcept;

struct SyntheticSpec {
    uint32_t classes = 10;
    uint32_t train_per_class = 100;
    uint32_t val_per_class = 20;
    uint32_t test_per_class = 20;
    uint32_t d = 64;
    uint32_t h = 6;
    uint32_t w = 6;
    /// Norm of each class mean vector.
    double gamma = 3.0;
    /// Per-element within-class noise std.
    double sigma = 1.0;
    uint32_t spatial_rank = 3;
    /// Scale of the class-specific spatial patterns relative to gamma; 0 removes them.
    double spatial_amplitude = 1.0;
    uint64_t seed = 0;
    DType dtype = DType::F32;
    std::string dataset_name = "synthetic";
    /// Shown in the manifest only; never read by training.
    ProviderDescriptor descriptor{"synthetic", 0, 1, 0, "synthetic class means + low-rank spatial fields"};

    void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

/// grid(r, c) = mu_c + sum_k a_k(c) * b_k(r, c) + N(0, sigma^2) per channel,
/// cls = mu_c + N(0, sigma^2). mu_c has norm gamma, a_k(c) has norm
/// gamma * spatial_amplitude, and b_k are smooth sinusoidal fields in [-1, 1]
/// shared by all classes. Noise comes from `rng`; structure from spec.seed.
FeatureRecord synth_record(const SyntheticSpec& spec, uint32_t cls, RngStream& rng);

/// Emits train, val, then test records; within a split classes cycle
/// 0..C-1 so every prefix is near-balanced. Record i of split s draws its
/// noise from RngStream::derive(seed, {s, i}).
class SyntheticProvider final : public FeatureProvider {
public:
    explicit SyntheticProvider(SyntheticSpec spec);

    ProviderDescriptor descriptor() const override { return spec_.descriptor; }
    std::vector<std::string> class_names() const override;
    uint32_t d() const override { return spec_.d; }
    uint32_t h() const override { return spec_.h; }
    uint32_t w() const override { return spec_.w; }
    std::optional<ProvidedRecord> next() override;

    const SyntheticSpec& spec() const noexcept { return spec_; }

private:
    SyntheticSpec spec_;
    std::size_t split_index_ = 0;
    uint64_t record_index_ = 0;
    uint64_t sample_id_ = 0;
};

struct BuildOptions {
    std::string dataset_name;
    DType dtype = DType::F32;
    uint64_t records_per_shard = 4096;
};

/// Drains a provider into shards `<split>-<nnnn>.lfta` plus manifest.json.
CacheManifest build_cache(FeatureProvider& source, const std::filesystem::path& out_root, const BuildOptions& opts);

/// Synthetic cache with train/val/test splits sized by the spec fields.
CacheManifest build_cache(const SyntheticSpec& spec, const std::filesystem::path& out_root);

}  // namespace loffta::provider
