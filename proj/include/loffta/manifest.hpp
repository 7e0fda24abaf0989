// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loffta/store.hpp"

namespace loffta {

inline constexpr uint32_t kManifestVersion = 1;
inline constexpr const char* kManifestFile = "manifest.json";

/// Identity of the model that produced a cache. Metadata only.
struct ProviderDescriptor {
    std::string name;
    uint64_t param_count = 0;
    uint32_t patch_size = 1;
    uint32_t source_image_size = 0;
    /// Which layer's tokens were cached, as free text.
    std::string feature_layer;
};

enum class PoolMode { Max, Average };
std::string_view to_string(PoolMode mode) noexcept;
PoolMode parse_pool_mode(std::string_view name);

struct PoolingInfo {
    PoolMode mode = PoolMode::Max;
    uint32_t kernel = 2;
    uint32_t stride = 2;
};

/// Per-channel statistics of the train split grid values.
struct Normalization {
    std::vector<double> mean;
    std::vector<double> std;
};

struct ShardEntry {
    std::string file;
    uint64_t records = 0;
};

struct CacheManifest {
    uint32_t format_version = kManifestVersion;
    std::string dataset_name;
    std::vector<std::string> class_names;
    ProviderDescriptor provider;
    uint32_t d = 0;
    uint32_t h = 0;
    uint32_t w = 0;
    DType dtype = DType::F32;
    std::map<std::string, uint64_t> splits;
    std::map<std::string, std::vector<ShardEntry>> shards;
    std::optional<PoolingInfo> pooling;
    std::optional<Normalization> normalization;

    uint32_t num_classes() const noexcept { return static_cast<uint32_t>(class_names.size()); }
    bool has_split(const std::string& name) const { return splits.count(name) != 0; }
};

void to_json(nlohmann::json& j, const ProviderDescriptor& p);
void from_json(const nlohmann::json& j, ProviderDescriptor& p);
void to_json(nlohmann::json& j, const CacheManifest& m);
void from_json(const nlohmann::json& j, CacheManifest& m);

/// Throws CacheError when missing or malformed.
CacheManifest load_manifest(const std::filesystem::path& root);
/// Whole-file atomic: writes manifest.json.tmp then renames.
void save_manifest(const std::filesystem::path& root, const CacheManifest& manifest);

struct ValidationReport {
    std::vector<std::string> errors;
    std::vector<std::string> warnings;
    bool ok() const noexcept { return errors.empty(); }
};

/// Checks manifest <-> shard consistency: presence, magic, version, dtype,
/// (d, h, w), record counts, file length and label range. Never throws for
/// cache defects; they are reported.
ValidationReport validate_cache(const std::filesystem::path& root);

/// Opened, validated cache giving indexed access to each split.
class Cache {
public:
    /// Validates first; throws CacheError carrying the first validation error.
    explicit Cache(const std::filesystem::path& root);

    const CacheManifest& manifest() const noexcept { return manifest_; }
    const std::filesystem::path& root() const noexcept { return root_; }

    bool has_split(const std::string& split) const { return splits_.count(split) != 0; }
    uint64_t split_size(const std::string& split) const;
    /// Index is split-global, across its shards in manifest order.
    FeatureRecord read(const std::string& split, uint64_t index) const;
    uint32_t label(const std::string& split, uint64_t index) const;

private:
    struct SplitShards {
        std::vector<ShardReader> readers;
        std::vector<uint64_t> starts;
        uint64_t total = 0;
    };
    const SplitShards& split(const std::string& name) const;
    std::pair<const ShardReader*, uint64_t> locate(const std::string& split, uint64_t index) const;

    std::filesystem::path root_;
    CacheManifest manifest_;
    std::map<std::string, SplitShards> splits_;
};

/// Per-channel mean/std over every grid cell of a split.
Normalization compute_normalization(const Cache& cache, const std::string& split);

}  // namespace loffta
