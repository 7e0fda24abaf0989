// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>

#include "loffta/grid.hpp"
#include "loffta/manifest.hpp"

namespace loffta::reduce {

/// Per-channel max or mean over kernel x kernel windows. Output side is
/// floor((side - kernel) / stride) + 1; windows that do not fit are dropped.
FeatureGrid pool(const FeatureGrid& g, PoolMode mode, uint32_t kernel, uint32_t stride);

/// Pools every record of every split from `in_root` into a new cache at
/// `out_root` (same shard layout and dtype). cls and labels are copied,
/// normalization statistics are recomputed on the pooled train split.
CacheManifest pool_cache(const std::filesystem::path& in_root, const std::filesystem::path& out_root,
                         PoolMode mode, uint32_t kernel, uint32_t stride);

}  // namespace loffta::reduce
