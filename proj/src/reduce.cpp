// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#include "loffta/reduce.hpp"

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "loffta/error.hpp"

namespace loffta::reduce {

namespace fs = std::filesystem;

FeatureGrid pool(const FeatureGrid& g, PoolMode mode, uint32_t kernel, uint32_t stride) {
    g.validate();
    if (kernel < 1 || kernel > std::min(g.h, g.w)) {
        throw InvalidParameter("pool kernel " + std::to_string(kernel) + " must be in [1, min(h, w) = " +
                               std::to_string(std::min(g.h, g.w)) + "]");
    }
    if (stride < 1) throw InvalidParameter("pool stride must be >= 1");
    const uint32_t oh = (g.h - kernel) / stride + 1;
    const uint32_t ow = (g.w - kernel) / stride + 1;
    FeatureGrid out(oh, ow, g.d);
    std::vector<double> acc(g.d);
    const double inv = 1.0 / (static_cast<double>(kernel) * kernel);
    for (uint32_t r = 0; r < oh; ++r) {
        for (uint32_t c = 0; c < ow; ++c) {
            float* dst = out.cell(r, c).data();
            if (mode == PoolMode::Max) {
                std::fill(dst, dst + g.d, -std::numeric_limits<float>::infinity());
            } else {
                std::fill(acc.begin(), acc.end(), 0.0);
            }
            for (uint32_t i = 0; i < kernel; ++i) {
                for (uint32_t j = 0; j < kernel; ++j) {
                    const float* src = g.cell(r * stride + i, c * stride + j).data();
                    if (mode == PoolMode::Max) {
                        for (uint32_t k = 0; k < g.d; ++k) dst[k] = std::max(dst[k], src[k]);
                    } else {
                        for (uint32_t k = 0; k < g.d; ++k) acc[k] += src[k];
                    }
                }
            }
            if (mode == PoolMode::Average) {
                for (uint32_t k = 0; k < g.d; ++k) dst[k] = static_cast<float>(acc[k] * inv);
            }
        }
    }
    return out;
}

CacheManifest pool_cache(const fs::path& in_root, const fs::path& out_root, PoolMode mode, uint32_t kernel,
                         uint32_t stride) {
    const Cache in(in_root);  // throws CacheError for an invalid input cache
    const CacheManifest& src = in.manifest();
    if (kernel < 1 || kernel > std::min(src.h, src.w)) {
        throw InvalidParameter("pool kernel " + std::to_string(kernel) + " does not fit a " + std::to_string(src.h) +
                               "x" + std::to_string(src.w) + " grid");
    }
    if (stride < 1) throw InvalidParameter("pool stride must be >= 1");
    std::error_code ec;
    fs::create_directories(out_root, ec);
    if (ec) throw StorageError("cannot create " + out_root.string() + ": " + ec.message());
    if (fs::equivalent(in_root, out_root, ec)) throw InvalidParameter("pool output must differ from its input");

    CacheManifest out = src;
    out.h = (src.h - kernel) / stride + 1;
    out.w = (src.w - kernel) / stride + 1;
    out.pooling = PoolingInfo{mode, kernel, stride};
    out.shards.clear();

    for (const auto& [split, entries] : src.shards) {
        uint64_t base = 0;
        auto& dst_entries = out.shards[split];
        for (const auto& entry : entries) {
            std::vector<FeatureRecord> pooled;
            pooled.reserve(entry.records);
            for (uint64_t i = 0; i < entry.records; ++i) {
                FeatureRecord rec = in.read(split, base + i);
                rec.grid = pool(rec.grid, mode, kernel, stride);
                pooled.push_back(std::move(rec));
            }
            base += entry.records;
            const auto summary = write_shard(pooled, src.dtype, out_root / entry.file);
            dst_entries.push_back({entry.file, summary.record_count});
        }
    }
    out.normalization.reset();
    save_manifest(out_root, out);
    if (out.has_split("train")) {
        out.normalization = compute_normalization(Cache(out_root), "train");
        save_manifest(out_root, out);
    }
    return out;
}

}  // namespace loffta::reduce
