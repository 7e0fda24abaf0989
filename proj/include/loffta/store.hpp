// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include "loffta/grid.hpp"

namespace loffta {

enum class DType : uint8_t { F32 = 0, F16 = 1 };

std::string_view to_string(DType dtype) noexcept;
/// Accepts "f32" / "f16"; throws InvalidParameter otherwise.
DType parse_dtype(std::string_view name);
inline constexpr std::size_t dtype_bytes(DType dtype) noexcept { return dtype == DType::F32 ? 4 : 2; }

// Shard layout, all little-endian:
//   0  char[4] magic "LFTA"
//   4  u32     version (1)
//   8  u8      dtype (0 = f32, 1 = f16)
//   9  u8[3]   reserved, zero
//   12 u32     d
//   16 u32     h
//   20 u32     w
//   24 u64     record_count
//   32 records: [label u32][cls: d values][grid: h*w*d values]
inline constexpr char kShardMagic[4] = {'L', 'F', 'T', 'A'};
inline constexpr uint32_t kShardVersion = 1;
inline constexpr std::size_t kShardHeaderBytes = 32;

struct ShardHeader {
    uint32_t version = kShardVersion;
    DType dtype = DType::F32;
    uint32_t d = 0;
    uint32_t h = 0;
    uint32_t w = 0;
    uint64_t record_count = 0;

    std::size_t record_bytes() const noexcept {
        return sizeof(uint32_t) +
               (static_cast<std::size_t>(d) + static_cast<std::size_t>(h) * w * d) * dtype_bytes(dtype);
    }
    uint64_t record_offset(uint64_t index) const noexcept {
        return kShardHeaderBytes + index * static_cast<uint64_t>(record_bytes());
    }
    uint64_t file_bytes() const noexcept { return record_offset(record_count); }
};

struct ShardSummary {
    uint64_t record_count = 0;
    uint64_t byte_length = 0;
};

/// Writes header + records. All records must share (d, h, w) and be finite.
/// The file is written to a temporary sibling and renamed into place.
ShardSummary write_shard(std::span<const FeatureRecord> records, DType dtype,
                         const std::filesystem::path& path);

/// Parses and checks the 32-byte header (magic, version, dtype code, non-zero dims).
/// Throws CorruptShard naming the file.
ShardHeader read_shard_header(const std::filesystem::path& path);

/// Read-only view of one shard. Reads use positional I/O, so one reader can be
/// shared across threads.
class ShardReader {
public:
    explicit ShardReader(const std::filesystem::path& path);
    ~ShardReader();
    ShardReader(ShardReader&& other) noexcept;
    ShardReader& operator=(ShardReader&& other) noexcept;
    ShardReader(const ShardReader&) = delete;
    ShardReader& operator=(const ShardReader&) = delete;

    const ShardHeader& header() const noexcept { return header_; }
    uint64_t record_count() const noexcept { return header_.record_count; }
    const std::filesystem::path& path() const noexcept { return path_; }

    FeatureRecord read(uint64_t index) const;
    /// Reads only the label word of a record.
    uint32_t read_label(uint64_t index) const;

private:
    void read_exact(void* dst, std::size_t bytes, uint64_t offset) const;

    std::filesystem::path path_;
    ShardHeader header_;
    int fd_ = -1;
};

inline FeatureRecord read_record(const ShardReader& shard, uint64_t index) { return shard.read(index); }

std::string shard_filename(std::string_view split, uint32_t shard_index);

}  // namespace loffta
