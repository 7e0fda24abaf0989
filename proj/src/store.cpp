// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#include "loffta/store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <utility>
#include <vector>

#include "loffta/error.hpp"
#include "loffta/half.hpp"

namespace loffta {

namespace fs = std::filesystem;

namespace {

template <class T>
T to_little(T v) noexcept {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    }
    return v;
}

template <class T>
void put(unsigned char* dst, T v) noexcept {
    v = to_little(v);
    std::memcpy(dst, &v, sizeof(T));
}

template <class T>
T get(const unsigned char* src) noexcept {
    T v;
    std::memcpy(&v, src, sizeof(T));
    return to_little(v);
}

std::array<unsigned char, kShardHeaderBytes> encode_header(const ShardHeader& h) {
    std::array<unsigned char, kShardHeaderBytes> out{};
    std::memcpy(out.data(), kShardMagic, 4);
    put<uint32_t>(out.data() + 4, h.version);
    out[8] = static_cast<unsigned char>(h.dtype);
    put<uint32_t>(out.data() + 12, h.d);
    put<uint32_t>(out.data() + 16, h.h);
    put<uint32_t>(out.data() + 20, h.w);
    put<uint64_t>(out.data() + 24, h.record_count);
    return out;
}

// Encodes values into the dtype's little-endian byte form.
void encode_values(std::ostream& os, std::span<const float> values, DType dtype) {
    constexpr std::size_t kChunk = 4096;
    std::array<unsigned char, kChunk * 4> buf;
    for (std::size_t i = 0; i < values.size(); i += kChunk) {
        const std::size_t n = std::min(kChunk, values.size() - i);
        if (dtype == DType::F32) {
            for (std::size_t j = 0; j < n; ++j) put<float>(buf.data() + 4 * j, values[i + j]);
            os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(4 * n));
        } else {
            for (std::size_t j = 0; j < n; ++j) put<uint16_t>(buf.data() + 2 * j, float_to_half(values[i + j]));
            os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(2 * n));
        }
    }
}

void check_storable(std::span<const float> values, DType dtype) {
    for (float v : values) {
        if (!std::isfinite(v)) throw InvalidValue("record contains a non-finite value");
        if (dtype == DType::F16 && std::fabs(v) > kHalfMax) {
            throw InvalidValue("value " + std::to_string(v) + " exceeds the f16 range");
        }
    }
}

}  // namespace

std::string_view to_string(DType dtype) noexcept { return dtype == DType::F32 ? "f32" : "f16"; }

DType parse_dtype(std::string_view name) {
    if (name == "f32") return DType::F32;
    if (name == "f16") return DType::F16;
    throw InvalidParameter("unknown dtype '" + std::string(name) + "' (expected f32 or f16)");
}

std::string shard_filename(std::string_view split, uint32_t shard_index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04u", shard_index);
    return std::string(split) + "-" + buf + ".lfta";
}

ShardSummary write_shard(std::span<const FeatureRecord> records, DType dtype, const fs::path& path) {
    ShardHeader header;
    header.dtype = dtype;
    header.record_count = records.size();
    if (!records.empty()) {
        header.d = records.front().grid.d;
        header.h = records.front().grid.h;
        header.w = records.front().grid.w;
    }
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (r.grid.d != header.d || r.grid.h != header.h || r.grid.w != header.w || r.cls.size() != header.d) {
            throw ShapeMismatch("record " + std::to_string(i) + " has shape (d=" + std::to_string(r.grid.d) +
                                ", h=" + std::to_string(r.grid.h) + ", w=" + std::to_string(r.grid.w) +
                                "), shard expects (d=" + std::to_string(header.d) + ", h=" +
                                std::to_string(header.h) + ", w=" + std::to_string(header.w) + ")");
        }
        r.validate();
        check_storable(r.cls, dtype);
        check_storable(r.grid.values, dtype);
    }

    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw StorageError("cannot open '" + tmp.string() + "' for writing");
        const auto hdr = encode_header(header);
        os.write(reinterpret_cast<const char*>(hdr.data()), hdr.size());
        for (const auto& r : records) {
            unsigned char label[4];
            put<uint32_t>(label, r.label);
            os.write(reinterpret_cast<const char*>(label), 4);
            encode_values(os, r.cls, dtype);
            encode_values(os, r.grid.values, dtype);
        }
        os.flush();
        if (!os) throw StorageError("write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw StorageError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
    return {header.record_count, header.file_bytes()};
}

ShardHeader read_shard_header(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CorruptShard(path.filename().string() + ": cannot open shard");
    std::array<unsigned char, kShardHeaderBytes> raw{};
    is.read(reinterpret_cast<char*>(raw.data()), raw.size());
    if (is.gcount() != static_cast<std::streamsize>(raw.size())) {
        throw CorruptShard(path.filename().string() + ": truncated header");
    }
    if (std::memcmp(raw.data(), kShardMagic, 4) != 0) {
        throw CorruptShard(path.filename().string() + ": bad magic bytes");
    }
    ShardHeader h;
    h.version = get<uint32_t>(raw.data() + 4);
    if (h.version != kShardVersion) {
        throw CorruptShard(path.filename().string() + ": unsupported version " + std::to_string(h.version));
    }
    if (raw[8] > 1) throw CorruptShard(path.filename().string() + ": unknown dtype code " + std::to_string(raw[8]));
    h.dtype = static_cast<DType>(raw[8]);
    h.d = get<uint32_t>(raw.data() + 12);
    h.h = get<uint32_t>(raw.data() + 16);
    h.w = get<uint32_t>(raw.data() + 20);
    h.record_count = get<uint64_t>(raw.data() + 24);
    if (h.d == 0 || h.h == 0 || h.w == 0) {
        throw CorruptShard(path.filename().string() + ": zero dimension in header");
    }
    return h;
}

ShardReader::ShardReader(const fs::path& path) : path_(path), header_(read_shard_header(path)) {
    fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd_ < 0) throw StorageError("cannot open '" + path.string() + "': " + std::strerror(errno));
    std::error_code ec;
    const auto size = fs::file_size(path, ec);
    if (ec || size < header_.file_bytes()) {
        ::close(fd_);
        fd_ = -1;
        throw CorruptShard(path.filename().string() + ": truncated (" + std::to_string(ec ? 0 : size) +
                           " bytes, header implies " + std::to_string(header_.file_bytes()) + ")");
    }
}

ShardReader::~ShardReader() {
    if (fd_ >= 0) ::close(fd_);
}

ShardReader::ShardReader(ShardReader&& other) noexcept
    : path_(std::move(other.path_)), header_(other.header_), fd_(std::exchange(other.fd_, -1)) {}

ShardReader& ShardReader::operator=(ShardReader&& other) noexcept {
    if (this != &other) {
        if (fd_ >= 0) ::close(fd_);
        path_ = std::move(other.path_);
        header_ = other.header_;
        fd_ = std::exchange(other.fd_, -1);
    }
    return *this;
}

void ShardReader::read_exact(void* dst, std::size_t bytes, uint64_t offset) const {
    auto* out = static_cast<char*>(dst);
    while (bytes > 0) {
        const ssize_t n = ::pread(fd_, out, bytes, static_cast<off_t>(offset));
        if (n < 0) {
            if (errno == EINTR) continue;
            throw StorageError(path_.filename().string() + ": read failed: " + std::strerror(errno));
        }
        if (n == 0) throw CorruptShard(path_.filename().string() + ": unexpected end of file");
        out += n;
        bytes -= static_cast<std::size_t>(n);
        offset += static_cast<uint64_t>(n);
    }
}

uint32_t ShardReader::read_label(uint64_t index) const {
    if (index >= header_.record_count) {
        throw IndexError(path_.filename().string() + ": record index " + std::to_string(index) +
                         " out of range [0, " + std::to_string(header_.record_count) + ")");
    }
    unsigned char raw[4];
    read_exact(raw, 4, header_.record_offset(index));
    return get<uint32_t>(raw);
}

FeatureRecord ShardReader::read(uint64_t index) const {
    const uint32_t label = read_label(index);
    const uint64_t base = header_.record_offset(index) + 4;
    FeatureRecord rec;
    rec.label = label;
    rec.cls.resize(header_.d);
    rec.grid = FeatureGrid(header_.h, header_.w, header_.d);

    if (header_.dtype == DType::F32) {
        // f32 payload decodes in place: no staging buffer.
        read_exact(rec.cls.data(), rec.cls.size() * 4, base);
        read_exact(rec.grid.values.data(), rec.grid.values.size() * 4, base + rec.cls.size() * 4);
        if constexpr (std::endian::native == std::endian::big) {
            for (auto& v : rec.cls) v = to_little(v);
            for (auto& v : rec.grid.values) v = to_little(v);
        }
    } else {
        std::array<uint16_t, 2048> chunk;
        auto widen = [&](float* dst, std::size_t count, uint64_t offset) {
            for (std::size_t i = 0; i < count; i += chunk.size()) {
                const std::size_t n = std::min(chunk.size(), count - i);
                read_exact(chunk.data(), n * 2, offset + i * 2);
                for (std::size_t j = 0; j < n; ++j) dst[i + j] = half_to_float(to_little(chunk[j]));
            }
        };
        widen(rec.cls.data(), rec.cls.size(), base);
        widen(rec.grid.values.data(), rec.grid.values.size(), base + rec.cls.size() * 2);
    }
    return rec;
}

}  // namespace loffta
