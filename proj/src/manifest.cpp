// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#include "loffta/manifest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "loffta/error.hpp"

namespace loffta {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(PoolMode mode) noexcept { return mode == PoolMode::Max ? "max" : "average"; }

PoolMode parse_pool_mode(std::string_view name) {
    if (name == "max") return PoolMode::Max;
    if (name == "average" || name == "avg") return PoolMode::Average;
    throw InvalidParameter("unknown pooling mode '" + std::string(name) + "' (expected max or average)");
}

void to_json(json& j, const ProviderDescriptor& p) {
    j = json{{"name", p.name},
             {"param_count", p.param_count},
             {"patch_size", p.patch_size},
             {"source_image_size", p.source_image_size},
             {"feature_layer", p.feature_layer}};
}

void from_json(const json& j, ProviderDescriptor& p) {
    j.at("name").get_to(p.name);
    p.param_count = j.value("param_count", uint64_t{0});
    p.patch_size = j.value("patch_size", uint32_t{1});
    p.source_image_size = j.value("source_image_size", uint32_t{0});
    p.feature_layer = j.value("feature_layer", std::string{});
}

void to_json(json& j, const CacheManifest& m) {
    j = json{{"format_version", m.format_version},
             {"dataset_name", m.dataset_name},
             {"class_names", m.class_names},
             {"provider", m.provider},
             {"d", m.d},
             {"h", m.h},
             {"w", m.w},
             {"dtype", to_string(m.dtype)},
             {"splits", m.splits}};
    json shards = json::object();
    for (const auto& [split, entries] : m.shards) {
        json arr = json::array();
        for (const auto& e : entries) arr.push_back({{"file", e.file}, {"records", e.records}});
        shards[split] = std::move(arr);
    }
    j["shards"] = std::move(shards);
    if (m.pooling) {
        j["pooling"] = {{"mode", to_string(m.pooling->mode)},
                        {"kernel", m.pooling->kernel},
                        {"stride", m.pooling->stride}};
    } else {
        j["pooling"] = nullptr;
    }
    if (m.normalization) {
        j["normalization"] = {{"mean", m.normalization->mean}, {"std", m.normalization->std}};
    } else {
        j["normalization"] = nullptr;
    }
}

void from_json(const json& j, CacheManifest& m) {
    m.format_version = j.at("format_version").get<uint32_t>();
    m.dataset_name = j.value("dataset_name", std::string{});
    j.at("class_names").get_to(m.class_names);
    j.at("provider").get_to(m.provider);
    j.at("d").get_to(m.d);
    j.at("h").get_to(m.h);
    j.at("w").get_to(m.w);
    m.dtype = parse_dtype(j.at("dtype").get<std::string>());
    m.splits = j.at("splits").get<std::map<std::string, uint64_t>>();
    m.shards.clear();
    if (j.contains("shards")) {
        for (const auto& [split, arr] : j.at("shards").items()) {
            auto& entries = m.shards[split];
            for (const auto& e : arr) entries.push_back({e.at("file").get<std::string>(), e.at("records").get<uint64_t>()});
        }
    }
    m.pooling.reset();
    if (j.contains("pooling") && !j.at("pooling").is_null()) {
        const auto& p = j.at("pooling");
        m.pooling = PoolingInfo{parse_pool_mode(p.at("mode").get<std::string>()), p.at("kernel").get<uint32_t>(),
                                p.at("stride").get<uint32_t>()};
    }
    m.normalization.reset();
    if (j.contains("normalization") && !j.at("normalization").is_null()) {
        const auto& n = j.at("normalization");
        m.normalization = Normalization{n.at("mean").get<std::vector<double>>(), n.at("std").get<std::vector<double>>()};
    }
}

CacheManifest load_manifest(const fs::path& root) {
    const fs::path file = root / kManifestFile;
    std::ifstream is(file);
    if (!is) throw CacheError("manifest missing: " + file.string());
    try {
        return json::parse(is).get<CacheManifest>();
    } catch (const json::exception& e) {
        throw CacheError("malformed manifest " + file.string() + ": " + e.what());
    } catch (const InvalidParameter& e) {
        throw CacheError("malformed manifest " + file.string() + ": " + e.what());
    }
}

void save_manifest(const fs::path& root, const CacheManifest& manifest) {
    const fs::path file = root / kManifestFile;
    fs::path tmp = file;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::trunc);
        if (!os) throw StorageError("cannot write " + tmp.string());
        os << json(manifest).dump(2) << '\n';
        if (!os) throw StorageError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, file, ec);
    if (ec) throw StorageError("cannot rename manifest into place: " + ec.message());
}

ValidationReport validate_cache(const fs::path& root) {
    ValidationReport report;
    if (!fs::is_directory(root)) {
        report.errors.push_back("cache root is not a directory: " + root.string());
        return report;
    }
    CacheManifest m;
    try {
        m = load_manifest(root);
    } catch (const CacheError& e) {
        report.errors.push_back(std::string("ManifestMissing: ") + e.what());
        return report;
    }
    if (m.format_version != kManifestVersion) {
        report.errors.push_back("unsupported manifest format_version " + std::to_string(m.format_version));
    }
    if (m.d == 0 || m.h == 0 || m.w == 0) report.errors.push_back("manifest has a zero dimension");
    if (m.class_names.empty()) report.errors.push_back("manifest lists no classes");
    if (m.splits.empty()) report.errors.push_back("manifest lists no splits");
    if (m.provider.patch_size < 1) report.errors.push_back("provider patch_size must be >= 1");
    if (m.normalization && (m.normalization->mean.size() != m.d || m.normalization->std.size() != m.d)) {
        report.warnings.push_back("normalization statistics do not match d");
    }
    for (const auto& [split, _] : m.shards) {
        if (!m.splits.count(split)) report.errors.push_back("shards listed for undeclared split '" + split + "'");
    }

    const uint32_t classes = m.num_classes();
    for (const auto& [split, declared] : m.splits) {
        const auto it = m.shards.find(split);
        if (it == m.shards.end() || it->second.empty()) {
            if (declared > 0) report.errors.push_back("split '" + split + "' declares records but lists no shards");
            continue;
        }
        uint64_t listed = 0;
        for (const auto& entry : it->second) {
            listed += entry.records;
            const fs::path file = root / entry.file;
            if (!fs::exists(file)) {
                report.errors.push_back(entry.file + ": shard missing");
                continue;
            }
            ShardHeader hdr;
            try {
                hdr = read_shard_header(file);
            } catch (const CorruptShard& e) {
                report.errors.push_back(e.what());
                continue;
            }
            bool shape_ok = true;
            if (hdr.d != m.d || hdr.h != m.h || hdr.w != m.w) {
                report.errors.push_back(entry.file + ": shape mismatch, header (d=" + std::to_string(hdr.d) +
                                        ", h=" + std::to_string(hdr.h) + ", w=" + std::to_string(hdr.w) +
                                        ") vs manifest (d=" + std::to_string(m.d) + ", h=" + std::to_string(m.h) +
                                        ", w=" + std::to_string(m.w) + ")");
                shape_ok = false;
            }
            if (hdr.dtype != m.dtype) {
                report.errors.push_back(entry.file + ": dtype mismatch, header " + std::string(to_string(hdr.dtype)) +
                                        " vs manifest " + std::string(to_string(m.dtype)));
                shape_ok = false;
            }
            if (hdr.record_count != entry.records) {
                report.errors.push_back(entry.file + ": count mismatch, header holds " +
                                        std::to_string(hdr.record_count) + " records, manifest lists " +
                                        std::to_string(entry.records));
            }
            const auto size = fs::file_size(file);
            if (size < hdr.file_bytes()) {
                report.errors.push_back(entry.file + ": truncated, " + std::to_string(size) + " bytes, expected " +
                                        std::to_string(hdr.file_bytes()));
                continue;
            }
            if (size > hdr.file_bytes()) {
                report.warnings.push_back(entry.file + ": " + std::to_string(size - hdr.file_bytes()) +
                                          " trailing bytes");
            }
            if (!shape_ok) continue;
            try {
                ShardReader reader(file);
                uint64_t bad = 0;
                uint64_t first_bad = 0;
                uint32_t first_label = 0;
                for (uint64_t i = 0; i < reader.record_count(); ++i) {
                    const uint32_t label = reader.read_label(i);
                    if (label >= classes) {
                        if (bad++ == 0) {
                            first_bad = i;
                            first_label = label;
                        }
                    }
                }
                if (bad > 0) {
                    report.errors.push_back(entry.file + ": label out of range, " + std::to_string(bad) +
                                            " record(s), first at index " + std::to_string(first_bad) +
                                            " with label " + std::to_string(first_label) + " >= " +
                                            std::to_string(classes) + " classes");
                }
            } catch (const Error& e) {
                report.errors.push_back(entry.file + ": " + e.what());
            }
        }
        if (listed != declared) {
            report.errors.push_back("split '" + split + "': count mismatch, manifest declares " +
                                    std::to_string(declared) + " records, shards list " + std::to_string(listed));
        }
    }
    return report;
}

Cache::Cache(const fs::path& root) : root_(root) {
    const auto report = validate_cache(root);
    if (!report.ok()) {
        throw CacheError("invalid cache " + root.string() + ": " + report.errors.front());
    }
    manifest_ = load_manifest(root);
    for (const auto& [split, count] : manifest_.splits) {
        SplitShards s;
        const auto it = manifest_.shards.find(split);
        if (it != manifest_.shards.end()) {
            for (const auto& entry : it->second) {
                s.starts.push_back(s.total);
                s.readers.emplace_back(root / entry.file);
                s.total += s.readers.back().record_count();
            }
        }
        splits_.emplace(split, std::move(s));
    }
}

const Cache::SplitShards& Cache::split(const std::string& name) const {
    const auto it = splits_.find(name);
    if (it == splits_.end()) throw CacheError("cache " + root_.string() + " has no split '" + name + "'");
    return it->second;
}

uint64_t Cache::split_size(const std::string& name) const { return split(name).total; }

std::pair<const ShardReader*, uint64_t> Cache::locate(const std::string& name, uint64_t index) const {
    const auto& s = split(name);
    if (index >= s.total) {
        throw IndexError("split '" + name + "' index " + std::to_string(index) + " out of range [0, " +
                         std::to_string(s.total) + ")");
    }
    const auto pos = std::upper_bound(s.starts.begin(), s.starts.end(), index) - s.starts.begin() - 1;
    return {&s.readers[static_cast<std::size_t>(pos)], index - s.starts[static_cast<std::size_t>(pos)]};
}

FeatureRecord Cache::read(const std::string& name, uint64_t index) const {
    const auto [reader, local] = locate(name, index);
    return reader->read(local);
}

uint32_t Cache::label(const std::string& name, uint64_t index) const {
    const auto [reader, local] = locate(name, index);
    return reader->read_label(local);
}

Normalization compute_normalization(const Cache& cache, const std::string& split) {
    const uint32_t d = cache.manifest().d;
    std::vector<double> sum(d, 0.0), sq(d, 0.0);
    uint64_t cells = 0;
    const uint64_t n = cache.split_size(split);
    for (uint64_t i = 0; i < n; ++i) {
        const auto rec = cache.read(split, i);
        const auto& v = rec.grid.values;
        for (std::size_t k = 0; k < v.size(); k += d) {
            for (uint32_t c = 0; c < d; ++c) {
                sum[c] += v[k + c];
                sq[c] += static_cast<double>(v[k + c]) * v[k + c];
            }
            ++cells;
        }
    }
    Normalization norm;
    norm.mean.resize(d);
    norm.std.resize(d);
    for (uint32_t c = 0; c < d; ++c) {
        const double mean = cells ? sum[c] / static_cast<double>(cells) : 0.0;
        const double var = cells ? std::max(0.0, sq[c] / static_cast<double>(cells) - mean * mean) : 0.0;
        norm.mean[c] = mean;
        norm.std[c] = std::sqrt(var);
    }
    return norm;
}

}  // namespace loffta
