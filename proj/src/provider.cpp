// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#include "loffta/provider.hpp"

#include <atomic>
#include <cmath>
#include <map>
#include <numbers>

#include "loffta/error.hpp"

namespace loffta::provider {

namespace fs = std::filesystem;

namespace {

std::atomic<uint64_t> g_invocations{0};

enum StreamTag : uint64_t { kMeanTag = 1, kPatternTag = 2, kAmplitudeTag = 3, kRecordTag = 4 };

const char* const kSplits[] = {"train", "val", "test"};

std::vector<double> random_unit(RngStream rng, uint32_t d) {
    std::vector<double> v(d);
    double norm = 0.0;
    do {
        norm = 0.0;
        for (auto& x : v) {
            x = rng.normal();
            norm += x * x;
        }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    return v;
}

// Smooth field sin(2*pi*(fy*r/h + fx*c/w) + phase) with low integer frequencies.
struct SpatialPattern {
    double fy = 0, fx = 0, phase = 0;
    double at(uint32_t r, uint32_t c, uint32_t h, uint32_t w) const {
        return std::sin(2.0 * std::numbers::pi * (fy * r / h + fx * c / w) + phase);
    }
};

SpatialPattern make_pattern(uint64_t seed, uint32_t k) {
    auto rng = RngStream::derive(seed, {kPatternTag, k});
    SpatialPattern p;
    do {
        p.fy = static_cast<double>(rng.below(3));
        p.fx = static_cast<double>(rng.below(3));
    } while (p.fy == 0 && p.fx == 0);
    p.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    return p;
}

uint32_t split_per_class(const SyntheticSpec& s, std::size_t split) {
    return split == 0 ? s.train_per_class : split == 1 ? s.val_per_class : s.test_per_class;
}

}  // namespace

uint64_t invocation_count() noexcept { return g_invocations.load(std::memory_order_relaxed); }

void SyntheticSpec::validate() const {
    if (classes < 2) throw InvalidParameter("synthetic spec needs >= 2 classes");
    if (d < 1 || h < 1 || w < 1) throw InvalidParameter("synthetic d, h, w must be >= 1");
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw InvalidParameter("gamma must be finite and >= 0");
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw InvalidParameter("sigma must be finite and >= 0");
    if (spatial_rank < 1) throw InvalidParameter("spatial_rank must be >= 1");
    if (!(spatial_amplitude >= 0.0) || !std::isfinite(spatial_amplitude)) {
        throw InvalidParameter("spatial_amplitude must be finite and >= 0");
    }
    if (descriptor.patch_size < 1) throw InvalidParameter("provider patch_size must be >= 1");
}

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = nlohmann::json{{"classes", s.classes},
                       {"train_per_class", s.train_per_class},
                       {"val_per_class", s.val_per_class},
                       {"test_per_class", s.test_per_class},
                       {"d", s.d},
                       {"h", s.h},
                       {"w", s.w},
                       {"gamma", s.gamma},
                       {"sigma", s.sigma},
                       {"spatial_rank", s.spatial_rank},
                       {"spatial_amplitude", s.spatial_amplitude},
                       {"seed", s.seed},
                       {"dtype", to_string(s.dtype)},
                       {"dataset_name", s.dataset_name},
                       {"provider", s.descriptor}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    s.classes = j.value("classes", s.classes);
    s.train_per_class = j.value("train_per_class", j.value("per_class", s.train_per_class));
    s.val_per_class = j.value("val_per_class", s.val_per_class);
    s.test_per_class = j.value("test_per_class", s.test_per_class);
    s.d = j.value("d", s.d);
    s.h = j.value("h", s.h);
    s.w = j.value("w", s.w);
    s.gamma = j.value("gamma", s.gamma);
    s.sigma = j.value("sigma", s.sigma);
    s.spatial_rank = j.value("spatial_rank", s.spatial_rank);
    s.spatial_amplitude = j.value("spatial_amplitude", s.spatial_amplitude);
    s.seed = j.value("seed", s.seed);
    if (j.contains("dtype")) s.dtype = parse_dtype(j.at("dtype").get<std::string>());
    s.dataset_name = j.value("dataset_name", s.dataset_name);
    if (j.contains("provider")) j.at("provider").get_to(s.descriptor);
}

FeatureRecord synth_record(const SyntheticSpec& spec, uint32_t cls, RngStream& rng) {
    spec.validate();
    if (cls >= spec.classes) {
        throw IndexError("class " + std::to_string(cls) + " out of range [0, " + std::to_string(spec.classes) + ")");
    }
    g_invocations.fetch_add(1, std::memory_order_relaxed);

    const auto mean_dir = random_unit(RngStream::derive(spec.seed, {kMeanTag, cls}), spec.d);
    FeatureRecord rec;
    rec.label = cls;
    rec.grid = FeatureGrid(spec.h, spec.w, spec.d);

    std::vector<double> base(static_cast<std::size_t>(spec.h) * spec.w * spec.d);
    for (uint32_t cell = 0; cell < spec.h * spec.w; ++cell) {
        for (uint32_t k = 0; k < spec.d; ++k) base[static_cast<std::size_t>(cell) * spec.d + k] = spec.gamma * mean_dir[k];
    }
    const double amp = spec.gamma * spec.spatial_amplitude;
    if (amp != 0.0) {
        for (uint32_t k = 0; k < spec.spatial_rank; ++k) {
            const auto pattern = make_pattern(spec.seed, k);
            const auto a = random_unit(RngStream::derive(spec.seed, {kAmplitudeTag, cls, k}), spec.d);
            for (uint32_t r = 0; r < spec.h; ++r) {
                for (uint32_t c = 0; c < spec.w; ++c) {
                    const double b = pattern.at(r, c, spec.h, spec.w);
                    double* dst = base.data() + rec.grid.index(r, c);
                    for (uint32_t ch = 0; ch < spec.d; ++ch) dst[ch] += amp * a[ch] * b;
                }
            }
        }
    }
    for (std::size_t i = 0; i < base.size(); ++i) {
        const double noise = spec.sigma > 0.0 ? spec.sigma * rng.normal() : 0.0;
        rec.grid.values[i] = static_cast<float>(base[i] + noise);
    }
    rec.cls.resize(spec.d);
    for (uint32_t k = 0; k < spec.d; ++k) {
        const double noise = spec.sigma > 0.0 ? spec.sigma * rng.normal() : 0.0;
        rec.cls[k] = static_cast<float>(spec.gamma * mean_dir[k] + noise);
    }
    return rec;
}

SyntheticProvider::SyntheticProvider(SyntheticSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

std::vector<std::string> SyntheticProvider::class_names() const {
    std::vector<std::string> names;
    for (uint32_t c = 0; c < spec_.classes; ++c) names.push_back("class_" + std::to_string(c));
    return names;
}

std::optional<ProvidedRecord> SyntheticProvider::next() {
    while (split_index_ < 3) {
        const uint64_t total = static_cast<uint64_t>(split_per_class(spec_, split_index_)) * spec_.classes;
        if (record_index_ < total) {
            const auto cls = static_cast<uint32_t>(record_index_ % spec_.classes);
            auto rng = RngStream::derive(spec_.seed, {kRecordTag, split_index_, record_index_});
            ProvidedRecord out{sample_id_++, kSplits[split_index_], synth_record(spec_, cls, rng)};
            ++record_index_;
            return out;
        }
        ++split_index_;
        record_index_ = 0;
    }
    return std::nullopt;
}

CacheManifest build_cache(FeatureProvider& source, const fs::path& out_root, const BuildOptions& opts) {
    if (opts.records_per_shard == 0) throw InvalidParameter("records_per_shard must be >= 1");
    std::error_code ec;
    fs::create_directories(out_root, ec);
    if (ec) throw StorageError("cannot create cache directory " + out_root.string() + ": " + ec.message());

    CacheManifest m;
    m.dataset_name = opts.dataset_name;
    m.class_names = source.class_names();
    m.provider = source.descriptor();
    m.d = source.d();
    m.h = source.h();
    m.w = source.w();
    m.dtype = opts.dtype;

    std::map<std::string, std::vector<FeatureRecord>> pending;
    std::map<std::string, uint32_t> shard_counter;
    auto flush = [&](const std::string& split) {
        auto& buf = pending[split];
        if (buf.empty()) return;
        const std::string file = shard_filename(split, shard_counter[split]++);
        const auto summary = write_shard(buf, opts.dtype, out_root / file);
        m.shards[split].push_back({file, summary.record_count});
        m.splits[split] += summary.record_count;
        buf.clear();
    };
    while (auto item = source.next()) {
        if (item->record.label >= m.class_names.size()) {
            throw InvalidValue("provider emitted label " + std::to_string(item->record.label) + " >= class count");
        }
        auto& buf = pending[item->split];
        buf.push_back(std::move(item->record));
        if (buf.size() >= opts.records_per_shard) flush(item->split);
    }
    for (auto& [split, _] : pending) flush(split);
    for (const auto& [split, _] : pending) m.splits.emplace(split, 0);
    if (m.splits.empty()) throw InvalidParameter("provider produced no records");

    save_manifest(out_root, m);
    if (m.splits.count("train") && m.splits["train"] > 0) {
        m.normalization = compute_normalization(Cache(out_root), "train");
        save_manifest(out_root, m);
    }
    return m;
}

CacheManifest build_cache(const SyntheticSpec& spec, const fs::path& out_root) {
    SyntheticProvider source(spec);
    return build_cache(source, out_root, BuildOptions{spec.dataset_name, spec.dtype, 4096});
}

}  // namespace loffta::provider
