// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "loffta/augment.hpp"
#include "loffta/manifest.hpp"
#include "loffta/model.hpp"

namespace loffta::train {

enum class EvalMetric { Accuracy, MeanClassRecall };
std::string_view to_string(EvalMetric m) noexcept;
/// "accuracy" or "mean_class_recall"; throws ConfigError otherwise.
EvalMetric parse_eval_metric(std::string_view name);

struct TrainConfig {
    double peak_lr = 5e-4;
    uint64_t warmup_steps = 100;
    double plateau_factor = 0.1;
    uint32_t plateau_patience = 3;
    /// The learning rate never decays below this.
    double min_lr = 1e-6;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    uint32_t batch_size = 64;
    uint32_t max_epochs = 30;
    /// 0 means no cap.
    uint64_t max_steps = 0;
    uint64_t seed = 0;
    augment::AugmentationPolicy policy;
    EvalMetric eval_metric = EvalMetric::Accuracy;
    /// Encoder shape. Input shape and class count come from the cache.
    model::ModelConfig model;

    /// Throws ConfigError.
    void validate() const;
};

/// JSON keys: peak_lr, warmup_steps, plateau_factor, plateau_patience, min_lr,
/// weight_decay, betas [b1, b2], adam_eps, batch_size, max_epochs, max_steps,
/// seed, policy, eval_metric, model.
void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing keys keep their current values; unknown keys throw ConfigError.
void from_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig load_config(const std::filesystem::path& path);

struct PlateauState {
    double best_metric = -std::numeric_limits<double>::infinity();
    uint32_t epochs_since_improvement = 0;
    /// 0 until first use, then peak_lr.
    double current_lr = 0.0;
};

/// Learning rate for `step`. When `epoch_metric` is given the plateau state
/// is updated first: a strict improvement resets the counter, otherwise it
/// grows, and on reaching plateau_patience the rate is multiplied by
/// plateau_factor (floored at min_lr) and the counter resets.
double lr_at(uint64_t step, std::optional<double> epoch_metric, const TrainConfig& cfg, PlateauState& state);

struct AdamWState {
    std::vector<double> m;
    std::vector<double> v;
    uint64_t t = 0;
};

/// One decoupled-weight-decay Adam update. Decay applies where mask != 0;
/// an empty mask decays nothing.
template <class T>
void adamw_step(std::span<T> params, std::span<const T> grads, AdamWState& state, double lr, const TrainConfig& cfg,
                std::span<const uint8_t> decay_mask = {});

/// Seeded per-epoch shuffle of [0, n).
std::vector<uint64_t> epoch_order(uint64_t n, uint64_t seed, uint64_t epoch);

/// Reads `indices` from the train split and augments each record with its own
/// stream keyed by (seed, epoch, record index). Output order follows `indices`
/// whatever the worker count.
std::vector<FeatureRecord> prepare_batch(const Cache& cache, const std::string& split,
                                         std::span<const uint64_t> indices, uint64_t epoch, uint64_t seed,
                                         const augment::AugmentationPolicy& policy, bool augment,
                                         unsigned workers = 1);

/// LOFFTA_NUM_WORKERS, default 1; invalid values fall back to 1.
unsigned num_workers_from_env();

struct Metrics {
    double accuracy = 0.0;
    double mean_class_recall = 0.0;
    double loss = 0.0;
    uint64_t count = 0;

    double get(EvalMetric m) const noexcept { return m == EvalMetric::Accuracy ? accuracy : mean_class_recall; }
};

/// Recall is averaged over classes that occur in `labels`. Throws EmptySplit
/// for empty input.
Metrics compute_metrics(std::span<const uint32_t> predictions, std::span<const uint32_t> labels,
                        uint32_t num_classes);

struct MetricsRecord {
    uint64_t step = 0;
    uint64_t epoch = 0;
    std::string split;
    double loss = 0.0;
    /// Absent for per-step training records.
    std::optional<double> metric;
    double lr = 0.0;
};

struct MetricsLog {
    std::vector<MetricsRecord> records;

    std::string to_ndjson() const;
    static std::string line(const MetricsRecord& r);
    /// Mean training loss of each epoch, in epoch order.
    std::vector<double> epoch_train_loss() const;
};

struct StepResult {
    /// Zero-based index of the step just taken.
    uint64_t step = 0;
    uint64_t epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    /// True when this step consumed the last batch of its epoch.
    bool epoch_end = false;
};

/// Owns the model, optimizer state and shuffle order. One step at a time.
class Trainer {
public:
    /// Fills the model input shape and class count from the cache manifest.
    Trainer(const Cache& cache, TrainConfig cfg);

    const TrainConfig& config() const noexcept { return cfg_; }
    const model::Classifier<float>& model() const noexcept { return model_; }
    model::Classifier<float>& model() noexcept { return model_; }
    uint64_t step_count() const noexcept { return step_; }
    uint64_t epoch() const noexcept { return epoch_; }
    uint64_t steps_per_epoch() const noexcept;
    double current_lr() const noexcept { return lr_; }

    /// Batch the next step will consume, augmented. Does not advance.
    std::vector<FeatureRecord> peek_batch() const;

    /// Read, augment, forward, backward and update. Throws DivergenceError.
    StepResult step();

    /// Feeds an epoch-end validation metric to the plateau schedule.
    void end_epoch(double metric);

    Metrics evaluate(const std::string& split) const;

private:
    std::vector<uint64_t> next_indices() const;

    const Cache& cache_;
    TrainConfig cfg_;
    model::Classifier<float> model_;
    std::vector<uint8_t> decay_mask_;
    tracked_vector<float> grads_;
    model::Workspace<float> workspace_;
    AdamWState adam_;
    PlateauState plateau_;
    std::vector<uint64_t> order_;
    uint64_t train_size_ = 0;
    uint64_t cursor_ = 0;
    uint64_t step_ = 0;
    uint64_t epoch_ = 0;
    double lr_ = 0.0;
    unsigned workers_ = 1;
};

/// Resolves the model config against a manifest (input shape, classes).
model::ModelConfig resolve_model(const CacheManifest& manifest, model::ModelConfig base);

struct TrainResult {
    /// Best by the configured metric; the initial parameters if no epoch ran.
    model::Checkpoint best;
    model::Checkpoint last;
    MetricsLog log;
    std::vector<double> step_losses;
};

/// Full loop: per epoch shuffle, augment, update, then evaluate val without
/// augmentation and keep the best checkpoint. With `out_dir` also writes
/// config.json, metrics.ndjson, best.ckpt and last.ckpt.
/// Throws CacheError for an invalid cache or missing train/val split.
TrainResult train(const std::filesystem::path& cache_root, const TrainConfig& cfg,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Augmentation-free pass over a split.
Metrics evaluate(const Cache& cache, const std::string& split, const model::Checkpoint& ckpt,
                 uint32_t batch_size = 64);

}  // namespace loffta::train
