// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#include "loffta/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <thread>

#include "loffta/error.hpp"
#include "loffta/rng.hpp"

namespace loffta::train {

using nlohmann::json;

namespace {
constexpr uint64_t kShuffleTag = 0x5348;
constexpr uint64_t kAugmentTag = 0x4147;
}  // namespace

std::string_view to_string(EvalMetric m) noexcept {
    return m == EvalMetric::Accuracy ? "accuracy" : "mean_class_recall";
}

EvalMetric parse_eval_metric(std::string_view name) {
    if (name == "accuracy") return EvalMetric::Accuracy;
    if (name == "mean_class_recall") return EvalMetric::MeanClassRecall;
    throw ConfigError("eval_metric must be accuracy or mean_class_recall, got '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("plateau_factor must be in (0, 1)");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw ConfigError("peak_lr must be > 0");
    if (!(min_lr >= 0.0)) throw ConfigError("min_lr must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
    if (plateau_patience < 1) throw ConfigError("plateau_patience must be >= 1");
    try {
        policy.validate();
    } catch (const Error& e) {
        throw ConfigError(std::string("policy: ") + e.what());
    }
}

void to_json(json& j, const TrainConfig& c) {
    j = json{{"peak_lr", c.peak_lr},
             {"warmup_steps", c.warmup_steps},
             {"plateau_factor", c.plateau_factor},
             {"plateau_patience", c.plateau_patience},
             {"min_lr", c.min_lr},
             {"weight_decay", c.weight_decay},
             {"betas", {c.beta1, c.beta2}},
             {"adam_eps", c.adam_eps},
             {"batch_size", c.batch_size},
             {"max_epochs", c.max_epochs},
             {"max_steps", c.max_steps},
             {"seed", c.seed},
             {"policy", c.policy},
             {"eval_metric", to_string(c.eval_metric)},
             {"model", c.model}};
}

void from_json(const json& j, TrainConfig& c) {
    static const std::set<std::string> known{"peak_lr",    "warmup_steps", "plateau_factor", "plateau_patience",
                                             "min_lr",     "weight_decay", "betas",          "adam_eps",
                                             "batch_size", "max_epochs",   "max_steps",      "seed",
                                             "policy",     "eval_metric",  "model"};
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigError("unknown train config field '" + key + "'");
    }
    try {
        c.peak_lr = j.value("peak_lr", c.peak_lr);
        c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
        c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
        c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
        c.min_lr = j.value("min_lr", c.min_lr);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        if (j.contains("betas")) {
            const auto& b = j.at("betas");
            if (!b.is_array() || b.size() != 2) throw ConfigError("betas must be [b1, b2]");
            c.beta1 = b[0].get<double>();
            c.beta2 = b[1].get<double>();
        }
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.max_steps = j.value("max_steps", c.max_steps);
        c.seed = j.value("seed", c.seed);
        if (j.contains("policy")) j.at("policy").get_to(c.policy);
        if (j.contains("eval_metric")) c.eval_metric = parse_eval_metric(j.at("eval_metric").get<std::string>());
        if (j.contains("model")) j.at("model").get_to(c.model);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
}

TrainConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config " + path.string());
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    TrainConfig c;
    from_json(j, c);
    return c;
}

double lr_at(uint64_t step, std::optional<double> epoch_metric, const TrainConfig& cfg, PlateauState& state) {
    if (state.current_lr == 0.0) state.current_lr = cfg.peak_lr;
    if (epoch_metric) {
        if (*epoch_metric > state.best_metric) {
            state.best_metric = *epoch_metric;
            state.epochs_since_improvement = 0;
        } else if (++state.epochs_since_improvement >= cfg.plateau_patience) {
            state.current_lr = std::max(cfg.min_lr, state.current_lr * cfg.plateau_factor);
            state.epochs_since_improvement = 0;
        }
    }
    if (step < cfg.warmup_steps) {
        return cfg.peak_lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    }
    return state.current_lr;
}

template <class T>
void adamw_step(std::span<T> params, std::span<const T> grads, AdamWState& state, double lr, const TrainConfig& cfg,
                std::span<const uint8_t> decay_mask) {
    if (grads.size() != params.size()) {
        throw ShapeMismatch("gradient length " + std::to_string(grads.size()) + " != parameter length " +
                            std::to_string(params.size()));
    }
    if (!decay_mask.empty() && decay_mask.size() != params.size()) throw ShapeMismatch("decay mask length mismatch");
    if (state.m.size() != params.size()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
        state.t = 0;
    }
    ++state.t;
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        double& m = state.m[i];
        double& v = state.v[i];
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        const double mhat = m / c1;
        const double vhat = v / c2;
        double update = mhat / (std::sqrt(vhat) + cfg.adam_eps);
        if (!decay_mask.empty() && decay_mask[i]) update += cfg.weight_decay * params[i];
        params[i] = static_cast<T>(params[i] - lr * update);
    }
}

template void adamw_step<float>(std::span<float>, std::span<const float>, AdamWState&, double, const TrainConfig&,
                                std::span<const uint8_t>);
template void adamw_step<double>(std::span<double>, std::span<const double>, AdamWState&, double, const TrainConfig&,
                                 std::span<const uint8_t>);

std::vector<uint64_t> epoch_order(uint64_t n, uint64_t seed, uint64_t epoch) {
    auto rng = RngStream::derive(seed, {kShuffleTag, epoch});
    return permutation(n, rng);
}

std::vector<FeatureRecord> prepare_batch(const Cache& cache, const std::string& split,
                                         std::span<const uint64_t> indices, uint64_t epoch, uint64_t seed,
                                         const augment::AugmentationPolicy& policy, bool augment, unsigned workers) {
    std::vector<FeatureRecord> out(indices.size());
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            FeatureRecord rec = cache.read(split, indices[i]);
            if (augment) {
                auto rng = RngStream::derive(seed, {kAugmentTag, epoch, indices[i]});
                rec = augment::apply_policy(rec, policy, rng);
            }
            out[i] = std::move(rec);
        }
    };
    workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(indices.size())));
    if (workers == 1) {
        work(0, indices.size());
        return out;
    }
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(workers);
    const std::size_t chunk = (indices.size() + workers - 1) / workers;
    for (unsigned t = 0; t < workers; ++t) {
        const std::size_t b = t * chunk, e = std::min(indices.size(), b + chunk);
        threads.emplace_back([&, t, b, e] {
            try {
                work(b, e);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : threads) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

unsigned num_workers_from_env() {
    const char* v = std::getenv("LOFFTA_NUM_WORKERS");
    if (!v || !*v) return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (*end != '\0' || n < 1) return 1;
    return static_cast<unsigned>(std::min<long>(n, 256));
}

Metrics compute_metrics(std::span<const uint32_t> predictions, std::span<const uint32_t> labels,
                        uint32_t num_classes) {
    if (labels.empty()) throw EmptySplit("no records to evaluate");
    if (predictions.size() != labels.size()) throw ShapeMismatch("prediction and label counts differ");
    std::vector<uint64_t> hits(num_classes, 0), totals(num_classes, 0);
    uint64_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) throw IndexError("label " + std::to_string(labels[i]) + " out of range");
        ++totals[labels[i]];
        if (predictions[i] == labels[i]) {
            ++hits[labels[i]];
            ++correct;
        }
    }
    Metrics m;
    m.count = labels.size();
    m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
    double recall = 0.0;
    uint32_t present = 0;
    for (uint32_t c = 0; c < num_classes; ++c) {
        if (!totals[c]) continue;
        recall += static_cast<double>(hits[c]) / static_cast<double>(totals[c]);
        ++present;
    }
    m.mean_class_recall = recall / present;
    return m;
}

std::string MetricsLog::line(const MetricsRecord& r) {
    json j{{"step", r.step}, {"epoch", r.epoch}, {"split", r.split}, {"loss", r.loss}, {"lr", r.lr}};
    j["metric"] = r.metric ? json(*r.metric) : json(nullptr);
    return j.dump();
}

std::string MetricsLog::to_ndjson() const {
    std::string out;
    for (const auto& r : records) {
        out += line(r);
        out += '\n';
    }
    return out;
}

std::vector<double> MetricsLog::epoch_train_loss() const {
    std::vector<double> sums, counts;
    for (const auto& r : records) {
        if (r.split != "train") continue;
        if (sums.size() <= r.epoch) {
            sums.resize(r.epoch + 1, 0.0);
            counts.resize(r.epoch + 1, 0.0);
        }
        sums[r.epoch] += r.loss;
        counts[r.epoch] += 1.0;
    }
    for (std::size_t i = 0; i < sums.size(); ++i) sums[i] = counts[i] > 0 ? sums[i] / counts[i] : 0.0;
    return sums;
}

model::ModelConfig resolve_model(const CacheManifest& manifest, model::ModelConfig base) {
    base.in_dim = manifest.d;
    base.grid_h = manifest.h;
    base.grid_w = manifest.w;
    base.num_classes = manifest.num_classes();
    base.validate();
    return base;
}

namespace {

Metrics evaluate_model(const model::Classifier<float>& net, const Cache& cache, const std::string& split,
                       uint32_t batch_size) {
    if (!cache.has_split(split)) throw CacheError("cache has no split '" + split + "'");
    const uint64_t n = cache.split_size(split);
    if (n == 0) throw EmptySplit("split '" + split + "' is empty");
    std::vector<uint32_t> preds, labels;
    preds.reserve(n);
    labels.reserve(n);
    double loss_sum = 0.0;
    std::vector<uint64_t> idx;
    for (uint64_t start = 0; start < n; start += batch_size) {
        const uint64_t end = std::min<uint64_t>(n, start + batch_size);
        idx.clear();
        for (uint64_t i = start; i < end; ++i) idx.push_back(i);
        auto batch = prepare_batch(cache, split, idx, 0, 0, {}, false);
        auto logits = net.forward(batch);
        std::vector<uint32_t> lab(batch.size());
        for (std::size_t b = 0; b < batch.size(); ++b) {
            lab[b] = batch[b].label;
            const float* row = logits.row(b);
            preds.push_back(static_cast<uint32_t>(std::max_element(row, row + logits.cols) - row));
            labels.push_back(lab[b]);
        }
        loss_sum += model::cross_entropy(logits, std::span<const uint32_t>(lab)).loss * static_cast<double>(batch.size());
    }
    Metrics m = compute_metrics(preds, labels, net.config().num_classes);
    m.loss = loss_sum / static_cast<double>(n);
    return m;
}

}  // namespace

Trainer::Trainer(const Cache& cache, TrainConfig cfg)
    : cache_(cache),
      cfg_((cfg.validate(), std::move(cfg))),
      model_(resolve_model(cache.manifest(), cfg_.model)),
      workers_(num_workers_from_env()) {
    if (!cache_.has_split("train")) throw CacheError("cache has no train split");
    train_size_ = cache_.split_size("train");
    if (train_size_ == 0) throw EmptySplit("train split is empty");
    cfg_.model = model_.config();
    model_.init(cfg_.seed);
    decay_mask_ = model_.layout().decay_mask();
    grads_.assign(model_.params().size(), 0.0f);
    order_ = epoch_order(train_size_, cfg_.seed, 0);
    lr_ = lr_at(0, std::nullopt, cfg_, plateau_);
}

uint64_t Trainer::steps_per_epoch() const noexcept { return (train_size_ + cfg_.batch_size - 1) / cfg_.batch_size; }

std::vector<uint64_t> Trainer::next_indices() const {
    const uint64_t end = std::min<uint64_t>(train_size_, cursor_ + cfg_.batch_size);
    return {order_.begin() + static_cast<std::ptrdiff_t>(cursor_), order_.begin() + static_cast<std::ptrdiff_t>(end)};
}

std::vector<FeatureRecord> Trainer::peek_batch() const {
    const auto idx = next_indices();
    return prepare_batch(cache_, "train", idx, epoch_, cfg_.seed, cfg_.policy, true, workers_);
}

StepResult Trainer::step() {
    const auto idx = next_indices();
    const auto batch = prepare_batch(cache_, "train", idx, epoch_, cfg_.seed, cfg_.policy, true, workers_);
    const auto lg = model_.loss_and_grad(batch, grads_, &workspace_);
    if (!std::isfinite(lg.loss)) throw DivergenceError(step_, "non-finite loss at step " + std::to_string(step_));
    lr_ = lr_at(step_, std::nullopt, cfg_, plateau_);
    adamw_step<float>(model_.params(), grads_, adam_, lr_, cfg_, decay_mask_);

    StepResult r{step_, epoch_, lg.loss, lr_, false};
    ++step_;
    cursor_ += idx.size();
    if (cursor_ >= train_size_) {
        r.epoch_end = true;
        ++epoch_;
        cursor_ = 0;
        order_ = epoch_order(train_size_, cfg_.seed, epoch_);
    }
    return r;
}

void Trainer::end_epoch(double metric) { lr_ = lr_at(step_, metric, cfg_, plateau_); }

Metrics Trainer::evaluate(const std::string& split) const { return evaluate_model(model_, cache_, split, cfg_.batch_size); }

TrainResult train(const std::filesystem::path& cache_root, const TrainConfig& cfg,
                  const std::optional<std::filesystem::path>& out_dir) {
    if (!std::filesystem::exists(cache_root)) throw CacheError("cache directory not found: " + cache_root.string());
    const Cache cache(cache_root);
    if (!cache.has_split("val")) throw CacheError(cache_root.string() + ": cache has no val split");
    Trainer trainer(cache, cfg);

    std::ofstream metrics_out;
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        std::ofstream cfg_out(*out_dir / "config.json");
        cfg_out << json(trainer.config()).dump(2) << '\n';
        metrics_out.open(*out_dir / "metrics.ndjson", std::ios::trunc);
        if (!cfg_out || !metrics_out) throw StorageError("cannot write to " + out_dir->string());
    }
    auto log = [&](TrainResult& res, MetricsRecord rec) {
        if (metrics_out.is_open()) metrics_out << MetricsLog::line(rec) << '\n';
        res.log.records.push_back(std::move(rec));
    };

    TrainResult res;
    res.best = model::Checkpoint::from_classifier(trainer.model(), 0, -std::numeric_limits<double>::infinity());
    bool have_best = false;
    const uint64_t cap = cfg.max_steps ? cfg.max_steps : std::numeric_limits<uint64_t>::max();
    for (uint32_t e = 0; e < cfg.max_epochs && trainer.step_count() < cap; ++e) {
        bool finished = false;
        while (!finished && trainer.step_count() < cap) {
            const auto s = trainer.step();
            res.step_losses.push_back(s.loss);
            log(res, {s.step, s.epoch, "train", s.loss, std::nullopt, s.lr});
            finished = s.epoch_end;
        }
        // A step cap may cut the final epoch short; it is still evaluated.
        const Metrics val = trainer.evaluate("val");
        const double metric = val.get(cfg.eval_metric);
        log(res, {trainer.step_count(), e, "val", val.loss, metric, trainer.current_lr()});
        if (!have_best || metric > res.best.metric) {
            res.best = model::Checkpoint::from_classifier(trainer.model(), trainer.step_count(), metric);
            have_best = true;
        }
        trainer.end_epoch(metric);
    }
    res.last = model::Checkpoint::from_classifier(trainer.model(), trainer.step_count(),
                                                  have_best ? res.log.records.back().metric.value_or(0.0) : 0.0);
    if (!have_best) res.best.metric = 0.0;
    if (out_dir) {
        model::save_checkpoint(*out_dir / "best.ckpt", res.best);
        model::save_checkpoint(*out_dir / "last.ckpt", res.last);
    }
    return res;
}

Metrics evaluate(const Cache& cache, const std::string& split, const model::Checkpoint& ckpt, uint32_t batch_size) {
    const auto resolved = resolve_model(cache.manifest(), ckpt.config);
    if (resolved.in_dim != ckpt.config.in_dim || resolved.grid_h != ckpt.config.grid_h ||
        resolved.grid_w != ckpt.config.grid_w || resolved.num_classes != ckpt.config.num_classes) {
        throw ShapeMismatch("checkpoint expects (d=" + std::to_string(ckpt.config.in_dim) + ", h=" +
                            std::to_string(ckpt.config.grid_h) + ", w=" + std::to_string(ckpt.config.grid_w) +
                            ", C=" + std::to_string(ckpt.config.num_classes) + ") but the cache differs");
    }
    const auto net = ckpt.to_classifier<float>();
    return evaluate_model(net, cache, split, std::max<uint32_t>(1, batch_size));
}

}  // namespace loffta::train
