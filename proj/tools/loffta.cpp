// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Each subcommand is a thin wrapper over the library.
// Exit codes: 0 success, 1 operational error, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "loffta/bench.hpp"
#include "loffta/error.hpp"
#include "loffta/manifest.hpp"
#include "loffta/provider.hpp"
#include "loffta/reduce.hpp"
#include "loffta/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ExtractArgs {
    std::string provider = "synthetic";
    std::string out;
    std::string spec_file;
    std::optional<uint32_t> classes, per_class, val_per_class, test_per_class, d, h, w, rank;
    std::optional<double> gamma, sigma;
    std::optional<uint64_t> seed;
    std::optional<std::string> dtype;
    std::optional<std::string> name;
};

struct PoolArgs {
    std::string in, out, mode = "max";
    uint32_t kernel = 2, stride = 2;
};

struct TrainArgs {
    std::string cache, config, out;
    std::optional<uint64_t> seed, max_steps;
    std::optional<uint32_t> max_epochs, batch_size;
    std::optional<double> peak_lr;
    bool no_augment = false;
};

struct EvalArgs {
    std::string cache, split = "val", checkpoint;
    uint32_t batch_size = 64;
};

struct BenchArgs {
    std::string cache, config, checkpoint, split = "test";
    uint32_t steps = 20;
    std::optional<uint32_t> batch_size;
    bool json_out = false;
};

template <class T>
void set_if(std::optional<T> v, T& dst) {
    if (v) dst = *v;
}

int run_extract(const ExtractArgs& a) {
    loffta::provider::SyntheticSpec spec;
    if (!a.spec_file.empty()) {
        std::ifstream is(a.spec_file);
        if (!is) throw loffta::ConfigError("cannot read spec " + a.spec_file);
        try {
            json::parse(is).get_to(spec);
        } catch (const json::exception& e) {
            throw loffta::ConfigError(a.spec_file + ": " + e.what());
        }
    }
    set_if(a.classes, spec.classes);
    set_if(a.per_class, spec.train_per_class);
    set_if(a.val_per_class, spec.val_per_class);
    set_if(a.test_per_class, spec.test_per_class);
    set_if(a.d, spec.d);
    set_if(a.h, spec.h);
    set_if(a.w, spec.w);
    set_if(a.rank, spec.spatial_rank);
    set_if(a.gamma, spec.gamma);
    set_if(a.sigma, spec.sigma);
    set_if(a.seed, spec.seed);
    set_if(a.name, spec.dataset_name);
    if (a.dtype) spec.dtype = loffta::parse_dtype(*a.dtype);
    const auto m = loffta::provider::build_cache(spec, a.out);
    std::cout << "wrote " << a.out << ": train " << m.splits.at("train") << ", val " << m.splits.at("val")
              << ", test " << m.splits.at("test") << " records (d=" << m.d << ", h=" << m.h << ", w=" << m.w
              << ", " << loffta::to_string(m.dtype) << ")\n";
    return 0;
}

int run_pool(const PoolArgs& a) {
    const auto m = loffta::reduce::pool_cache(a.in, a.out, loffta::parse_pool_mode(a.mode), a.kernel, a.stride);
    std::cout << "pooled " << a.in << " -> " << a.out << " (h=" << m.h << ", w=" << m.w << ")\n";
    return 0;
}

int run_validate(const std::string& cache) {
    const auto report = loffta::validate_cache(cache);
    for (const auto& w : report.warnings) std::cout << "warning: " << w << '\n';
    for (const auto& e : report.errors) std::cout << "error: " << e << '\n';
    std::cout << cache << ": " << report.errors.size() << " error(s), " << report.warnings.size()
              << " warning(s)\n";
    return report.ok() ? 0 : 1;
}

loffta::train::TrainConfig merged_config(const std::string& file, const TrainArgs* flags) {
    loffta::train::TrainConfig cfg;
    if (!file.empty()) cfg = loffta::train::load_config(file);
    if (flags) {
        set_if(flags->seed, cfg.seed);
        set_if(flags->max_steps, cfg.max_steps);
        set_if(flags->max_epochs, cfg.max_epochs);
        set_if(flags->batch_size, cfg.batch_size);
        set_if(flags->peak_lr, cfg.peak_lr);
        if (flags->no_augment) cfg.policy = loffta::augment::AugmentationPolicy::none();
    }
    cfg.validate();
    return cfg;
}

int run_train(const TrainArgs& a) {
    if (!fs::exists(a.cache)) throw loffta::CacheError("cache directory not found: " + a.cache);
    const auto cfg = merged_config(a.config, &a);
    const auto res = loffta::train::train(a.cache, cfg, fs::path(a.out));
    for (const auto& r : res.log.records) {
        if (r.split != "val") continue;
        std::printf("epoch %llu  step %llu  val_loss %.4f  %s %.4f  lr %.3g\n",
                    static_cast<unsigned long long>(r.epoch), static_cast<unsigned long long>(r.step), r.loss,
                    std::string(loffta::train::to_string(cfg.eval_metric)).c_str(), r.metric.value_or(0.0), r.lr);
    }
    std::printf("best %s %.4f at step %llu; checkpoints in %s\n",
                std::string(loffta::train::to_string(cfg.eval_metric)).c_str(), res.best.metric,
                static_cast<unsigned long long>(res.best.step), a.out.c_str());
    return 0;
}

int run_eval(const EvalArgs& a) {
    if (!fs::exists(a.cache)) throw loffta::CacheError("cache directory not found: " + a.cache);
    const loffta::Cache cache(a.cache);
    const auto ckpt = loffta::model::load_checkpoint(a.checkpoint);
    const auto m = loffta::train::evaluate(cache, a.split, ckpt, a.batch_size);
    std::cout << json{{"split", a.split},
                      {"count", m.count},
                      {"accuracy", m.accuracy},
                      {"mean_class_recall", m.mean_class_recall},
                      {"loss", m.loss}}
                     .dump()
              << '\n';
    return 0;
}

void print_report(const loffta::bench::Report& r, bool as_json) {
    if (as_json) {
        std::cout << json(r).dump(2) << '\n';
    } else {
        std::cout << loffta::bench::to_table(r);
    }
}

int run_bench_train(const BenchArgs& a) {
    auto cfg = merged_config(a.config, nullptr);
    set_if(a.batch_size, cfg.batch_size);
    print_report(loffta::bench::bench_train(a.cache, cfg, a.steps), a.json_out);
    return 0;
}

int run_bench_infer(const BenchArgs& a) {
    const auto ckpt = loffta::model::load_checkpoint(a.checkpoint);
    print_report(loffta::bench::bench_infer(a.cache, ckpt, a.batch_size.value_or(64), a.steps, a.split), a.json_out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    loffta::bench::tune_allocator();
    CLI::App app{"loffta: offline feature caching and tensor augmentation for classifier training"};
    app.set_version_flag("--version", std::string("loffta ") + LOFFTA_VERSION);
    app.require_subcommand(1);

    ExtractArgs ex;
    auto* extract = app.add_subcommand("extract", "Build a feature cache from a provider");
    // --h names the grid height here, so help is only reachable as --help.
    extract->set_help_flag("--help", "Print this help message and exit");
    extract->add_option("--provider", ex.provider, "Feature provider")->check(CLI::IsMember({"synthetic"}));
    extract->add_option("--out", ex.out, "Output cache directory")->required();
    extract->add_option("--spec", ex.spec_file, "SyntheticSpec JSON file; flags override it");
    extract->add_option("--classes", ex.classes)->check(CLI::Range(2u, 1000000u));
    extract->add_option("--per-class", ex.per_class, "Train records per class")->check(CLI::PositiveNumber);
    extract->add_option("--val-per-class", ex.val_per_class)->check(CLI::NonNegativeNumber);
    extract->add_option("--test-per-class", ex.test_per_class)->check(CLI::NonNegativeNumber);
    extract->add_option("--d", ex.d)->check(CLI::PositiveNumber);
    extract->add_option("--h", ex.h)->check(CLI::PositiveNumber);
    extract->add_option("--w", ex.w)->check(CLI::PositiveNumber);
    extract->add_option("--rank", ex.rank, "Spatial patterns per class")->check(CLI::PositiveNumber);
    extract->add_option("--gamma", ex.gamma)->check(CLI::NonNegativeNumber);
    extract->add_option("--sigma", ex.sigma)->check(CLI::NonNegativeNumber);
    extract->add_option("--seed", ex.seed);
    extract->add_option("--dtype", ex.dtype)->check(CLI::IsMember({"f32", "f16"}));
    extract->add_option("--name", ex.name, "Dataset name");

    PoolArgs po;
    auto* pool = app.add_subcommand("pool", "Spatially pool every grid of a cache");
    pool->add_option("--in", po.in)->required();
    pool->add_option("--out", po.out)->required();
    pool->add_option("--mode", po.mode)->check(CLI::IsMember({"max", "average"}));
    pool->add_option("--kernel", po.kernel)->check(CLI::PositiveNumber);
    pool->add_option("--stride", po.stride)->check(CLI::PositiveNumber);

    std::string validate_cache;
    auto* validate = app.add_subcommand("validate", "Check a cache for consistency");
    validate->add_option("--cache", validate_cache)->required();

    TrainArgs tr;
    auto* trainc = app.add_subcommand("train", "Train a classifier on a cache");
    trainc->add_option("--cache", tr.cache)->required();
    trainc->add_option("--config", tr.config, "TrainConfig JSON; defaults when omitted");
    trainc->add_option("--out", tr.out, "Output directory")->required();
    trainc->add_option("--seed", tr.seed);
    trainc->add_option("--max-steps", tr.max_steps);
    trainc->add_option("--max-epochs", tr.max_epochs);
    trainc->add_option("--batch-size", tr.batch_size)->check(CLI::PositiveNumber);
    trainc->add_option("--peak-lr", tr.peak_lr)->check(CLI::PositiveNumber);
    trainc->add_flag("--no-augment", tr.no_augment, "Disable every augmentation");

    EvalArgs ev;
    auto* evalc = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
    evalc->add_option("--cache", ev.cache)->required();
    evalc->add_option("--split", ev.split);
    evalc->add_option("--checkpoint", ev.checkpoint)->required();
    evalc->add_option("--batch-size", ev.batch_size)->check(CLI::PositiveNumber);

    BenchArgs bt, bi;
    auto* bench = app.add_subcommand("bench", "Throughput and memory benchmarks");
    bench->require_subcommand(1);
    auto* bench_train = bench->add_subcommand("train", "Training-step throughput");
    bench_train->add_option("--cache", bt.cache)->required();
    bench_train->add_option("--config", bt.config);
    bench_train->add_option("--steps", bt.steps)->check(CLI::Range(10u, 1000000u));
    bench_train->add_option("--batch-size", bt.batch_size)->check(CLI::PositiveNumber);
    bench_train->add_flag("--json", bt.json_out);
    auto* bench_infer = bench->add_subcommand("infer", "Forward-only throughput");
    bench_infer->add_option("--cache", bi.cache)->required();
    bench_infer->add_option("--checkpoint", bi.checkpoint)->required();
    bench_infer->add_option("--split", bi.split);
    bench_infer->add_option("--steps", bi.steps)->check(CLI::Range(4u, 1000000u));
    bench_infer->add_option("--batch-size", bi.batch_size)->check(CLI::PositiveNumber);
    bench_infer->add_flag("--json", bi.json_out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (*extract) return run_extract(ex);
        if (*pool) return run_pool(po);
        if (*validate) return run_validate(validate_cache);
        if (*trainc) return run_train(tr);
        if (*evalc) return run_eval(ev);
        if (*bench_train) return run_bench_train(bt);
        if (*bench_infer) return run_bench_infer(bi);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
