// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <string>
#include <vector>

#include "loffta/augment.hpp"
#include "loffta/bench.hpp"
#include "loffta/error.hpp"
#include "loffta/manifest.hpp"
#include "loffta/provider.hpp"
#include "loffta/reduce.hpp"
#include "loffta/rng.hpp"
#include "loffta/store.hpp"
#include "loffta/trainer.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

loffta::FeatureGrid to_grid(const Array& a) {
    if (a.ndim() != 3) throw loffta::ShapeMismatch("expected an (h, w, d) array");
    const auto h = static_cast<uint32_t>(a.shape(0));
    const auto w = static_cast<uint32_t>(a.shape(1));
    const auto d = static_cast<uint32_t>(a.shape(2));
    loffta::FeatureGrid g(h, w, d, std::span<const float>(a.data(), a.size()));
    g.validate();
    return g;
}

Array to_array(const loffta::FeatureGrid& g) {
    Array out({static_cast<py::ssize_t>(g.h), static_cast<py::ssize_t>(g.w), static_cast<py::ssize_t>(g.d)});
    std::memcpy(out.mutable_data(), g.values.data(), g.values.size() * sizeof(float));
    return out;
}

Array to_vector(std::span<const float> v) {
    Array out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())});
    std::memcpy(out.mutable_data(), v.data(), v.size() * sizeof(float));
    return out;
}

// Python dicts travel as JSON text so the C++ from_json rules apply unchanged.
json to_json_value(const py::object& obj) {
    if (obj.is_none()) return json::object();
    const auto dumps = py::module_::import("json").attr("dumps");
    return json::parse(dumps(obj).cast<std::string>());
}

py::object from_json_value(const json& j) {
    return py::module_::import("json").attr("loads")(j.dump());
}

loffta::PoolMode pool_mode(const std::string& s) { return loffta::parse_pool_mode(s); }

py::dict metrics_dict(const loffta::train::Metrics& m) {
    py::dict d;
    d["accuracy"] = m.accuracy;
    d["mean_class_recall"] = m.mean_class_recall;
    d["loss"] = m.loss;
    d["count"] = m.count;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "loffta core: cached feature stores, tensor augmentation, pooling and training";
    m.attr("__version__") = LOFFTA_VERSION;

    auto base = py::register_exception<loffta::Error>(m, "LofftaError");
    py::register_exception<loffta::ShapeMismatch>(m, "ShapeMismatch", base.ptr());
    py::register_exception<loffta::InvalidValue>(m, "InvalidValue", base.ptr());
    py::register_exception<loffta::InvalidParameter>(m, "InvalidParameter", base.ptr());
    py::register_exception<loffta::StorageError>(m, "StorageError", base.ptr());
    py::register_exception<loffta::IndexError>(m, "IndexError", base.ptr());
    py::register_exception<loffta::CorruptShard>(m, "CorruptShard", base.ptr());
    py::register_exception<loffta::CacheError>(m, "CacheError", base.ptr());
    py::register_exception<loffta::EmptySplit>(m, "EmptySplit", base.ptr());
    py::register_exception<loffta::ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<loffta::DivergenceError>(m, "DivergenceError", base.ptr());

    // Augmentation on (h, w, d) float32 arrays.
    m.def(
        "flip",
        [](const Array& g, const std::string& axis) {
            if (axis != "horizontal" && axis != "vertical")
                throw loffta::InvalidParameter("axis must be 'horizontal' or 'vertical'");
            return to_array(loffta::augment::flip(
                to_grid(g), axis == "horizontal" ? loffta::augment::FlipAxis::Horizontal
                                                 : loffta::augment::FlipAxis::Vertical));
        },
        py::arg("grid"), py::arg("axis"));
    m.def(
        "rotate", [](const Array& g, double deg) { return to_array(loffta::augment::rotate(to_grid(g), deg)); },
        py::arg("grid"), py::arg("degrees"));
    m.def(
        "shear",
        [](const Array& g, double ax, double ay) { return to_array(loffta::augment::shear(to_grid(g), ax, ay)); },
        py::arg("grid"), py::arg("angle_x"), py::arg("angle_y"));
    m.def(
        "translate",
        [](const Array& g, int64_t dr, int64_t dc) { return to_array(loffta::augment::translate(to_grid(g), dr, dc)); },
        py::arg("grid"), py::arg("dr"), py::arg("dc"));
    m.def(
        "resize", [](const Array& g, double s) { return to_array(loffta::augment::resize(to_grid(g), s)); },
        py::arg("grid"), py::arg("scale"));
    m.def(
        "add_noise",
        [](const Array& g, const Array& cls, double sigma_rel, uint64_t seed) {
            loffta::RngStream rng(seed);
            auto n = loffta::augment::add_noise(to_grid(g), std::span<const float>(cls.data(), cls.size()), sigma_rel,
                                                rng);
            return py::make_tuple(to_array(n.grid), to_vector(n.cls));
        },
        py::arg("grid"), py::arg("cls"), py::arg("sigma_rel"), py::arg("seed") = 0);
    m.def(
        "pool",
        [](const Array& g, const std::string& mode, uint32_t kernel, uint32_t stride) {
            return to_array(loffta::reduce::pool(to_grid(g), pool_mode(mode), kernel, stride));
        },
        py::arg("grid"), py::arg("mode") = "max", py::arg("kernel") = 2, py::arg("stride") = 2);

    // Caches.
    m.def(
        "build_synthetic_cache",
        [](const std::filesystem::path& out, const py::object& spec) {
            loffta::provider::SyntheticSpec s;
            from_json(to_json_value(spec), s);
            json j = loffta::provider::build_cache(s, out);
            return from_json_value(j);
        },
        py::arg("out"), py::arg("spec") = py::none(),
        "Writes a synthetic train/val/test cache and returns its manifest as a dict.");
    m.def(
        "validate_cache",
        [](const std::filesystem::path& root) {
            const auto r = loffta::validate_cache(root);
            py::dict d;
            d["errors"] = r.errors;
            d["warnings"] = r.warnings;
            return d;
        },
        py::arg("root"));
    m.def(
        "pool_cache",
        [](const std::filesystem::path& in, const std::filesystem::path& out, const std::string& mode, uint32_t kernel,
           uint32_t stride) {
            json j = loffta::reduce::pool_cache(in, out, pool_mode(mode), kernel, stride);
            return from_json_value(j);
        },
        py::arg("in_root"), py::arg("out_root"), py::arg("mode") = "max", py::arg("kernel") = 2,
        py::arg("stride") = 2);
    m.def(
        "read_record",
        [](const std::filesystem::path& root, const std::string& split, uint64_t index) {
            const loffta::Cache cache(root);
            const auto rec = cache.read(split, index);
            return py::make_tuple(to_vector(rec.cls), to_array(rec.grid), rec.label);
        },
        py::arg("root"), py::arg("split"), py::arg("index"),
        "Returns (cls, grid, label) for one record.");
    m.def("provider_invocations", &loffta::provider::invocation_count);

    // Training.
    m.def(
        "train",
        [](const std::filesystem::path& cache, const py::object& config, std::optional<std::filesystem::path> out) {
            loffta::train::TrainConfig cfg;
            from_json(to_json_value(config), cfg);
            loffta::train::TrainResult r;
            {
                py::gil_scoped_release release;
                r = loffta::train::train(cache, cfg, out);
            }
            const auto loads = py::module_::import("json").attr("loads");
            py::list records;
            for (const auto& rec : r.log.records) records.append(loads(loffta::train::MetricsLog::line(rec)));
            py::dict d;
            d["best_metric"] = r.best.metric;
            d["best_step"] = r.best.step;
            d["last_step"] = r.last.step;
            d["step_losses"] = r.step_losses;
            d["log"] = records;
            return d;
        },
        py::arg("cache"), py::arg("config") = py::none(), py::arg("out") = py::none(),
        "Trains on a cache. `config` uses TrainConfig JSON field names.");
    m.def(
        "evaluate",
        [](const std::filesystem::path& cache, const std::string& split, const std::filesystem::path& checkpoint,
           uint32_t batch_size) {
            const loffta::Cache c(cache);
            const auto ckpt = loffta::model::load_checkpoint(checkpoint);
            return metrics_dict(loffta::train::evaluate(c, split, ckpt, batch_size));
        },
        py::arg("cache"), py::arg("split"), py::arg("checkpoint"), py::arg("batch_size") = 64);

    // Benchmarks.
    m.def(
        "bench_train",
        [](const std::filesystem::path& cache, const py::object& config, uint32_t steps) {
            loffta::train::TrainConfig cfg;
            from_json(to_json_value(config), cfg);
            loffta::bench::Report r;
            {
                py::gil_scoped_release release;
                r = loffta::bench::bench_train(cache, cfg, steps);
            }
            return from_json_value(json(r));
        },
        py::arg("cache"), py::arg("config") = py::none(), py::arg("steps") = 10);
    m.def(
        "bench_infer",
        [](const std::filesystem::path& cache, const std::filesystem::path& checkpoint, uint32_t batch_size,
           uint32_t steps) {
            const auto ckpt = loffta::model::load_checkpoint(checkpoint);
            loffta::bench::Report r;
            {
                py::gil_scoped_release release;
                r = loffta::bench::bench_infer(cache, ckpt, batch_size, steps);
            }
            return from_json_value(json(r));
        },
        py::arg("cache"), py::arg("checkpoint"), py::arg("batch_size") = 64, py::arg("steps") = 20);
}
