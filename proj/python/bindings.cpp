#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "l2aed/autodiff.hpp"
#include "l2aed/commands.hpp"
#include "l2aed/data.hpp"
#include "l2aed/engine.hpp"
#include "l2aed/errors.hpp"
#include "l2aed/model.hpp"

namespace py = pybind11;
using namespace l2aed;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    if (shape.empty()) shape = {1};
    return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
    Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

// Forward evaluation of a single graph op on constant inputs.
template <typename F>
Array eval_op(F&& f) {
    Graph g;
    return to_array(f(g).value());
}

py::dict params_dict(const ModelParams& p) {
    py::dict d;
    for (const auto& [name, t] : p.named()) d[py::str(name)] = to_array(*t);
    return d;
}

py::dict report_dict(const EvalReport& r) {
    py::dict d;
    d["mean"] = r.mean;
    d["half_width"] = r.half_width;
    d["best"] = r.best;
    d["worst"] = r.worst;
    d["average"] = r.average;
    d["seeds"] = r.seeds;
    d["seed_means"] = r.seed_means;
    d["seed_half_widths"] = r.seed_half_widths;
    d["task_accuracies"] = r.task_accuracies;
    return d;
}

Split split_arg(const std::string& s) { return parse_split(s); }

}  // namespace

PYBIND11_MODULE(_l2aed, m) {
    m.doc() = "Few-shot learning with learned channel-wise aggregation";

    static py::exception<Error> base(m, "Error");
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<ParameterError>(m, "ParameterError", base.ptr());
    py::register_exception<CapacityError>(m, "CapacityError", base.ptr());
    py::register_exception<ContractError>(m, "ContractError", base.ptr());
    py::register_exception<DataError>(m, "DataError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());

    // Layer primitives (forward values).
    m.def("conv2d", [](const Array& x, const Array& k, const Array& b) {
        return eval_op([&](Graph& g) { return conv2d(g.constant(to_tensor(x)), g.constant(to_tensor(k)), g.constant(to_tensor(b))); });
    }, py::arg("x"), py::arg("kernel"), py::arg("bias"));
    m.def("batchnorm", [](const Array& x, const Array& gamma, const Array& beta, double eps) {
        return eval_op([&](Graph& g) {
            return batchnorm_batch(g.constant(to_tensor(x)), g.constant(to_tensor(gamma)), g.constant(to_tensor(beta)), eps);
        });
    }, py::arg("x"), py::arg("gamma"), py::arg("beta"), py::arg("eps") = 1e-5);
    m.def("relu", [](const Array& x) { return eval_op([&](Graph& g) { return relu(g.constant(to_tensor(x))); }); });
    m.def("maxpool2", [](const Array& x) { return eval_op([&](Graph& g) { return maxpool2(g.constant(to_tensor(x))); }); });
    m.def("linear", [](const Array& x, const Array& w, const Array& b) {
        return eval_op([&](Graph& g) { return linear(g.constant(to_tensor(x)), g.constant(to_tensor(w)), g.constant(to_tensor(b))); });
    }, py::arg("x"), py::arg("weight"), py::arg("bias"));
    m.def("softmax", [](const Array& x) { return eval_op([&](Graph& g) { return softmax(g.constant(to_tensor(x))); }); });
    m.def("resize_bilinear", [](const Array& img, std::size_t h, std::size_t w) {
        return to_array(resize_bilinear(to_tensor(img), h, w));
    }, py::arg("image"), py::arg("height"), py::arg("width"));
    m.def("rotate90", [](const Array& img, int turns) { return to_array(rotate90(to_tensor(img), turns)); },
          py::arg("image"), py::arg("quarter_turns") = 1);
    m.def("confidence_interval", [](const std::vector<double>& v) {
        const Interval ci = confidence_interval(v);
        return py::make_tuple(ci.mean, ci.half_width);
    });

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("in_channels", &ModelConfig::in_channels)
        .def_readwrite("image_size", &ModelConfig::image_size)
        .def_readwrite("last_pool", &ModelConfig::last_pool)
        .def_readwrite("embed_filters", &ModelConfig::embed_filters)
        .def_readwrite("attention_filters", &ModelConfig::attention_filters)
        .def_readwrite("m_max", &ModelConfig::m_max)
        .def_property_readonly("map_side", &ModelConfig::map_side);

    py::class_<ModelParams>(m, "ModelParams")
        .def_static("init", [](const ModelConfig& c, std::uint64_t seed) {
            Rng rng(seed);
            return ModelParams::init(c, rng);
        }, py::arg("config"), py::arg("seed") = 0)
        .def_static("load", [](const std::filesystem::path& p) { return load_checkpoint(p).params; })
        .def("save", [](const ModelParams& p, const std::filesystem::path& path) { save_checkpoint(path, p); })
        .def_readonly("config", &ModelParams::config)
        .def("named", &params_dict, "Copies of every parameter tensor keyed by name")
        .def("set", [](ModelParams& p, const std::string& name, const Array& value) {
            for (auto& [n, t] : p.named()) {
                if (n != name) continue;
                Tensor v = to_tensor(value);
                if (v.shape() != t->shape()) throw ShapeError("set: expected " + shape_str(t->shape()) + ", got " + shape_str(v.shape()));
                *t = std::move(v);
                return;
            }
            throw ParameterError("set: unknown parameter '" + name + "'");
        })
        .def("zero_attention_fc", &ModelParams::zero_attention_fc);

    py::class_<Dataset>(m, "Dataset")
        .def_static("synthetic", [](std::size_t classes, std::size_t per_class, std::size_t size, double noise_sd,
                                    double outlier_rate, std::uint64_t seed) {
            SynthParams p;
            p.num_classes = classes;
            p.per_class = per_class;
            p.image_size = size;
            p.noise_sd = noise_sd;
            p.outlier_rate = outlier_rate;
            p.seed = seed;
            return synth_dataset(p);
        }, py::arg("classes") = 30, py::arg("per_class") = 20, py::arg("image_size") = 28, py::arg("noise_sd") = 0.1,
            py::arg("outlier_rate") = 0.0, py::arg("seed") = 0)
        .def_static("from_images", [](const std::filesystem::path& root, std::size_t size, bool grayscale, bool invert) {
            return load_image_dataset(root, size, grayscale, invert, nullptr);
        }, py::arg("root"), py::arg("image_size"), py::arg("grayscale") = true,
                    py::arg("invert") = false)
        .def_static("load", &load_dataset)
        .def("save", [](const Dataset& ds, const std::filesystem::path& p) { save_dataset(p, ds); })
        .def("split", [](const Dataset& ds, std::size_t train, std::size_t val, std::size_t test, std::uint64_t seed) {
            Rng rng(seed);
            return split_classes(ds, SplitCounts{train, val, test}, rng);
        }, py::arg("train"), py::arg("validation"), py::arg("test"), py::arg("seed") = 0)
        .def("augment_rotations", [](const Dataset& ds) { return augment_rotations(ds); })
        .def_property_readonly("num_classes", [](const Dataset& ds) { return ds.classes.size(); })
        .def_property_readonly("image_shape", [](const Dataset& ds) { return py::make_tuple(ds.channels, ds.height, ds.width); })
        .def("class_ids", [](const Dataset& ds, const std::string& split) { return ds.class_ids(split_arg(split)); })
        .def("class_name", [](const Dataset& ds, std::size_t c) { return ds.classes.at(c).name; })
        .def("examples", [](const Dataset& ds, std::size_t c) {
            std::vector<Array> out;
            for (const auto& e : ds.classes.at(c).examples) out.push_back(to_array(e));
            return out;
        })
        .def("outliers", [](const Dataset& ds, std::size_t c) {
            const auto& f = ds.classes.at(c).outlier;
            return std::vector<int>(f.begin(), f.end());
        });

    py::class_<Episode>(m, "Episode")
        .def_property_readonly("support", [](const Episode& e) { return to_array(e.support); })
        .def_property_readonly("queries", [](const Episode& e) { return to_array(e.queries); })
        .def_readonly("support_labels", &Episode::support_labels)
        .def_readonly("query_labels", &Episode::query_labels)
        .def_readonly("classes", &Episode::classes);

    m.def("sample_episode", [](const Dataset& ds, std::size_t ways, std::size_t shots, std::size_t queries,
                               const std::string& split, std::uint64_t seed) {
        Rng rng(seed);
        return sample_episode(ds, EpisodeSpec{ways, shots, queries, split_arg(split)}, rng);
    }, py::arg("dataset"), py::arg("ways"), py::arg("shots"), py::arg("queries"), py::arg("split") = "train",
          py::arg("seed") = 0);

    m.def("episode_loss", [](const ModelParams& p, const Episode& ep, double keep, std::uint64_t mask_seed,
                             const std::string& aggregation) {
        std::optional<TaskDropoutMask> mask;
        if (keep < 1.0) {
            Rng rng(mask_seed);
            mask = sample_task_mask(rng, keep, p.config.embed_filters);
        }
        EpisodeOptions opts;
        opts.aggregation = parse_aggregation(aggregation);
        const LossAndGrads lg = episode_loss(p, ep, mask ? &*mask : nullptr, opts);
        py::dict grads;
        const auto named = p.named();
        for (std::size_t i = 0; i < named.size(); ++i) grads[py::str(named[i].first)] = to_array(lg.grads[i]);
        return py::make_tuple(lg.loss, grads);
    }, py::arg("params"), py::arg("episode"), py::arg("keep") = 1.0, py::arg("mask_seed") = 0,
          py::arg("aggregation") = "l2ae", "Loss and gradients of every parameter for one episode");

    m.def("predict", [](const ModelParams& p, const Episode& ep, const std::string& aggregation) {
        EpisodeOptions opts;
        opts.aggregation = parse_aggregation(aggregation);
        return predict(p, ep, opts);
    }, py::arg("params"), py::arg("episode"), py::arg("aggregation") = "l2ae");

    m.def("meta_train", [](const ModelParams& init, const Dataset& ds, std::size_t ways, std::size_t shots,
                           std::size_t queries, std::size_t episodes, double keep, std::uint64_t seed,
                           std::size_t validation_period, std::size_t validation_tasks) {
        TrainConfig cfg;
        cfg.spec = EpisodeSpec{ways, shots, queries, Split::Train};
        cfg.total_episodes = episodes;
        cfg.keep = keep;
        cfg.seed = seed;
        cfg.validation_period = validation_period;
        cfg.validation_tasks = validation_tasks;
        TrainResult r;
        {
            py::gil_scoped_release release;
            r = meta_train(init, ds, cfg);
        }
        std::vector<py::tuple> log;
        for (const auto& row : r.log)
            log.push_back(py::make_tuple(row.episode, row.lr, row.loss,
                                         row.val_accuracy ? py::cast(*row.val_accuracy) : py::none()));
        return py::make_tuple(r.params, r.best_params, log);
    }, py::arg("params"), py::arg("dataset"), py::arg("ways") = 5, py::arg("shots") = 1, py::arg("queries") = 5,
          py::arg("episodes") = 100, py::arg("keep") = 1.0, py::arg("seed") = 0, py::arg("validation_period") = 1000,
          py::arg("validation_tasks") = 0, "Returns (final params, best params, log rows)");

    m.def("meta_test", [](const ModelParams& p, const Dataset& ds, std::size_t ways, std::size_t shots,
                          std::size_t queries, std::size_t tasks, std::size_t seeds, std::uint64_t base_seed,
                          const std::string& aggregation) {
        EpisodeOptions opts;
        opts.aggregation = parse_aggregation(aggregation);
        const auto s = eval_seeds(base_seed, seeds);
        EvalReport r;
        {
            py::gil_scoped_release release;
            r = meta_test(p, ds, EpisodeSpec{ways, shots, queries, Split::Test}, tasks, s, opts);
        }
        return report_dict(r);
    }, py::arg("params"), py::arg("dataset"), py::arg("ways") = 5, py::arg("shots") = 1, py::arg("queries") = 5,
          py::arg("tasks") = 600, py::arg("seeds") = 10, py::arg("base_seed") = 1, py::arg("aggregation") = "l2ae");

    // Command layer; returns (exit code, diagnostics).
    auto command = [](int (*fn)(const CommandOptions&, std::ostream&)) {
        return [fn](const std::filesystem::path& config, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& output, std::optional<std::uint64_t> seed,
                    std::optional<std::filesystem::path> out_dir) {
            CommandOptions o;
            o.config = config;
            o.checkpoint = checkpoint;
            o.output = output;
            o.seed = seed;
            o.out_dir = out_dir;
            o.quiet = true;
            std::ostringstream err;
            const int code = fn(o, err);
            return py::make_tuple(code, err.str());
        };
    };
    const auto args = std::make_tuple(py::arg("config"), py::arg("checkpoint") = std::filesystem::path(),
                                      py::arg("output") = std::filesystem::path(), py::arg("seed") = py::none(),
                                      py::arg("out_dir") = py::none());
    m.def("train", command(&cmd_train), std::get<0>(args), std::get<1>(args), std::get<2>(args), std::get<3>(args),
          std::get<4>(args));
    m.def("evaluate", command(&cmd_eval), std::get<0>(args), std::get<1>(args), std::get<2>(args), std::get<3>(args),
          std::get<4>(args));
    m.def("dump_embeddings", command(&cmd_dump_embeddings), std::get<0>(args), std::get<1>(args), std::get<2>(args),
          std::get<3>(args), std::get<4>(args));
}
