#include "l2aed/commands.hpp"

#include <cstdio>
#include <fstream>
#include <ostream>

#include "l2aed/engine.hpp"
#include "l2aed/errors.hpp"
#include "l2aed/model.hpp"
#include "l2aed/run_config.hpp"

namespace l2aed {

namespace fs = std::filesystem;

namespace {

RunConfig load_config(const CommandOptions& opts) {
    RunConfig cfg = RunConfig::from_file(opts.config);
    if (opts.use_env) cfg.apply_env();
    if (opts.seed) cfg.set("seed", std::to_string(*opts.seed));
    if (opts.out_dir) cfg.set("out_dir", opts.out_dir->string());
    return cfg;
}

fs::path prepare_out_dir(const RunConfig& cfg) {
    const fs::path dir = cfg.get("out_dir");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory '" + dir.string() + "'");
    std::ofstream os(dir / "config.resolved");
    if (!os) throw DataError("cannot write to output directory '" + dir.string() + "'");
    cfg.write_resolved(os);
    return dir;
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream os(p, std::ios::trunc);
    if (!os) throw DataError("cannot write '" + p.string() + "'");
    return os;
}

Dataset dataset_for(const RunConfig& cfg) {
    Dataset ds = cfg.build_dataset();
    const auto size = static_cast<std::size_t>(cfg.get_int("image_size"));
    if (ds.height != size || ds.width != size) {
        throw DataError("dataset images are " + std::to_string(ds.height) + "x" + std::to_string(ds.width) +
                        " but image_size is " + std::to_string(size));
    }
    return ds;
}

ModelParams checkpoint_for(const RunConfig& cfg, const Dataset& ds, const fs::path& path) {
    Checkpoint ck = load_checkpoint(path);
    const ModelConfig expect = cfg.model_config(ds.channels);
    if (!(ck.params.config == expect)) {
        throw DataError("checkpoint architecture does not match the config (image_size, channels, filters, "
                        "last_pool or m_max differ)");
    }
    return std::move(ck.params);
}

template <typename F>
int guarded(std::ostream& err, const char* what, F&& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        err << what << ": " << e.what() << '\n';
        return kExitUsage;
    } catch (const NumericError& e) {
        err << what << ": numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const Error& e) {
        err << what << ": " << e.what() << '\n';
        return kExitData;
    } catch (const std::exception& e) {
        err << what << ": " << e.what() << '\n';
        return kExitData;
    }
}

void write_row(std::ostream& os, const char* kind, int label, const double* v, std::size_t n) {
    os << kind << '\t' << label;
    char buf[40];
    for (std::size_t i = 0; i < n; ++i) {
        std::snprintf(buf, sizeof buf, "\t%.17g", v[i]);
        os << buf;
    }
    os << '\n';
}

}  // namespace

int cmd_train(const CommandOptions& opts, std::ostream& err) {
    return guarded(err, "train", [&] {
        const RunConfig cfg = load_config(opts);
        const TrainConfig tc = cfg.train_config();
        const Dataset ds = dataset_for(cfg);
        const ModelConfig mc = cfg.model_config(ds.channels);
        const fs::path dir = prepare_out_dir(cfg);

        Rng init_rng(derive_seed(tc.seed, streams::kInit));
        ModelParams params = ModelParams::init(mc, init_rng);
        if (cfg.get("attention_init") == "zero") params.zero_attention_fc();

        TrainHooks hooks;
        if (!opts.quiet) {
            hooks.on_step = [&](std::size_t step, std::size_t) {
                if (step % 50 == 0) err << "train: step " << step << '\n' << std::flush;
            };
        }
        const TrainResult r = meta_train(std::move(params), ds, tc, &hooks);

        {
            auto os = open_out(dir / "train_log.tsv");
            write_train_log(os, r.log);
        }
        save_checkpoint(dir / "checkpoint.bin", r.params, &r.adam, tc.total_episodes);
        save_checkpoint(dir / "best.bin", r.best_params, nullptr, r.best_episode);
        {
            auto os = open_out(dir / "train_summary.txt");
            char buf[64];
            os << "episodes: " << tc.total_episodes << '\n';
            if (r.initial_val_accuracy) {
                std::snprintf(buf, sizeof buf, "%.6f", *r.initial_val_accuracy);
                os << "initial_val_accuracy: " << buf << '\n';
                std::snprintf(buf, sizeof buf, "%.6f", *r.best_val_accuracy);
                os << "best_val_accuracy: " << buf << '\n';
            }
            os << "best_episode: " << r.best_episode << '\n';
        }
        if (!opts.quiet) err << "train: wrote " << dir.string() << '\n';
        return static_cast<int>(kExitOk);
    });
}

int cmd_eval(const CommandOptions& opts, std::ostream& err) {
    return guarded(err, "eval", [&] {
        const RunConfig cfg = load_config(opts);
        const Dataset ds = dataset_for(cfg);
        const ModelParams params = checkpoint_for(cfg, ds, opts.checkpoint);
        const EpisodeSpec spec = cfg.episode_spec(Split::Test);
        const long long n_seeds = cfg.get_int("eval_seeds"), n_tasks = cfg.get_int("eval_tasks");
        if (n_seeds < 1) throw ConfigError("config key 'eval_seeds' must be positive");
        if (n_tasks < 2) throw ConfigError("config key 'eval_tasks' must be at least 2");
        const auto seeds = eval_seeds(cfg.get_u64("seed"), static_cast<std::size_t>(n_seeds));
        const auto tasks = static_cast<std::size_t>(n_tasks);
        const fs::path dir = prepare_out_dir(cfg);
        const EvalReport r = meta_test(params, ds, spec, tasks, seeds, cfg.episode_options());
        {
            auto os = open_out(dir / "eval_report.txt");
            write_report_text(os, r);
        }
        {
            auto os = open_out(dir / "eval_seeds.tsv");
            write_report_tsv(os, r);
        }
        if (!opts.quiet) {
            char buf[96];
            std::snprintf(buf, sizeof buf, "eval: mean %.4f +- %.4f (best %.4f, worst %.4f)\n", r.mean, r.half_width,
                          r.best, r.worst);
            err << buf;
        }
        return static_cast<int>(kExitOk);
    });
}

int cmd_dump_embeddings(const CommandOptions& opts, std::ostream& err) {
    return guarded(err, "dump-embeddings", [&] {
        const RunConfig cfg = load_config(opts);
        const Dataset ds = dataset_for(cfg);
        const ModelParams params = checkpoint_for(cfg, ds, opts.checkpoint);
        const EpisodeSpec spec = cfg.episode_spec(parse_split(cfg.get("dump_split")));
        Rng rng(derive_seed(cfg.get_u64("seed"), streams::kDump));
        const Episode ep = sample_episode(ds, spec, rng);

        EpisodeOptions learned = cfg.episode_options();
        learned.aggregation = Aggregation::Learned;
        Graph g;
        const ParamVars pv = bind_params(g, params, false);
        const EpisodeForward f = episode_forward(g, pv, ep, nullptr, learned);
        std::vector<Var> means;
        for (std::size_t c = 0; c < spec.ways; ++c) {
            std::vector<int> rows(spec.shots);
            for (std::size_t k = 0; k < spec.shots; ++k) rows[k] = static_cast<int>(c * spec.shots + k);
            means.push_back(aggregate_kshot(pv, f.support_embeddings, rows, Aggregation::Mean));
        }
        const Var mean_reps = stack(means);

        std::ofstream os(opts.output, std::ios::trunc);
        if (!os) throw DataError("cannot write '" + opts.output.string() + "'");
        const Tensor& sup = f.support_embeddings.value();
        const std::size_t d = sup.numel() / sup.dim(0);
        os << "kind\tclass";
        for (std::size_t i = 0; i < d; ++i) os << "\tv" << i;
        os << '\n';
        for (std::size_t r = 0; r < sup.dim(0); ++r) write_row(os, "support", ep.support_labels[r], sup.ptr() + r * d, d);
        const Tensor& qry = f.query_embeddings.value();
        for (std::size_t r = 0; r < qry.dim(0); ++r) write_row(os, "query", ep.query_labels[r], qry.ptr() + r * d, d);
        const Tensor& agg = f.representatives.value();
        for (std::size_t c = 0; c < spec.ways; ++c) write_row(os, "aggregated", static_cast<int>(c), agg.ptr() + c * d, d);
        const Tensor& mr = mean_reps.value();
        for (std::size_t c = 0; c < spec.ways; ++c) write_row(os, "mean", static_cast<int>(c), mr.ptr() + c * d, d);
        if (!os) throw DataError("write to '" + opts.output.string() + "' failed");
        if (!opts.quiet) err << "dump-embeddings: wrote " << opts.output.string() << '\n';
        return static_cast<int>(kExitOk);
    });
}

}  // namespace l2aed
