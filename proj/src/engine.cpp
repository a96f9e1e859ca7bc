#include "l2aed/engine.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "l2aed/errors.hpp"

namespace l2aed {

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// Accumulated relative to the first value, so a constant sequence has its
// exact value as mean and zero deviations.
double mean_of(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += x - v[0];
    return v[0] + acc / static_cast<double>(v.size());
}

double sample_sd(std::span<const double> v, double mean) {
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
    if (predicted.size() != truth.size()) throw ContractError("predictor returned the wrong number of labels");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
    return static_cast<double>(hit) / static_cast<double>(truth.size());
}

bool all_finite(const ModelParams& p) {
    for (const Tensor* t : p.tensors()) {
        if (!t->all_finite()) return false;
    }
    return true;
}

}  // namespace

void TrainConfig::validate() const {
    spec.validate();
    if (meta_batch == 0) throw ParameterError("meta_batch must be positive");
    if (!(learning_rate > 0.0)) throw ParameterError("learning rate must be positive");
    if (lr_halving_period == 0) throw ParameterError("lr halving period must be positive");
    if (validation_period == 0) throw ParameterError("validation period must be positive");
    if (!(keep > 0.0) || keep > 1.0) throw ParameterError("dropout keep must lie in (0, 1]");
}

double learning_rate_at(const TrainConfig& cfg, std::size_t episodes_done) {
    const auto halvings = static_cast<int>(episodes_done / cfg.lr_halving_period);
    return std::ldexp(cfg.learning_rate, -halvings);
}

double validation_accuracy(const ModelParams& params, const Dataset& ds, const EpisodeSpec& spec, std::size_t tasks,
                           std::uint64_t seed, const EpisodeOptions& opts) {
    EpisodeSpec vspec = spec;
    vspec.split = Split::Validation;
    double total = 0.0;
    for (std::size_t t = 0; t < tasks; ++t) {
        Rng rng(derive_seed(seed, streams::kValidation, t));
        const Episode ep = sample_episode(ds, vspec, rng);
        total += accuracy(predict(params, ep, opts), ep.query_labels);
    }
    return total / static_cast<double>(tasks);
}

TrainResult meta_train(ModelParams initial, const Dataset& ds, const TrainConfig& cfg, const TrainHooks* hooks) {
    cfg.validate();
    TrainResult r;
    r.params = std::move(initial);
    r.best_params = r.params;
    r.adam = AdamState::for_params(std::as_const(r.params).tensors());
    const bool validate = cfg.validation_tasks > 0 && cfg.total_episodes > 0;
    if (validate) {
        r.initial_val_accuracy =
            validation_accuracy(r.params, ds, cfg.spec, cfg.validation_tasks, cfg.seed, cfg.options);
        r.best_val_accuracy = r.initial_val_accuracy;
    }
    EpisodeSpec train_spec = cfg.spec;
    train_spec.split = Split::Train;
    const ModelHooks* model_hooks = hooks ? &hooks->model : nullptr;

    std::size_t done = 0;
    std::size_t step = 0;
    while (done < cfg.total_episodes) {
        const std::size_t batch = std::min(cfg.meta_batch, cfg.total_episodes - done);
        const double lr = learning_rate_at(cfg, done);
        std::vector<Tensor> grads;
        for (std::size_t i = 0; i < batch; ++i) {
            const std::size_t e = done + i;
            Rng erng(derive_seed(cfg.seed, streams::kTrainEpisode, e));
            const Episode ep = sample_episode(ds, train_spec, erng);
            std::optional<TaskDropoutMask> mask;
            if (cfg.keep < 1.0) {
                Rng mrng(derive_seed(cfg.seed, streams::kDropout, e));
                mask = sample_task_mask(mrng, cfg.keep, r.params.config.embed_filters);
            }
            if (hooks && hooks->on_episode) hooks->on_episode(e, ep, mask ? &*mask : nullptr);
            LossAndGrads lg = episode_loss(r.params, ep, mask ? &*mask : nullptr, cfg.options, model_hooks);
            if (!std::isfinite(lg.loss)) {
                throw NumericError("training diverged: loss is not finite at episode " + std::to_string(e + 1));
            }
            if (grads.empty()) {
                grads = std::move(lg.grads);
            } else {
                for (std::size_t k = 0; k < grads.size(); ++k) {
                    for (std::size_t j = 0; j < grads[k].numel(); ++j) grads[k][j] += lg.grads[k][j];
                }
            }
            r.log.push_back(TrainLogRow{e + 1, lr, lg.loss, std::nullopt});
        }
        const double inv = 1.0 / static_cast<double>(batch);
        for (auto& gt : grads) {
            for (double& v : gt.data()) v *= inv;
        }
        adam_step(r.params.tensors(), grads, r.adam, lr);
        if (!all_finite(r.params)) {
            throw NumericError("training diverged: parameters became non-finite at step " + std::to_string(step + 1));
        }
        const std::size_t before = done;
        done += batch;
        ++step;
        if (hooks && hooks->on_step) hooks->on_step(step, batch);

        const bool due = done / cfg.validation_period > before / cfg.validation_period || done == cfg.total_episodes;
        if (validate && due) {
            const double acc = validation_accuracy(r.params, ds, cfg.spec, cfg.validation_tasks, cfg.seed, cfg.options);
            r.log.back().val_accuracy = acc;
            if (acc > *r.best_val_accuracy) {
                r.best_val_accuracy = acc;
                r.best_params = r.params;
                r.best_episode = done;
            }
        }
    }
    if (!validate) r.best_params = r.params;
    return r;
}

Interval confidence_interval(std::span<const double> values) {
    if (values.size() < 2) throw ParameterError("confidence_interval needs at least two values");
    const double mean = mean_of(values);
    return {mean, 1.96 * sample_sd(values, mean) / std::sqrt(static_cast<double>(values.size()))};
}

std::vector<std::uint64_t> eval_seeds(std::uint64_t base, std::size_t count) {
    std::vector<std::uint64_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = derive_seed(base, streams::kEvalSeeds, i);
    return out;
}

EvalReport meta_test(const EpisodePredictor& predictor, const Dataset& ds, const EpisodeSpec& spec,
                     std::size_t tasks_per_seed, std::span<const std::uint64_t> seeds) {
    spec.validate();
    if (tasks_per_seed < 2) throw ParameterError("meta_test needs at least two tasks per seed");
    if (seeds.empty()) throw ParameterError("meta_test needs at least one seed");
    EvalReport r;
    r.spec = spec;
    r.tasks_per_seed = tasks_per_seed;
    r.seeds.assign(seeds.begin(), seeds.end());
    for (std::uint64_t seed : seeds) {
        std::vector<double> accs;
        accs.reserve(tasks_per_seed);
        for (std::size_t t = 0; t < tasks_per_seed; ++t) {
            Rng rng(derive_seed(seed, streams::kTestEpisode, t));
            const Episode ep = sample_episode(ds, spec, rng);
            accs.push_back(accuracy(predictor(ep), ep.query_labels));
        }
        const Interval ci = confidence_interval(accs);
        r.seed_means.push_back(ci.mean);
        r.seed_half_widths.push_back(ci.half_width);
        r.task_accuracies.insert(r.task_accuracies.end(), accs.begin(), accs.end());
    }
    const double mean = mean_of(r.task_accuracies);
    r.mean = mean;
    r.half_width = 1.96 * sample_sd(r.task_accuracies, mean) / std::sqrt(static_cast<double>(tasks_per_seed));
    r.best = *std::max_element(r.seed_means.begin(), r.seed_means.end());
    r.worst = *std::min_element(r.seed_means.begin(), r.seed_means.end());
    double avg = 0.0;
    for (double m : r.seed_means) avg += m;
    r.average = avg / static_cast<double>(r.seed_means.size());
    return r;
}

EvalReport meta_test(const ModelParams& params, const Dataset& ds, const EpisodeSpec& spec,
                     std::size_t tasks_per_seed, std::span<const std::uint64_t> seeds, const EpisodeOptions& opts,
                     const ModelHooks* hooks) {
    return meta_test([&](const Episode& ep) { return predict(params, ep, opts, hooks); }, ds, spec, tasks_per_seed,
                     seeds);
}

void write_report_text(std::ostream& os, const EvalReport& r) {
    os << "format: l2aed-eval-report/1\n";
    os << "ways: " << r.spec.ways << '\n';
    os << "shots: " << r.spec.shots << '\n';
    os << "queries: " << r.spec.queries << '\n';
    os << "split: " << split_name(r.spec.split) << '\n';
    os << "tasks_per_seed: " << r.tasks_per_seed << '\n';
    os << "seeds: " << r.seeds.size() << '\n';
    os << "mean_accuracy: " << fmt("%.6f", r.mean) << '\n';
    os << "half_width_95: " << fmt("%.6f", r.half_width) << '\n';
    os << "best: " << fmt("%.6f", r.best) << '\n';
    os << "worst: " << fmt("%.6f", r.worst) << '\n';
    os << "average: " << fmt("%.6f", r.average) << '\n';
}

void write_report_tsv(std::ostream& os, const EvalReport& r) {
    os << "seed\tmean_accuracy\thalf_width_95\n";
    for (std::size_t i = 0; i < r.seeds.size(); ++i) {
        os << r.seeds[i] << '\t' << fmt("%.6f", r.seed_means[i]) << '\t' << fmt("%.6f", r.seed_half_widths[i])
           << '\n';
    }
}

void write_train_log(std::ostream& os, std::span<const TrainLogRow> rows) {
    os << "episode\tlr\ttrain_loss\tval_accuracy\n";
    for (const auto& row : rows) {
        os << row.episode << '\t' << fmt("%.8g", row.lr) << '\t' << fmt("%.10f", row.loss) << '\t'
           << (row.val_accuracy ? fmt("%.6f", *row.val_accuracy) : std::string("-")) << '\n';
    }
}

}  // namespace l2aed
