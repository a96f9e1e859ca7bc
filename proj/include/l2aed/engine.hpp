#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "l2aed/adam.hpp"
#include "l2aed/data.hpp"
#include "l2aed/episode.hpp"
#include "l2aed/model.hpp"

namespace l2aed {

/// Sub-seed streams. Every random draw in training and evaluation is taken
/// from Rng(derive_seed(seed, stream, counter)).
namespace streams {
inline constexpr std::uint64_t kInit = 1;             // counter 0: parameter init
inline constexpr std::uint64_t kTrainEpisode = 2;     // counter: episode index
inline constexpr std::uint64_t kDropout = 3;          // counter: episode index
inline constexpr std::uint64_t kValidation = 4;       // counter: validation task index
inline constexpr std::uint64_t kTestEpisode = 5;      // seeded by each eval seed; counter: task index
inline constexpr std::uint64_t kEvalSeeds = 6;        // counter: seed index
inline constexpr std::uint64_t kSplit = 7;            // counter 0: class split
inline constexpr std::uint64_t kSynth = 8;            // counter 0: synthetic data
inline constexpr std::uint64_t kDump = 9;             // counter 0: embedding dump episode
}  // namespace streams

struct TrainConfig {
    EpisodeSpec spec{5, 1, 5, Split::Train};
    std::size_t meta_batch = 4;
    double learning_rate = 1e-3;
    std::size_t lr_halving_period = 20000;
    std::size_t total_episodes = 0;
    std::size_t validation_period = 1000;
    /// 0 disables validation (best = final).
    std::size_t validation_tasks = 200;
    /// 1.0 disables meta-level dropout.
    double keep = 1.0;
    std::uint64_t seed = 0;
    EpisodeOptions options{};

    void validate() const;
};

/// Learning rate in effect after `episodes_done` training episodes:
/// lr0 * 0.5^floor(episodes_done / period).
double learning_rate_at(const TrainConfig& cfg, std::size_t episodes_done);

struct TrainLogRow {
    std::size_t episode = 0;  // 1-based
    double lr = 0.0;
    double loss = 0.0;
    /// Set on the last episode of a meta-batch after which validation ran.
    std::optional<double> val_accuracy;
};

struct TrainResult {
    ModelParams params;
    ModelParams best_params;
    AdamState adam;
    std::vector<TrainLogRow> log;
    std::optional<double> initial_val_accuracy;
    std::optional<double> best_val_accuracy;
    std::size_t best_episode = 0;
};

/// Observer for instrumentation; all callbacks optional.
struct TrainHooks {
    std::function<void(std::size_t step, std::size_t episodes_in_batch)> on_step;
    std::function<void(std::size_t episode, const Episode&, const TaskDropoutMask*)> on_episode;
    ModelHooks model;
};

/// Episodic meta-training: per step, sample `meta_batch` episodes, draw a
/// fresh dropout mask for each, average their losses and take one Adam step.
/// Validation on the Validation split picks the best parameters.
TrainResult meta_train(ModelParams initial, const Dataset& ds, const TrainConfig& cfg, const TrainHooks* hooks = nullptr);

/// Mean accuracy over `tasks` validation episodes drawn from the fixed
/// validation stream of `seed`.
double validation_accuracy(const ModelParams& params, const Dataset& ds, const EpisodeSpec& spec, std::size_t tasks,
                           std::uint64_t seed, const EpisodeOptions& opts = {});

struct Interval {
    double mean = 0.0;
    double half_width = 0.0;
};

/// Mean and 1.96 * s / sqrt(n) with s the sample standard deviation.
/// Throws ParameterError for fewer than two values.
Interval confidence_interval(std::span<const double> values);

struct EvalReport {
    EpisodeSpec spec;
    std::size_t tasks_per_seed = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<double> seed_means;
    std::vector<double> seed_half_widths;
    /// Per-task accuracies, seed-major.
    std::vector<double> task_accuracies;
    double mean = 0.0;
    /// 1.96 * sd(all per-task accuracies) / sqrt(tasks_per_seed).
    double half_width = 0.0;
    double best = 0.0;
    double worst = 0.0;
    double average = 0.0;
};

/// Returns predicted labels for the queries of an episode.
using EpisodePredictor = std::function<std::vector<int>(const Episode&)>;

/// Multi-seed meta-testing: for each seed, `tasks_per_seed` episodes are
/// drawn from Rng(derive_seed(seed, kTestEpisode, t)) and scored.
EvalReport meta_test(const EpisodePredictor& predictor, const Dataset& ds, const EpisodeSpec& spec,
                     std::size_t tasks_per_seed, std::span<const std::uint64_t> seeds);

/// Same with the full (undropped) network.
EvalReport meta_test(const ModelParams& params, const Dataset& ds, const EpisodeSpec& spec,
                     std::size_t tasks_per_seed, std::span<const std::uint64_t> seeds,
                     const EpisodeOptions& opts = {}, const ModelHooks* hooks = nullptr);

/// `count` evaluation seeds derived from `base`.
std::vector<std::uint64_t> eval_seeds(std::uint64_t base, std::size_t count);

/// key: value report (see docs/formats.md).
void write_report_text(std::ostream& os, const EvalReport& r);
/// seed<TAB>mean_accuracy<TAB>half_width_95 rows.
void write_report_tsv(std::ostream& os, const EvalReport& r);
/// episode<TAB>lr<TAB>train_loss<TAB>val_accuracy rows.
void write_train_log(std::ostream& os, std::span<const TrainLogRow> rows);

}  // namespace l2aed
