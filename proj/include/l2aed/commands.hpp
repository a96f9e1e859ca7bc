#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

namespace l2aed {

/// Process exit codes of the command-line tool.
enum ExitCode : int {
    kExitOk = 0,
    kExitUsage = 1,
    kExitData = 2,
    kExitNumeric = 3,
};

struct CommandOptions {
    std::filesystem::path config;
    std::filesystem::path checkpoint;
    std::filesystem::path output;
    std::optional<std::uint64_t> seed;
    std::optional<std::filesystem::path> out_dir;
    bool quiet = false;
    bool use_env = true;
};

/// Train from a config; writes config.resolved, train_log.tsv,
/// checkpoint.bin, best.bin and train_summary.txt into the output directory.
int cmd_train(const CommandOptions& opts, std::ostream& err);

/// Evaluate a checkpoint; writes config.resolved, eval_report.txt and
/// eval_seeds.tsv into the output directory.
int cmd_eval(const CommandOptions& opts, std::ostream& err);

/// Dump support, query, aggregated and mean embeddings of one episode as TSV.
int cmd_dump_embeddings(const CommandOptions& opts, std::ostream& err);

}  // namespace l2aed
