// Command-line front end: train, eval, dump-embeddings.

#include <iostream>

#include "CLI11.hpp"
#include "l2aed/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Few-shot learning with learned channel-wise embedding aggregation"};
    app.require_subcommand(1);

    l2aed::CommandOptions opts;
    std::uint64_t seed = 0;
    std::string out_dir;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--seed", seed, "Override the config seed");
        sub->add_option("--out-dir", out_dir, "Override the config output directory");
        sub->add_flag("--quiet", opts.quiet, "Suppress progress messages");
    };

    auto* train = app.add_subcommand("train", "Meta-train a model");
    train->add_option("config", opts.config, "Run configuration")->required();
    add_common(train);

    auto* eval = app.add_subcommand("eval", "Multi-seed meta-test of a checkpoint");
    eval->add_option("checkpoint", opts.checkpoint, "Checkpoint file")->required();
    eval->add_option("config", opts.config, "Run configuration")->required();
    add_common(eval);

    auto* dump = app.add_subcommand("dump-embeddings", "Write one episode's embeddings as TSV");
    dump->add_option("checkpoint", opts.checkpoint, "Checkpoint file")->required();
    dump->add_option("config", opts.config, "Run configuration")->required();
    dump->add_option("out", opts.output, "Output TSV path")->required();
    add_common(dump);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? l2aed::kExitOk : l2aed::kExitUsage;
    }

    for (auto* sub : {train, eval, dump}) {
        if (!sub->parsed()) continue;
        if (sub->count("--seed")) opts.seed = seed;
        if (sub->count("--out-dir")) opts.out_dir = out_dir;
    }

    if (train->parsed()) return l2aed::cmd_train(opts, std::cerr);
    if (eval->parsed()) return l2aed::cmd_eval(opts, std::cerr);
    return l2aed::cmd_dump_embeddings(opts, std::cerr);
}
