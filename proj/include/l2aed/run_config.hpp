#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "l2aed/data.hpp"
#include "l2aed/engine.hpp"
#include "l2aed/model.hpp"

namespace l2aed {

/// Flat `key = value` run configuration.
///
/// One entry per line, `#` starts a comment. Every key has a default (see
/// `RunConfig::keys()`); unknown keys are rejected. Values can be
/// overridden from the environment with `L2AED_<KEY>` (upper-case key).
class RunConfig {
public:
    struct KeyInfo {
        const char* key;
        const char* default_value;
        const char* help;
    };
    static const std::vector<KeyInfo>& keys();

    RunConfig();  // all defaults

    static RunConfig parse(std::istream& is, const std::string& origin = "<config>");
    static RunConfig from_file(const std::filesystem::path& path);

    /// Apply L2AED_* environment overrides for every known key.
    void apply_env();
    void set(const std::string& key, const std::string& value);

    const std::string& get(const std::string& key) const;
    long long get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    /// Sorted `key = value` lines, parseable by `parse`.
    void write_resolved(std::ostream& os) const;

    EpisodeSpec episode_spec(Split split) const;
    TrainConfig train_config() const;
    EpisodeOptions episode_options() const;
    /// Model architecture for a dataset with `channels` input channels.
    ModelConfig model_config(std::size_t channels) const;
    /// Build the dataset described by the config (synthetic, images or cache).
    Dataset build_dataset() const;

private:
    std::map<std::string, std::string> values_;
};

}  // namespace l2aed
