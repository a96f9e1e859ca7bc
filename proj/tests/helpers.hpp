// Fixtures shared by the unit and acceptance tests.
#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "l2aed/episode.hpp"
#include "l2aed/model.hpp"
#include "l2aed/rng.hpp"

namespace l2aed::testing {

/// Small architecture that still has l = 3 (24 -> 12 -> 6 -> 3).
inline ModelConfig tiny_config(std::size_t m_max = 2, std::size_t embed_filters = 3,
                               std::size_t attention_filters = 2) {
    ModelConfig c;
    c.in_channels = 1;
    c.image_size = 24;
    c.embed_filters = embed_filters;
    c.attention_filters = attention_filters;
    c.m_max = m_max;
    return c;
}

/// Parameters with every tensor randomized (including BN affine terms and
/// biases, which `ModelParams::init` leaves at 1/0).
inline ModelParams random_params(const ModelConfig& cfg, Rng& rng) {
    ModelParams p = ModelParams::init(cfg, rng);
    for (auto& [name, t] : p.named()) {
        const bool is_gamma = name.find("gamma") != std::string::npos;
        const bool is_weight = name.find("kernel") != std::string::npos || name == "attention.fc.weight";
        if (is_weight) continue;
        for (double& v : t->data()) v = is_gamma ? 0.5 + rng.uniform() : 0.3 * rng.normal();
    }
    return p;
}

/// Episode with random pixel values (no dataset involved).
inline Episode random_episode(Rng& rng, std::size_t ways, std::size_t shots, std::size_t queries,
                              std::size_t size = 24, std::size_t channels = 1) {
    Episode ep;
    ep.spec = EpisodeSpec{ways, shots, queries, Split::Train};
    ep.support = Tensor(Shape{ways * shots, channels, size, size});
    ep.queries = Tensor(Shape{ways * queries, channels, size, size});
    for (double& v : ep.support.data()) v = rng.uniform();
    for (double& v : ep.queries.data()) v = rng.uniform();
    for (std::size_t c = 0; c < ways; ++c) {
        ep.classes.push_back(c);
        for (std::size_t k = 0; k < shots; ++k) {
            ep.support_labels.push_back(static_cast<int>(c));
            ep.support_refs.push_back({c, k});
        }
        for (std::size_t k = 0; k < queries; ++k) {
            ep.query_labels.push_back(static_cast<int>(c));
            ep.query_refs.push_back({c, shots + k});
        }
    }
    ep.aggregation_seed = rng.next_u64();
    return ep;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("l2aed_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    os << text;
}

}  // namespace l2aed::testing
