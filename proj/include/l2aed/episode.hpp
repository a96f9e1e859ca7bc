#pragma once

#include <cstdint>
#include <vector>

#include "l2aed/data.hpp"
#include "l2aed/rng.hpp"
#include "l2aed/tensor.hpp"

namespace l2aed {

/// C-way K-shot task shape with N_q queries per class.
struct EpisodeSpec {
    std::size_t ways = 5;
    std::size_t shots = 1;
    std::size_t queries = 5;
    Split split = Split::Train;

    /// Throws ParameterError unless ways >= 2, shots >= 1, queries >= 1.
    void validate() const;
};

struct ExampleRef {
    std::size_t class_id;
    std::size_t example;
    friend bool operator==(const ExampleRef&, const ExampleRef&) = default;
};

/// One sampled task. Support rows are class-major: rows [c*K, (c+1)*K) hold
/// the K examples of episode label c. Queries follow the same layout.
struct Episode {
    EpisodeSpec spec;
    Tensor support;                    // [C*K, ch, H, W]
    std::vector<int> support_labels;   // C*K
    std::vector<ExampleRef> support_refs;
    Tensor queries;                    // [C*Nq, ch, H, W]
    std::vector<int> query_labels;     // C*Nq
    std::vector<ExampleRef> query_refs;
    std::vector<std::size_t> classes;  // dataset class id of each label 0..C-1
    /// Seeds the 1-shot stack orderings (one order per class).
    std::uint64_t aggregation_seed = 0;
};

/// Draw C classes of `spec.split` without replacement, then K + N_q distinct
/// examples per class; the first K become support. Throws CapacityError
/// naming the deficit when the split is too small.
Episode sample_episode(const Dataset& ds, const EpisodeSpec& spec, Rng& rng);

}  // namespace l2aed
