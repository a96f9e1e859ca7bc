#include "l2aed/episode.hpp"

#include <algorithm>

#include "l2aed/errors.hpp"

namespace l2aed {

void EpisodeSpec::validate() const {
    if (ways < 2) throw ParameterError("episode needs at least 2 ways");
    if (shots < 1) throw ParameterError("episode needs at least 1 shot");
    if (queries < 1) throw ParameterError("episode needs at least 1 query per class");
}

Episode sample_episode(const Dataset& ds, const EpisodeSpec& spec, Rng& rng) {
    spec.validate();
    const std::size_t need = spec.shots + spec.queries;
    std::vector<std::size_t> pool;
    for (std::size_t id : ds.class_ids(spec.split)) {
        if (ds.classes[id].examples.size() >= need) pool.push_back(id);
    }
    if (pool.size() < spec.ways) {
        throw CapacityError(std::string("split '") + split_name(spec.split) + "' has " + std::to_string(pool.size()) +
                            " classes with at least " + std::to_string(need) + " examples; " +
                            std::to_string(spec.ways) + " are needed (short by " +
                            std::to_string(spec.ways - pool.size()) + ")");
    }

    Episode ep;
    ep.spec = spec;
    const Shape img{ds.channels, ds.height, ds.width};
    const std::size_t per = shape_numel(img);
    ep.support = Tensor(Shape{spec.ways * spec.shots, ds.channels, ds.height, ds.width});
    ep.queries = Tensor(Shape{spec.ways * spec.queries, ds.channels, ds.height, ds.width});

    const auto picked = rng.sample_without_replacement(pool.size(), spec.ways);
    for (std::size_t label = 0; label < spec.ways; ++label) {
        const std::size_t cid = pool[picked[label]];
        ep.classes.push_back(cid);
        const auto& cls = ds.classes[cid];
        const auto examples = rng.sample_without_replacement(cls.examples.size(), need);
        for (std::size_t k = 0; k < need; ++k) {
            const std::size_t e = examples[k];
            const bool is_support = k < spec.shots;
            Tensor& dst = is_support ? ep.support : ep.queries;
            const std::size_t row = is_support ? label * spec.shots + k : label * spec.queries + (k - spec.shots);
            std::copy_n(cls.examples[e].ptr(), per, dst.ptr() + row * per);
            if (is_support) {
                ep.support_labels.push_back(static_cast<int>(label));
                ep.support_refs.push_back({cid, e});
            } else {
                ep.query_labels.push_back(static_cast<int>(label));
                ep.query_refs.push_back({cid, e});
            }
        }
    }
    ep.aggregation_seed = rng.next_u64();
    return ep;
}

}  // namespace l2aed
