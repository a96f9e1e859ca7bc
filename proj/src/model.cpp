#include "l2aed/model.hpp"

#include <algorithm>
#include <cmath>

#include "l2aed/errors.hpp"

namespace l2aed {

const char* aggregation_name(Aggregation a) noexcept {
    return a == Aggregation::Learned ? "l2ae" : "mean-baseline";
}

Aggregation parse_aggregation(const std::string& s) {
    if (s == "l2ae") return Aggregation::Learned;
    if (s == "mean-baseline" || s == "mean") return Aggregation::Mean;
    throw ParameterError("unknown aggregation mode '" + s + "' (expected l2ae or mean-baseline)");
}

// ---------------------------------------------------------------------------
// ModelConfig

std::size_t ModelConfig::map_side() const {
    std::size_t s = image_size;
    for (std::size_t b = 0; b < kEmbedBlocks; ++b) {
        if (b + 1 == kEmbedBlocks && !last_pool) break;
        if (s < 2) {
            throw ShapeError("image size " + std::to_string(image_size) + " is too small for " +
                             std::to_string(kEmbedBlocks) + " pooling stages");
        }
        s /= 2;
    }
    return s;
}

void ModelConfig::validate() const {
    if (in_channels == 0 || embed_filters == 0 || attention_filters == 0 || m_max == 0) {
        throw ParameterError("model channel counts and m_max must be positive");
    }
    (void)map_side();
}

// ---------------------------------------------------------------------------
// ModelParams

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.data()) v = sd * rng.normal();
    return t;
}

ConvBlock make_block(std::size_t cin, std::size_t cout, Rng& rng) {
    ConvBlock b;
    b.kernel = he_normal(Shape{cout, cin, 3, 3}, cin * 9, rng);
    b.bias = Tensor::zeros(Shape{cout});
    b.gamma = Tensor::ones(Shape{cout});
    b.beta = Tensor::zeros(Shape{cout});
    return b;
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, Rng& rng) {
    config.validate();
    ModelParams p;
    p.config = config;
    std::size_t cin = config.in_channels;
    for (auto& b : p.embed) {
        b = make_block(cin, config.embed_filters, rng);
        cin = config.embed_filters;
    }
    cin = config.m_max;
    for (auto& b : p.attention) {
        b = make_block(cin, config.attention_filters, rng);
        cin = config.attention_filters;
    }
    const std::size_t l = config.map_side();
    const std::size_t fan_in = config.attention_filters * l * l;
    p.fc_weight = he_normal(Shape{config.m_max, fan_in}, fan_in, rng);
    p.fc_bias = Tensor::zeros(Shape{config.m_max});
    return p;
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named() {
    std::vector<std::pair<std::string, Tensor*>> out;
    auto add_block = [&](const std::string& prefix, ConvBlock& b) {
        out.emplace_back(prefix + ".kernel", &b.kernel);
        out.emplace_back(prefix + ".bias", &b.bias);
        out.emplace_back(prefix + ".gamma", &b.gamma);
        out.emplace_back(prefix + ".beta", &b.beta);
    };
    for (std::size_t i = 0; i < embed.size(); ++i) add_block("embed." + std::to_string(i), embed[i]);
    for (std::size_t i = 0; i < attention.size(); ++i) add_block("attention." + std::to_string(i), attention[i]);
    out.emplace_back("attention.fc.weight", &fc_weight);
    out.emplace_back("attention.fc.bias", &fc_bias);
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named() const {
    auto mut = const_cast<ModelParams*>(this)->named();
    return {mut.begin(), mut.end()};
}

std::vector<Tensor*> ModelParams::tensors() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
}

std::vector<const Tensor*> ModelParams::tensors() const {
    std::vector<const Tensor*> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
}

std::size_t ModelParams::embed_param_count() const {
    std::size_t n = 0;
    for (const auto& b : embed) n += b.kernel.numel() + b.bias.numel() + b.gamma.numel() + b.beta.numel();
    return n;
}

std::size_t ModelParams::attention_param_count() const {
    std::size_t n = fc_weight.numel() + fc_bias.numel();
    for (const auto& b : attention) n += b.kernel.numel() + b.bias.numel() + b.gamma.numel() + b.beta.numel();
    return n;
}

void ModelParams::zero_attention_fc() {
    fc_weight.fill(0.0);
    fc_bias.fill(0.0);
}

// ---------------------------------------------------------------------------
// Masks

TaskDropoutMask sample_task_mask(Rng& rng, double keep, std::size_t channels) {
    if (!(keep > 0.0) || keep > 1.0) throw ParameterError("sample_task_mask: keep must lie in (0, 1]");
    TaskDropoutMask m;
    m.keep = keep;
    for (auto& ch : m.channels) {
        ch = Tensor(Shape{channels});
        for (double& v : ch.data()) v = keep >= 1.0 ? 1.0 : (rng.bernoulli(keep) ? 1.0 : 0.0);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Graph binding

std::vector<Var> ParamVars::all() const {
    std::vector<Var> out;
    auto add_block = [&](const Block& b) {
        out.push_back(b.kernel);
        out.push_back(b.bias);
        out.push_back(b.gamma);
        out.push_back(b.beta);
    };
    for (const auto& b : embed) add_block(b);
    for (const auto& b : attention) add_block(b);
    out.push_back(fc_weight);
    out.push_back(fc_bias);
    return out;
}

ParamVars bind_params(Graph& g, const ModelParams& params, bool requires_grad) {
    ParamVars pv;
    pv.config = &params.config;
    auto bind_block = [&](const ConvBlock& b) {
        return ParamVars::Block{g.leaf(b.kernel, requires_grad), g.leaf(b.bias, requires_grad),
                                g.leaf(b.gamma, requires_grad), g.leaf(b.beta, requires_grad)};
    };
    for (std::size_t i = 0; i < kEmbedBlocks; ++i) pv.embed[i] = bind_block(params.embed[i]);
    for (std::size_t i = 0; i < kAttentionBlocks; ++i) pv.attention[i] = bind_block(params.attention[i]);
    pv.fc_weight = g.leaf(params.fc_weight, requires_grad);
    pv.fc_bias = g.leaf(params.fc_bias, requires_grad);
    return pv;
}

std::vector<Tensor> param_grads(const Graph& g, const ParamVars& pv) {
    std::vector<Tensor> out;
    for (const Var& v : pv.all()) out.push_back(g.grad(v));
    return out;
}

// ---------------------------------------------------------------------------
// Forward pieces

Var embed(const ParamVars& pv, const Var& images, const TaskDropoutMask* mask, const ModelHooks* hooks) {
    if (images.shape().size() != 4) throw ShapeError("embed: expected [N,ch,H,W] images");
    const ModelConfig& cfg = *pv.config;
    if (images.shape()[1] != cfg.in_channels) {
        throw ShapeError("embed: images have " + std::to_string(images.shape()[1]) + " channels, model expects " +
                         std::to_string(cfg.in_channels));
    }
    if (hooks && hooks->on_embed) hooks->on_embed(mask, images.shape()[0]);
    Var h = images;
    for (std::size_t b = 0; b < kEmbedBlocks; ++b) {
        const auto& blk = pv.embed[b];
        h = conv2d(h, blk.kernel, blk.bias);
        h = batchnorm_batch(h, blk.gamma, blk.beta);
        h = relu(h);
        if (mask) {
            for (std::size_t k = 0; k < kDropoutBlocks.size(); ++k) {
                if (kDropoutBlocks[k] == b) h = dropout_apply(h, mask->channels[k], mask->keep);
            }
        }
        if (b + 1 < kEmbedBlocks || cfg.last_pool) h = maxpool2(h);
    }
    return h;
}

Var attention_weights(const ParamVars& pv, const Var& stacks, bool normalize) {
    const ModelConfig& cfg = *pv.config;
    if (stacks.shape().size() != 4) throw ShapeError("attention_weights: expected [channels,m,l,l] stacks");
    const std::size_t n = stacks.shape()[0], m = stacks.shape()[1];
    if (m > cfg.m_max) {
        throw CapacityError("attention_weights: stack of " + std::to_string(m) + " maps exceeds m_max=" +
                            std::to_string(cfg.m_max));
    }
    Var h = m < cfg.m_max ? pad_channels(stacks, cfg.m_max) : stacks;
    for (const auto& blk : pv.attention) {
        h = conv2d(h, blk.kernel, blk.bias);
        h = batchnorm_batch(h, blk.gamma, blk.beta);
        h = relu(h);
    }
    const Shape& hs = h.shape();
    h = reshape(h, Shape{n, hs[1] * hs[2] * hs[3]});
    Var logits = linear(h, pv.fc_weight, pv.fc_bias);
    if (m < cfg.m_max) logits = take_cols(logits, m);
    return normalize ? softmax(logits) : logits;
}

namespace {

Var uniform_weights(Graph& g, std::size_t channels, std::size_t m) {
    return g.constant(Tensor(Shape{channels, m}, 1.0 / static_cast<double>(m)));
}

}  // namespace

Var aggregate_kshot(const ParamVars& pv, const Var& support, std::span<const int> class_rows, Aggregation mode) {
    if (class_rows.empty()) throw ParameterError("aggregate_kshot: class has no support examples");
    const Var stacks = gather_channel_stacks(support, class_rows);
    const Var w = mode == Aggregation::Learned ? attention_weights(pv, stacks, true)
                                               : uniform_weights(*support.graph(), stacks.shape()[0], class_rows.size());
    return weighted_channel_sum(stacks, w);
}

std::vector<int> oneshot_order(std::size_t ways, std::size_t target, Rng& rng) {
    if (target >= ways) throw ParameterError("oneshot_order: target out of range");
    std::vector<int> others;
    for (std::size_t c = 0; c < ways; ++c) {
        if (c != target) others.push_back(static_cast<int>(c));
    }
    rng.shuffle(others);
    std::vector<int> order{static_cast<int>(target)};
    order.insert(order.end(), others.begin(), others.end());
    return order;
}

Var aggregate_oneshot(const ParamVars& pv, const Var& support, std::span<const int> order, Aggregation mode,
                      bool normalize) {
    if (order.empty()) throw ParameterError("aggregate_oneshot: empty stack order");
    std::vector<int> seen(order.begin(), order.end());
    std::sort(seen.begin(), seen.end());
    if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) {
        throw ParameterError("aggregate_oneshot: duplicate class in stack order");
    }
    if (mode == Aggregation::Mean) {
        const int target[] = {order[0]};
        const Var stacks = gather_channel_stacks(support, target);
        return weighted_channel_sum(stacks, uniform_weights(*support.graph(), stacks.shape()[0], 1));
    }
    const Var stacks = gather_channel_stacks(support, order);
    return weighted_channel_sum(stacks, attention_weights(pv, stacks, normalize));
}

Var euclidean_distance(const Var& a, const Var& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("euclidean_distance: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t d = a.value().numel();
    return reshape(pairwise_distance(reshape(a, Shape{1, d}), reshape(b, Shape{1, d})), Shape{1});
}

Var class_logits(const Var& queries, const Var& reps) {
    const std::size_t q = queries.shape()[0], c = reps.shape()[0];
    const std::size_t d = queries.value().numel() / q;
    if (reps.value().numel() / c != d) throw ShapeError("class_logits: query and representative sizes differ");
    return scale(pairwise_distance(reshape(queries, Shape{q, d}), reshape(reps, Shape{c, d})), -1.0);
}

Var classify(const Var& queries, const Var& reps) { return softmax(class_logits(queries, reps)); }

// ---------------------------------------------------------------------------
// Episode

EpisodeForward episode_forward(Graph& g, const ParamVars& pv, const Episode& ep, const TaskDropoutMask* mask,
                               const EpisodeOptions& opts, const ModelHooks* hooks) {
    const std::size_t ways = ep.spec.ways, shots = ep.spec.shots;
    EpisodeForward f;
    f.support_embeddings = embed(pv, g.constant(ep.support), mask, hooks);
    f.query_embeddings = embed(pv, g.constant(ep.queries), mask, hooks);

    std::vector<Var> reps;
    reps.reserve(ways);
    if (shots == 1) {
        for (std::size_t c = 0; c < ways; ++c) {
            Rng rng(derive_seed(ep.aggregation_seed, 0x31534854 /* "1SHT" */, c));
            const auto order = oneshot_order(ways, c, rng);
            reps.push_back(aggregate_oneshot(pv, f.support_embeddings, order, opts.aggregation, opts.oneshot_softmax));
        }
    } else {
        for (std::size_t c = 0; c < ways; ++c) {
            std::vector<int> rows(shots);
            for (std::size_t k = 0; k < shots; ++k) rows[k] = static_cast<int>(c * shots + k);
            reps.push_back(aggregate_kshot(pv, f.support_embeddings, rows, opts.aggregation));
        }
    }
    f.representatives = stack(reps);
    f.log_probs = log_softmax(class_logits(f.query_embeddings, f.representatives));
    f.loss = nll_mean(f.log_probs, ep.query_labels);
    return f;
}

LossAndGrads episode_loss(const ModelParams& params, const Episode& ep, const TaskDropoutMask* mask,
                          const EpisodeOptions& opts, const ModelHooks* hooks) {
    Graph g;
    const ParamVars pv = bind_params(g, params, true);
    const EpisodeForward f = episode_forward(g, pv, ep, mask, opts, hooks);
    g.backward(f.loss);
    return {f.loss.value()[0], param_grads(g, pv)};
}

double episode_loss_value(const ModelParams& params, const Episode& ep, const TaskDropoutMask* mask,
                          const EpisodeOptions& opts) {
    Graph g;
    const ParamVars pv = bind_params(g, params, false);
    return episode_forward(g, pv, ep, mask, opts).loss.value()[0];
}

std::vector<int> predict(const ModelParams& params, const Episode& ep, const EpisodeOptions& opts,
                         const ModelHooks* hooks) {
    Graph g;
    const ParamVars pv = bind_params(g, params, false);
    const EpisodeForward f = episode_forward(g, pv, ep, nullptr, opts, hooks);
    const Tensor& lp = f.log_probs.value();
    const std::size_t q = lp.dim(0), c = lp.dim(1);
    std::vector<int> out(q);
    for (std::size_t i = 0; i < q; ++i) {
        const double* row = lp.ptr() + i * c;
        out[i] = static_cast<int>(std::max_element(row, row + c) - row);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const AdamState* adam,
                     std::uint64_t episodes) {
    Container c;
    const ModelConfig& cfg = params.config;
    c.meta["kind"] = "checkpoint";
    c.meta["in_channels"] = std::to_string(cfg.in_channels);
    c.meta["image_size"] = std::to_string(cfg.image_size);
    c.meta["last_pool"] = cfg.last_pool ? "true" : "false";
    c.meta["embed_filters"] = std::to_string(cfg.embed_filters);
    c.meta["attention_filters"] = std::to_string(cfg.attention_filters);
    c.meta["m_max"] = std::to_string(cfg.m_max);
    c.meta["map_side"] = std::to_string(cfg.map_side());
    c.meta["episodes"] = std::to_string(episodes);
    const auto named = params.named();
    for (const auto& [name, t] : named) c.arrays.emplace_back(name, *t);
    if (adam) {
        c.meta["adam.t"] = std::to_string(adam->t);
        for (std::size_t i = 0; i < named.size(); ++i) {
            c.arrays.emplace_back("adam.m." + named[i].first, adam->m.at(i));
            c.arrays.emplace_back("adam.v." + named[i].first, adam->v.at(i));
        }
    }
    write_container(path, c);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const Container c = read_container(path);
    if (c.get("kind") != "checkpoint") throw DataError(path.string() + " is not a model checkpoint");
    ModelConfig cfg;
    cfg.in_channels = std::stoul(c.get("in_channels"));
    cfg.image_size = std::stoul(c.get("image_size"));
    cfg.last_pool = c.get("last_pool") == "true";
    cfg.embed_filters = std::stoul(c.get("embed_filters"));
    cfg.attention_filters = std::stoul(c.get("attention_filters"));
    cfg.m_max = std::stoul(c.get("m_max"));
    cfg.validate();

    Rng unused(0);
    Checkpoint ck;
    ck.params = ModelParams::init(cfg, unused);
    ck.episodes = std::stoull(c.get("episodes"));
    for (auto& [name, t] : ck.params.named()) {
        const Tensor& stored = c.array(name);
        if (stored.shape() != t->shape()) {
            throw DataError("checkpoint array '" + name + "' has shape " + shape_str(stored.shape()) + ", expected " +
                            shape_str(t->shape()));
        }
        *t = stored;
    }
    if (c.meta.count("adam.t")) {
        AdamState s = AdamState::for_params(ck.params.tensors());
        s.t = std::stoull(c.get("adam.t"));
        const auto named = ck.params.named();
        for (std::size_t i = 0; i < named.size(); ++i) {
            s.m[i] = c.array("adam.m." + named[i].first);
            s.v[i] = c.array("adam.v." + named[i].first);
        }
        ck.adam = std::move(s);
    }
    return ck;
}

}  // namespace l2aed
