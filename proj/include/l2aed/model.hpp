#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "l2aed/adam.hpp"
#include "l2aed/autodiff.hpp"
#include "l2aed/container.hpp"
#include "l2aed/episode.hpp"
#include "l2aed/rng.hpp"
#include "l2aed/tensor.hpp"

namespace l2aed {

enum class Aggregation : std::uint8_t {
    /// Attention-weighted channel-wise aggregation.
    Learned,
    /// Per-channel arithmetic mean (prototype baseline).
    Mean,
};

const char* aggregation_name(Aggregation a) noexcept;
Aggregation parse_aggregation(const std::string& s);

/// Architecture of the embedding and attention networks.
struct ModelConfig {
    std::size_t in_channels = 1;
    std::size_t image_size = 28;
    /// Keep the max-pool of the fourth embedding block (false for 28x28).
    bool last_pool = false;
    std::size_t embed_filters = 64;
    std::size_t attention_filters = 32;
    /// Width of the attention FC output; stacks may hold up to m_max maps.
    std::size_t m_max = 5;

    /// Side l of each embedding feature map.
    std::size_t map_side() const;
    /// Throws ShapeError/ParameterError for unusable settings.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Number of convolutional blocks in the embedder and in the attention net.
inline constexpr std::size_t kEmbedBlocks = 4;
inline constexpr std::size_t kAttentionBlocks = 2;
/// Embedder blocks (0-based) whose activations are dropped per task.
inline constexpr std::array<std::size_t, 2> kDropoutBlocks = {1, 2};

struct ConvBlock {
    Tensor kernel;  // [Cout, Cin, 3, 3]
    Tensor bias;    // [Cout]
    Tensor gamma;   // [Cout]
    Tensor beta;    // [Cout]
};

/// Trainable parameters. There is exactly one attention parameter set; it
/// is applied to every channel of every class.
struct ModelParams {
    ModelConfig config;
    std::array<ConvBlock, kEmbedBlocks> embed;
    std::array<ConvBlock, kAttentionBlocks> attention;
    Tensor fc_weight;  // [m_max, attention_filters * l * l]
    Tensor fc_bias;    // [m_max]

    /// He-normal conv/FC weights, zero biases, gamma 1, beta 0.
    static ModelParams init(const ModelConfig& config, Rng& rng);

    /// Parameters in a fixed order with stable names ("embed.0.kernel", ...).
    std::vector<std::pair<std::string, Tensor*>> named();
    std::vector<std::pair<std::string, const Tensor*>> named() const;
    std::vector<Tensor*> tensors();
    std::vector<const Tensor*> tensors() const;

    std::size_t embed_param_count() const;
    std::size_t attention_param_count() const;

    /// Zero the attention FC so K-shot weights become uniform.
    void zero_attention_fc();
};

/// Per-task channel masks for the dropout blocks; one draw per episode.
struct TaskDropoutMask {
    double keep = 1.0;
    std::array<Tensor, kDropoutBlocks.size()> channels;  // {0,1} per output channel
};

/// Each channel of each dropout block is kept independently with prob `keep`.
TaskDropoutMask sample_task_mask(Rng& rng, double keep, std::size_t channels);

/// Optional instrumentation: called once per embed() with the mask used
/// (nullptr when none) and the batch size.
struct ModelHooks {
    std::function<void(const TaskDropoutMask*, std::size_t)> on_embed;
};

/// Parameters bound into a Graph.
struct ParamVars {
    struct Block {
        Var kernel, bias, gamma, beta;
    };
    std::array<Block, kEmbedBlocks> embed;
    std::array<Block, kAttentionBlocks> attention;
    Var fc_weight, fc_bias;
    const ModelConfig* config = nullptr;

    std::vector<Var> all() const;
};

ParamVars bind_params(Graph& g, const ModelParams& params, bool requires_grad = true);

/// Gradients of every parameter, in ModelParams::named() order.
std::vector<Tensor> param_grads(const Graph& g, const ParamVars& pv);

/// Embedding network. `images` [N, ch, H, W] is one batch-norm batch.
/// Returns [N, embed_filters, l, l].
Var embed(const ParamVars& pv, const Var& images, const TaskDropoutMask* mask = nullptr,
          const ModelHooks* hooks = nullptr);

/// Attention weights for channel stacks.
/// `stacks` is [n_channels, m, l, l] (m <= m_max); the result is [n_channels, m].
/// Softmax is applied when `normalize` is set.
Var attention_weights(const ParamVars& pv, const Var& stacks, bool normalize);

/// Representative of one class from its K support rows of `support` [N,64,l,l].
/// Returns [64, l, l].
Var aggregate_kshot(const ParamVars& pv, const Var& support, std::span<const int> class_rows,
                    Aggregation mode = Aggregation::Learned);

/// Stack order for 1-shot aggregation: `target` first, the others shuffled.
std::vector<int> oneshot_order(std::size_t ways, std::size_t target, Rng& rng);

/// 1-shot representative: stacks follow `order` (order[0] is the target
/// row), weights are raw FC outputs unless `normalize`.
Var aggregate_oneshot(const ParamVars& pv, const Var& support, std::span<const int> order,
                      Aggregation mode = Aggregation::Learned, bool normalize = false);

/// Euclidean distance between two equally shaped values (scalar Var).
Var euclidean_distance(const Var& a, const Var& b);

/// Negative distances of queries [Q,...] to representatives [C,...] -> [Q,C].
Var class_logits(const Var& queries, const Var& reps);

/// Softmax over negative distances -> [Q,C] probabilities.
Var classify(const Var& queries, const Var& reps);

struct EpisodeOptions {
    Aggregation aggregation = Aggregation::Learned;
    /// Softmax on 1-shot weights (off by default).
    bool oneshot_softmax = false;
};

struct EpisodeForward {
    Var support_embeddings;  // [C*K, 64, l, l]
    Var query_embeddings;    // [C*Nq, 64, l, l]
    Var representatives;     // [C, 64, l, l]
    Var log_probs;           // [C*Nq, C]
    Var loss;                // scalar: mean true-class NLL over queries
};

/// Full forward pass of one episode. Support and queries are embedded as two
/// separate batches under the same mask.
EpisodeForward episode_forward(Graph& g, const ParamVars& pv, const Episode& ep, const TaskDropoutMask* mask,
                               const EpisodeOptions& opts = {}, const ModelHooks* hooks = nullptr);

struct LossAndGrads {
    double loss = 0.0;
    std::vector<Tensor> grads;  // ModelParams::named() order
};

/// Episode loss and gradients w.r.t. every parameter.
LossAndGrads episode_loss(const ModelParams& params, const Episode& ep, const TaskDropoutMask* mask,
                          const EpisodeOptions& opts = {}, const ModelHooks* hooks = nullptr);

/// Loss value only.
double episode_loss_value(const ModelParams& params, const Episode& ep, const TaskDropoutMask* mask,
                          const EpisodeOptions& opts = {});

/// Argmax predictions for the episode's queries with the full network.
std::vector<int> predict(const ModelParams& params, const Episode& ep, const EpisodeOptions& opts = {},
                         const ModelHooks* hooks = nullptr);

/// Checkpoint I/O. The optimizer state is optional on both sides.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const AdamState* adam = nullptr,
                     std::uint64_t episodes = 0);
struct Checkpoint {
    ModelParams params;
    std::optional<AdamState> adam;
    std::uint64_t episodes = 0;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace l2aed
