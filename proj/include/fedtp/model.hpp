#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedtp/autodiff.hpp"
#include "fedtp/tensor.hpp"

namespace fedtp {

enum class Task : std::uint8_t { image_classification, next_token };
enum class Pool : std::uint8_t { cls_token, mean };

struct ModelConfig {
    Task task = Task::image_classification;
    int num_blocks = 2;
    int num_heads = 4;
    int d_model = 32;
    int mlp_hidden = 64;

    // image task
    int patch_size = 4;
    int image_extent = 16;
    int channels = 1;
    int num_classes = 8;
    Pool pool = Pool::cls_token;

    // next-token task
    int seq_len = 32;
    int vocab_size = 16;

    bool personalize_out_proj = false;
    Precision precision = Precision::f64;

    int head_dim() const { return d_model / num_heads; }
    int grid() const { return image_extent / patch_size; }
    int patch_dim() const { return channels * patch_size * patch_size; }
    int num_patches() const { return grid() * grid(); }
    // rows of the token matrix entering the blocks (class token included)
    int tokens() const;
    int output_classes() const { return task == Task::image_classification ? num_classes : vocab_size; }

    void validate() const;
};

// A model's parameters split into the personalized attention projections W
// and the shared remainder xi.
struct ParamPartition {
    ParamSet attention;  // per block: wq, wk, wv (and wo when personalize_out_proj)
    ParamSet shared;     // everything else, all biases included
};

bool is_attention_param(const std::string& name, bool personalize_out_proj);

ParamSet init_model(const ModelConfig& config, std::uint64_t seed);
ParamPartition split_params(const ModelConfig& config, const ParamSet& flat);
ParamSet merge_params(const ModelConfig& config, const ParamSet& attention, const ParamSet& shared);

// Images are cut into non-overlapping patches in row-major patch order; each
// token is the flattened patch (channel-major within the patch).
Tensor patchify(const Tensor& image, int patch_size);

// Per block, per head row-stochastic attention weights for one traced sample.
struct AttentionTrace {
    std::vector<std::vector<Tensor>> block_head_attn;
    bool has_cls = false;
    int grid = 0;
    bool empty() const { return block_head_attn.empty(); }
};

struct AttentionResult {
    Tensor output;                     // m x d_model
    std::vector<Tensor> head_weights;  // per head, m x m
};

// Single self-attention application outside a full model, mirroring the block
// computation exactly (same tape primitives).
AttentionResult attention_forward(const Tensor& h, const Tensor& wq, const Tensor& wk, const Tensor& wv, int heads);

// Structure of the model graph on a tape, built for a fixed batch size.
struct ModelGraph {
    NodeId x = -1;       // image task: patchified tokens (B,m,pd); next-token: ids (B,m)
    NodeId labels = -1;  // -1 when built without loss
    NodeId logits = -1;
    NodeId loss = -1;
    NodeId token_repr = -1;                        // final-norm token matrix, pre pooling
    std::vector<std::vector<NodeId>> attn_nodes;   // [block][head] softmax nodes
};

ModelGraph build_model_graph(Tape& tape, const ModelConfig& config, int batch, bool with_loss,
                             bool trainable = true);

struct Batch {
    Tensor x;       // (B,m,pd) pre-patchified tokens, or (B,m) token ids
    Tensor labels;  // (B) classes, or (B,m) next-token targets
    int size = 0;
};

struct ModelOutput {
    Tensor logits;
    AttentionTrace trace;
    Tensor token_repr;
};

// Stateless evaluation of a batch; tracing requires batch size 1.
ModelOutput model_forward(const ParamSet& params, const ModelConfig& config, const Batch& batch,
                          bool trace = false);

double model_loss(const ParamSet& params, const ModelConfig& config, const Batch& batch);

std::vector<std::string> model_param_names(const ModelConfig& config);

}  // namespace fedtp
