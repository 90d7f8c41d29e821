#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "fedtp/autodiff.hpp"
#include "fedtp/tensor.hpp"

namespace fedtp {

// Server-side hypernetwork h(phi; z): a shared MLP trunk plus one linear
// parameter-mapping head per Transformer block. Each head emits that block's
// attention projections, laid out q then k then v.
struct HyperNetConfig {
    int embed_dim = 32;    // client embedding z dimension
    int trunk_width = 150; // fully-connected trunk width
    int trunk_layers = 4;
    int num_blocks = 2;    // heads, one per Transformer block
    int d_model = 32;

    int head_out() const { return 3 * d_model * d_model; }
    void validate() const;
};

ParamSet init_hypernet(const HyperNetConfig& config, std::uint64_t seed);

std::vector<Tensor> init_embeddings(int num_clients, int dim, std::uint64_t seed);

// Generated attention set, keyed with the model's parameter names
// (block{b}.attn.{wq,wk,wv}), so it merges directly into a ParamPartition.
ParamSet hypernet_forward(const ParamSet& phi, const Tensor& z, const HyperNetConfig& config);

// Vector-Jacobian products: backward through hypernet_forward with delta_w as
// the output cotangent, giving (d<h,dW>/dphi, d<h,dW>/dz).
std::pair<GradMap, Tensor> hypernet_grads(const ParamSet& phi, const Tensor& z, const ParamSet& delta_w,
                                          const HyperNetConfig& config);

// phi' = phi - beta * grad_phi ; z' = z - beta * grad_z
void apply_server_update(ParamSet& phi, Tensor& z, const GradMap& grad_phi, const Tensor& grad_z, double beta);

}  // namespace fedtp
