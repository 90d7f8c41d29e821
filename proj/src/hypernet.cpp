#include "fedtp/hypernet.hpp"

#include <cmath>
#include <stdexcept>

#include "fedtp/rng.hpp"

namespace fedtp {

void HyperNetConfig::validate() const {
    if (embed_dim < 1 || trunk_width < 1 || trunk_layers < 1 || num_blocks < 1 || d_model < 1)
        throw std::invalid_argument("hypernet config: all dimensions must be >= 1");
}

namespace {

std::string trunk_w(int i) { return "hyper.trunk" + std::to_string(i) + ".w"; }
std::string trunk_b(int i) { return "hyper.trunk" + std::to_string(i) + ".b"; }
std::string head_w(int b) { return "hyper.head" + std::to_string(b) + ".w"; }
std::string head_b(int b) { return "hyper.head" + std::to_string(b) + ".b"; }
std::string block_param(int b, const char* role) { return "block" + std::to_string(b) + ".attn." + role; }

// Builds z -> trunk -> per-block head outputs; returns one node per block of
// shape (1, 3*d^2).
struct HyperGraph {
    NodeId z;
    std::vector<NodeId> block_out;
};

HyperGraph build_hypernet_graph(Tape& tape, const HyperNetConfig& cfg, bool trainable) {
    HyperGraph g;
    g.z = tape.input("z", {1, cfg.embed_dim}, trainable);
    NodeId h = g.z;
    for (int i = 0; i < cfg.trunk_layers; ++i) {
        int in_dim = i == 0 ? cfg.embed_dim : cfg.trunk_width;
        if (i > 0) h = tape.relu(h);
        h = tape.add(tape.matmul(h, tape.input(trunk_w(i), {in_dim, cfg.trunk_width}, trainable)),
                     tape.input(trunk_b(i), {cfg.trunk_width}, trainable));
    }
    for (int b = 0; b < cfg.num_blocks; ++b) {
        NodeId o = tape.add(tape.matmul(h, tape.input(head_w(b), {cfg.trunk_width, cfg.head_out()}, trainable)),
                            tape.input(head_b(b), {cfg.head_out()}, trainable));
        g.block_out.push_back(o);
    }
    return g;
}

std::map<std::string, Tensor> bind_hyper(const ParamSet& phi, const Tensor& z, const HyperNetConfig& cfg) {
    if (z.shape != Shape{cfg.embed_dim})
        throw std::invalid_argument("hypernet: embedding shape " + shape_str(z.shape) + " does not match dim " +
                                    std::to_string(cfg.embed_dim));
    std::map<std::string, Tensor> bound;
    for (const auto& [name, t] : phi) bound[name] = t;
    Tensor zr = z;
    zr.shape = {1, cfg.embed_dim};
    bound["z"] = std::move(zr);
    return bound;
}

}  // namespace

ParamSet init_hypernet(const HyperNetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParamSet phi;
    for (int i = 0; i < cfg.trunk_layers; ++i) {
        int in_dim = i == 0 ? cfg.embed_dim : cfg.trunk_width;
        Tensor w({in_dim, cfg.trunk_width});
        Rng rng(derive_seed(seed, "hyper", hash_tag(trunk_w(i))));
        double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
        for (double& v : w.data) v = rng.uniform(-bound, bound);
        w.requires_grad = true;
        phi[trunk_w(i)] = std::move(w);
        Tensor b({cfg.trunk_width});
        b.requires_grad = true;
        phi[trunk_b(i)] = std::move(b);
    }
    // generated projections should start at the same magnitude as directly
    // initialized ones, hence the 1/sqrt(D * d_model) head scale
    double head_scale = 1.0 / std::sqrt(static_cast<double>(cfg.trunk_width) * cfg.d_model);
    for (int b = 0; b < cfg.num_blocks; ++b) {
        Tensor w({cfg.trunk_width, cfg.head_out()});
        Rng rng(derive_seed(seed, "hyper", hash_tag(head_w(b))));
        for (double& v : w.data) v = rng.normal(0.0, head_scale);
        w.requires_grad = true;
        phi[head_w(b)] = std::move(w);
        Tensor bias({cfg.head_out()});
        bias.requires_grad = true;
        phi[head_b(b)] = std::move(bias);
    }
    return phi;
}

std::vector<Tensor> init_embeddings(int num_clients, int dim, std::uint64_t seed) {
    if (num_clients < 1 || dim < 1) throw std::invalid_argument("init_embeddings: num_clients and dim must be >= 1");
    std::vector<Tensor> out;
    out.reserve(static_cast<std::size_t>(num_clients));
    for (int i = 0; i < num_clients; ++i) {
        Tensor z({dim});
        Rng rng(derive_seed(seed, "embed", static_cast<std::uint64_t>(i)));
        for (double& v : z.data) v = rng.normal(0.0, 0.1);
        z.requires_grad = true;
        out.push_back(std::move(z));
    }
    return out;
}

ParamSet hypernet_forward(const ParamSet& phi, const Tensor& z, const HyperNetConfig& cfg) {
    cfg.validate();
    Tape tape;
    HyperGraph g = build_hypernet_graph(tape, cfg, false);
    forward_eval(tape, bind_hyper(phi, z, cfg), g.block_out.back());

    int d = cfg.d_model;
    int dd = d * d;
    ParamSet w;
    for (int b = 0; b < cfg.num_blocks; ++b) {
        const Tensor& o = tape.value(g.block_out[static_cast<std::size_t>(b)]);
        const char* roles[3] = {"wq", "wk", "wv"};
        for (int r = 0; r < 3; ++r) {
            Tensor t({d, d});
            std::copy_n(o.data.data() + static_cast<std::ptrdiff_t>(r) * dd, dd, t.data.data());
            t.requires_grad = true;
            w[block_param(b, roles[r])] = std::move(t);
        }
    }
    return w;
}

std::pair<GradMap, Tensor> hypernet_grads(const ParamSet& phi, const Tensor& z, const ParamSet& delta_w,
                                          const HyperNetConfig& cfg) {
    cfg.validate();
    int d = cfg.d_model;
    int dd = d * d;

    Tape tape;
    HyperGraph g = build_hypernet_graph(tape, cfg, true);

    // scalar surrogate <h(phi;z), delta_w>; its gradient is the requested VJP
    std::map<std::string, Tensor> bound = bind_hyper(phi, z, cfg);
    NodeId total = -1;
    for (int b = 0; b < cfg.num_blocks; ++b) {
        Tensor cot({1, cfg.head_out()});
        const char* roles[3] = {"wq", "wk", "wv"};
        for (int r = 0; r < 3; ++r) {
            auto it = delta_w.find(block_param(b, roles[r]));
            if (it == delta_w.end())
                throw std::invalid_argument("hypernet_grads: missing cotangent '" + block_param(b, roles[r]) + "'");
            if (it->second.shape != Shape{d, d})
                throw std::invalid_argument("hypernet_grads: cotangent '" + block_param(b, roles[r]) +
                                            "' has shape " + shape_str(it->second.shape) + ", want " +
                                            shape_str({d, d}));
            std::copy_n(it->second.data.data(), dd, cot.data.data() + static_cast<std::ptrdiff_t>(r) * dd);
        }
        std::string cot_name = "cot" + std::to_string(b);
        NodeId cn = tape.input(cot_name, {1, cfg.head_out()});
        bound[cot_name] = std::move(cot);
        NodeId ip = tape.sum_all(tape.mul(g.block_out[static_cast<std::size_t>(b)], cn));
        total = total < 0 ? ip : tape.add(total, ip);
    }

    forward_eval(tape, bound, total);
    GradMap grads = backward(tape, total);

    auto zit = grads.find("z");
    Tensor grad_z({cfg.embed_dim});
    if (zit != grads.end()) {
        grad_z.data = zit->second.data;
        grads.erase(zit);
    }
    for (const auto& [name, t] : phi) {
        (void)t;
        if (grads.find(name) == grads.end()) {
            Tensor zero(phi.at(name).shape);
            grads[name] = std::move(zero);
        }
    }
    return {std::move(grads), std::move(grad_z)};
}

void apply_server_update(ParamSet& phi, Tensor& z, const GradMap& grad_phi, const Tensor& grad_z, double beta) {
    for (const auto& [name, g] : grad_phi) {
        auto it = phi.find(name);
        if (it == phi.end()) throw std::invalid_argument("apply_server_update: unknown parameter '" + name + "'");
        for (double v : g.data) {
            if (!std::isfinite(v))
                throw std::runtime_error("apply_server_update: non-finite gradient for '" + name + "'");
        }
        for (std::size_t i = 0; i < it->second.data.size(); ++i) it->second.data[i] -= beta * g.data[i];
    }
    if (!grad_z.data.empty()) {
        if (grad_z.shape != z.shape)
            throw std::invalid_argument("apply_server_update: embedding gradient shape mismatch");
        for (double v : grad_z.data) {
            if (!std::isfinite(v)) throw std::runtime_error("apply_server_update: non-finite embedding gradient");
        }
        for (std::size_t i = 0; i < z.data.size(); ++i) z.data[i] -= beta * grad_z.data[i];
    }
}

}  // namespace fedtp
