#include "fedtp/model.hpp"

#include <cmath>
#include <stdexcept>

#include "fedtp/rng.hpp"

namespace fedtp {

int ModelConfig::tokens() const {
    if (task == Task::image_classification)
        return num_patches() + (pool == Pool::cls_token ? 1 : 0);
    return seq_len;
}

void ModelConfig::validate() const {
    if (num_blocks < 1) throw std::invalid_argument("model config: num_blocks must be >= 1");
    if (num_heads < 1) throw std::invalid_argument("model config: num_heads must be >= 1");
    if (d_model < 1) throw std::invalid_argument("model config: d_model must be >= 1");
    if (mlp_hidden < 1) throw std::invalid_argument("model config: mlp_hidden must be >= 1");
    if (d_model % num_heads != 0)
        throw std::invalid_argument("model config: d_model (" + std::to_string(d_model) +
                                    ") must be divisible by num_heads (" + std::to_string(num_heads) + ")");
    if (task == Task::image_classification) {
        if (patch_size < 1 || image_extent < 1 || channels < 1 || num_classes < 2)
            throw std::invalid_argument("model config: invalid image task dimensions");
        if (image_extent % patch_size != 0)
            throw std::invalid_argument("model config: image_extent (" + std::to_string(image_extent) +
                                        ") must be divisible by patch_size (" + std::to_string(patch_size) + ")");
    } else {
        if (seq_len < 1 || vocab_size < 2)
            throw std::invalid_argument("model config: invalid sequence task dimensions");
    }
}

bool is_attention_param(const std::string& name, bool personalize_out_proj) {
    auto pos = name.find(".attn.w");
    if (pos == std::string::npos) return false;
    std::string tail = name.substr(pos + 6);
    if (tail == "wq" || tail == "wk" || tail == "wv") return true;
    return personalize_out_proj && tail == "wo";
}

std::vector<std::string> model_param_names(const ModelConfig& cfg) {
    std::vector<std::string> names;
    if (cfg.task == Task::image_classification) {
        names.push_back("patch_embed.w");
        names.push_back("patch_embed.b");
        if (cfg.pool == Pool::cls_token) names.push_back("cls_token");
    } else {
        names.push_back("token_embed");
    }
    names.push_back("pos_embed");
    for (int b = 0; b < cfg.num_blocks; ++b) {
        std::string p = "block" + std::to_string(b) + ".";
        names.push_back(p + "ln1.g");
        names.push_back(p + "ln1.b");
        names.push_back(p + "attn.wq");
        names.push_back(p + "attn.wk");
        names.push_back(p + "attn.wv");
        names.push_back(p + "attn.wo");
        names.push_back(p + "attn.bo");
        names.push_back(p + "ln2.g");
        names.push_back(p + "ln2.b");
        names.push_back(p + "mlp.w1");
        names.push_back(p + "mlp.b1");
        names.push_back(p + "mlp.w2");
        names.push_back(p + "mlp.b2");
    }
    names.push_back("final_ln.g");
    names.push_back("final_ln.b");
    names.push_back("head.w");
    names.push_back("head.b");
    return names;
}

namespace {

Shape param_shape(const ModelConfig& cfg, const std::string& name) {
    int d = cfg.d_model;
    if (name == "patch_embed.w") return {cfg.patch_dim(), d};
    if (name == "patch_embed.b") return {d};
    if (name == "cls_token") return {1, d};
    if (name == "token_embed") return {cfg.vocab_size, d};
    if (name == "pos_embed") return {cfg.tokens(), d};
    if (name == "final_ln.g" || name == "final_ln.b") return {d};
    if (name == "head.w") return {d, cfg.output_classes()};
    if (name == "head.b") return {cfg.output_classes()};
    auto dot = name.find('.');
    std::string tail = name.substr(dot + 1);
    if (tail == "ln1.g" || tail == "ln1.b" || tail == "ln2.g" || tail == "ln2.b") return {d};
    if (tail == "attn.wq" || tail == "attn.wk" || tail == "attn.wv" || tail == "attn.wo") return {d, d};
    if (tail == "attn.bo") return {d};
    if (tail == "mlp.w1") return {d, cfg.mlp_hidden};
    if (tail == "mlp.b1") return {cfg.mlp_hidden};
    if (tail == "mlp.w2") return {cfg.mlp_hidden, d};
    if (tail == "mlp.b2") return {d};
    throw std::invalid_argument("unknown parameter name '" + name + "'");
}

void fill_normal(Tensor& t, Rng& rng, double stddev) {
    for (double& v : t.data) v = rng.normal(0.0, stddev);
}

void fill_uniform_fan(Tensor& t, Rng& rng, int fan_in) {
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.uniform(-bound, bound);
}

}  // namespace

ParamSet init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParamSet params;
    int d = cfg.d_model;
    for (const std::string& name : model_param_names(cfg)) {
        Tensor t(param_shape(cfg, name));
        Rng rng(derive_seed(seed, "model", hash_tag(name)));
        std::string leaf = name.substr(name.rfind('.') + 1);
        if (name.find("ln1.") != std::string::npos || name.find("ln2.") != std::string::npos ||
            name.find("final_ln.") != std::string::npos) {
            double fill = leaf == "g" ? 1.0 : 0.0;
            for (double& v : t.data) v = fill;
        } else if (name.find(".attn.w") != std::string::npos) {
            fill_normal(t, rng, 1.0 / std::sqrt(static_cast<double>(d)));
        } else if (name == "pos_embed" || name == "cls_token" || name == "token_embed") {
            fill_normal(t, rng, 0.02);
        } else if (!leaf.empty() && leaf[0] == 'b') {
            // all biases start at zero
        } else if (name == "patch_embed.w") {
            fill_uniform_fan(t, rng, cfg.patch_dim());
        } else if (name == "head.w" || name.find(".mlp.w1") != std::string::npos) {
            fill_uniform_fan(t, rng, d);
        } else if (name.find(".mlp.w2") != std::string::npos) {
            fill_uniform_fan(t, rng, cfg.mlp_hidden);
        } else {
            throw std::logic_error("init_model: unhandled parameter '" + name + "'");
        }
        t.requires_grad = true;
        params[name] = std::move(t);
    }
    return params;
}

ParamPartition split_params(const ModelConfig& cfg, const ParamSet& flat) {
    ParamPartition part;
    for (const std::string& name : model_param_names(cfg)) {
        auto it = flat.find(name);
        if (it == flat.end()) throw std::invalid_argument("split_params: missing parameter '" + name + "'");
        if (is_attention_param(name, cfg.personalize_out_proj))
            part.attention[name] = it->second;
        else
            part.shared[name] = it->second;
    }
    for (const auto& [name, t] : flat) {
        (void)t;
        try {
            param_shape(cfg, name);
        } catch (const std::invalid_argument&) {
            throw std::invalid_argument("split_params: unknown parameter name '" + name + "'");
        }
    }
    return part;
}

ParamSet merge_params(const ModelConfig& cfg, const ParamSet& attention, const ParamSet& shared) {
    ParamSet flat;
    for (const std::string& name : model_param_names(cfg)) {
        bool attn = is_attention_param(name, cfg.personalize_out_proj);
        const ParamSet& src = attn ? attention : shared;
        auto it = src.find(name);
        if (it == src.end())
            throw std::invalid_argument("merge_params: missing " + std::string(attn ? "attention" : "shared") +
                                        " parameter '" + name + "'");
        flat[name] = it->second;
    }
    return flat;
}

Tensor patchify(const Tensor& image, int patch_size) {
    if (image.rank() != 3) throw std::invalid_argument("patchify: image must be C x H x W, got " + shape_str(image.shape));
    int c = image.shape[0], h = image.shape[1], w = image.shape[2];
    if (patch_size < 1 || h % patch_size != 0 || w % patch_size != 0)
        throw std::invalid_argument("patchify: extents " + std::to_string(h) + "x" + std::to_string(w) +
                                    " not divisible by patch size " + std::to_string(patch_size));
    int gh = h / patch_size, gw = w / patch_size;
    int pd = c * patch_size * patch_size;
    Tensor out({gh * gw, pd});
    for (int py = 0; py < gh; ++py) {
        for (int px = 0; px < gw; ++px) {
            double* tok = out.data.data() + static_cast<std::ptrdiff_t>(py * gw + px) * pd;
            int k = 0;
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < patch_size; ++y)
                    for (int x = 0; x < patch_size; ++x)
                        tok[k++] = image.data[(static_cast<std::size_t>(ch) * h + py * patch_size + y) * w +
                                              px * patch_size + x];
        }
    }
    return out;
}

namespace {

// heads are slices of one d_model-wide projection; scores scaled by 1/sqrt(head_dim)
NodeId attention_block(Tape& tape, NodeId h, NodeId wq, NodeId wk, NodeId wv, int heads, int d_model,
                       std::vector<NodeId>* attn_out) {
    NodeId q = tape.matmul(h, wq);
    NodeId k = tape.matmul(h, wk);
    NodeId v = tape.matmul(h, wv);
    int hd = d_model / heads;
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    NodeId merged = -1;
    for (int hh = 0; hh < heads; ++hh) {
        NodeId qh = tape.slice(q, 1, hh * hd, hd);
        NodeId kh = tape.slice(k, 1, hh * hd, hd);
        NodeId vh = tape.slice(v, 1, hh * hd, hd);
        NodeId scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt);
        NodeId attn = tape.row_softmax(scores);
        if (attn_out) attn_out->push_back(attn);
        NodeId oh = tape.matmul(attn, vh);
        merged = (merged < 0) ? oh : tape.concat(merged, oh, 1);
    }
    return merged;
}

}  // namespace

ModelGraph build_model_graph(Tape& tape, const ModelConfig& cfg, int batch, bool with_loss, bool trainable) {
    cfg.validate();
    if (batch < 1) throw std::invalid_argument("build_model_graph: batch must be >= 1");
    ModelGraph g;
    int d = cfg.d_model;
    int m = cfg.tokens();

    auto param = [&](const std::string& name) { return tape.input(name, param_shape(cfg, name), trainable); };

    NodeId x;
    if (cfg.task == Task::image_classification) {
        g.x = tape.input("x", {batch, cfg.num_patches(), cfg.patch_dim()});
        x = tape.add(tape.matmul(g.x, param("patch_embed.w")), param("patch_embed.b"));
        if (cfg.pool == Pool::cls_token) x = tape.concat(param("cls_token"), x, 0);
    } else {
        g.x = tape.input("x", {batch, cfg.seq_len});
        x = tape.embed_lookup(param("token_embed"), g.x);
    }
    x = tape.add(x, param("pos_embed"));

    g.attn_nodes.resize(static_cast<std::size_t>(cfg.num_blocks));
    for (int b = 0; b < cfg.num_blocks; ++b) {
        std::string p = "block" + std::to_string(b) + ".";
        NodeId h = tape.layer_norm(x, param(p + "ln1.g"), param(p + "ln1.b"));
        NodeId attn = attention_block(tape, h, param(p + "attn.wq"), param(p + "attn.wk"), param(p + "attn.wv"),
                                      cfg.num_heads, d, &g.attn_nodes[static_cast<std::size_t>(b)]);
        attn = tape.add(tape.matmul(attn, param(p + "attn.wo")), param(p + "attn.bo"));
        x = tape.add(x, attn);
        NodeId h2 = tape.layer_norm(x, param(p + "ln2.g"), param(p + "ln2.b"));
        NodeId mlp = tape.add(tape.matmul(h2, param(p + "mlp.w1")), param(p + "mlp.b1"));
        mlp = tape.gelu(mlp);
        mlp = tape.add(tape.matmul(mlp, param(p + "mlp.w2")), param(p + "mlp.b2"));
        x = tape.add(x, mlp);
    }
    x = tape.layer_norm(x, param("final_ln.g"), param("final_ln.b"));
    g.token_repr = x;

    NodeId pooled;
    if (cfg.task == Task::image_classification) {
        pooled = (cfg.pool == Pool::cls_token) ? tape.reshape(tape.slice(x, 0, 0, 1), {batch, d})
                                               : tape.mean_rows(x);
    } else {
        pooled = x;  // per-position logits
    }
    g.logits = tape.add(tape.matmul(pooled, param("head.w")), param("head.b"));

    if (with_loss) {
        Shape lbl = cfg.task == Task::image_classification ? Shape{batch} : Shape{batch, cfg.seq_len};
        g.labels = tape.input("y", lbl);
        g.loss = tape.cross_entropy(g.logits, g.labels);
    }
    (void)m;
    return g;
}

AttentionResult attention_forward(const Tensor& h, const Tensor& wq, const Tensor& wk, const Tensor& wv, int heads) {
    if (h.rank() != 2) throw std::invalid_argument("attention_forward: H must be rank 2, got " + shape_str(h.shape));
    int m = h.shape[0], d = h.shape[1];
    if (wq.shape != Shape{d, d} || wk.shape != Shape{d, d} || wv.shape != Shape{d, d})
        throw std::invalid_argument("attention_forward: projections must be " + shape_str({d, d}));
    if (heads < 1 || d % heads != 0)
        throw std::invalid_argument("attention_forward: d_model must be divisible by heads");

    Tape tape;
    NodeId hn = tape.input("h", {m, d});
    NodeId q = tape.input("wq", {d, d});
    NodeId k = tape.input("wk", {d, d});
    NodeId v = tape.input("wv", {d, d});
    std::vector<NodeId> attn_nodes;
    NodeId out = attention_block(tape, hn, q, k, v, heads, d, &attn_nodes);
    Tensor o = forward_eval(tape, {{"h", h}, {"wq", wq}, {"wk", wk}, {"wv", wv}}, out);

    AttentionResult res;
    res.output = std::move(o);
    for (NodeId id : attn_nodes) res.head_weights.push_back(tape.value(id));
    return res;
}

namespace {

std::map<std::string, Tensor> bind_all(const ParamSet& params, const Batch& batch, bool with_labels) {
    std::map<std::string, Tensor> bound;
    for (const auto& [name, t] : params) bound[name] = t;
    bound["x"] = batch.x;
    if (with_labels) bound["y"] = batch.labels;
    return bound;
}

}  // namespace

ModelOutput model_forward(const ParamSet& params, const ModelConfig& cfg, const Batch& batch, bool trace) {
    if (trace && batch.size != 1) throw std::invalid_argument("model_forward: tracing requires batch size 1");
    Tape tape(cfg.precision);
    ModelGraph g = build_model_graph(tape, cfg, batch.size, false, false);
    ModelOutput out;
    out.logits = forward_eval(tape, bind_all(params, batch, false), g.logits);
    out.token_repr = tape.value(g.token_repr);
    if (trace) {
        out.trace.has_cls = cfg.task == Task::image_classification && cfg.pool == Pool::cls_token;
        out.trace.grid = cfg.task == Task::image_classification ? cfg.grid() : 0;
        for (const auto& block : g.attn_nodes) {
            std::vector<Tensor> heads;
            for (NodeId id : block) {
                Tensor a = tape.value(id);  // (1,m,m)
                heads.emplace_back(Shape{a.shape[1], a.shape[2]}, a.data);
            }
            out.trace.block_head_attn.push_back(std::move(heads));
        }
    }
    return out;
}

double model_loss(const ParamSet& params, const ModelConfig& cfg, const Batch& batch) {
    Tape tape(cfg.precision);
    ModelGraph g = build_model_graph(tape, cfg, batch.size, true, false);
    return forward_eval(tape, bind_all(params, batch, true), g.loss).data[0];
}

}  // namespace fedtp
