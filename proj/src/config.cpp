#include "fedtp/config.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "fedtp/rng.hpp"

namespace fedtp {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& where, const std::set<std::string>& known) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key()))
            throw std::invalid_argument("config: unknown key '" + (where.empty() ? it.key() : where + "." + it.key()) +
                                        "'");
    }
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

Pool pool_from_string(const std::string& s) {
    if (s == "cls") return Pool::cls_token;
    if (s == "mean") return Pool::mean;
    throw std::invalid_argument("config: pool must be 'cls' or 'mean', got '" + s + "'");
}

}  // namespace

void ExperimentConfig::finalize() {
    if (dataset.kind == "synth_image") {
        model.task = Task::image_classification;
        model.channels = 1;
        model.image_extent = dataset.extent;
        model.num_classes = dataset.num_classes;
    } else if (dataset.kind == "cifar10" || dataset.kind == "cifar100") {
        model.task = Task::image_classification;
        model.channels = 3;
        model.image_extent = 32;
        model.num_classes = dataset.kind == "cifar10" ? 10 : 100;
    } else if (dataset.kind == "synth_char") {
        model.task = Task::next_token;
        model.seq_len = dataset.seq_len;
        model.vocab_size = dataset.vocab;
    } else {
        throw std::invalid_argument("config: unknown dataset.kind '" + dataset.kind + "'");
    }
    model.personalize_out_proj = strategy.personalize_out_proj;
    hyper.num_blocks = model.num_blocks;
    hyper.d_model = model.d_model;
}

void ExperimentConfig::validate() const {
    if (rounds < 1) throw std::invalid_argument("config: rounds must be >= 1");
    if (local_epochs < 1) throw std::invalid_argument("config: local_epochs must be >= 1");
    if (!(local_lr > 0.0)) throw std::invalid_argument("config: local_lr must be > 0");
    if (!(server_lr > 0.0)) throw std::invalid_argument("config: server_lr must be > 0");
    if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
    if (!(sample_rate > 0.0 && sample_rate <= 1.0))
        throw std::invalid_argument("config: sample_rate must be in (0, 1]");
    if (checkpoint_every < 1) throw std::invalid_argument("config: checkpoint_every must be >= 1");
    if (eval_every < 1) throw std::invalid_argument("config: eval_every must be >= 1");
    if (workers < 1) throw std::invalid_argument("config: workers must be >= 1");
    if (partition.clients < 1) throw std::invalid_argument("config: partition.clients must be >= 1");
    if (partition.scheme != "pathological" && partition.scheme != "dirichlet" && partition.scheme != "pachinko")
        throw std::invalid_argument("config: unknown partition.scheme '" + partition.scheme + "'");
    if (partition.sigma_max < 0.0) throw std::invalid_argument("config: partition.sigma_max must be >= 0");
    model.validate();
    strategy.validate();
    hyper.validate();
}

std::string ExperimentConfig::to_json() const {
    json j;
    j["dataset"] = {{"kind", dataset.kind},       {"num_classes", dataset.num_classes},
                    {"per_class", dataset.per_class}, {"extent", dataset.extent},
                    {"vocab", dataset.vocab},     {"seq_len", dataset.seq_len},
                    {"num_styles", dataset.num_styles}, {"per_style", dataset.per_style},
                    {"path", dataset.path}};
    j["partition"] = {{"scheme", partition.scheme},
                      {"clients", partition.clients},
                      {"classes_per_client", partition.classes_per_client},
                      {"alpha", partition.alpha},
                      {"beta_fine", partition.beta_fine},
                      {"sigma_max", partition.sigma_max}};
    j["model"] = {{"num_blocks", model.num_blocks},
                  {"num_heads", model.num_heads},
                  {"d_model", model.d_model},
                  {"mlp_hidden", model.mlp_hidden},
                  {"patch_size", model.patch_size},
                  {"pool", model.pool == Pool::cls_token ? "cls" : "mean"},
                  {"precision", model.precision == Precision::f64 ? "f64" : "f32"}};
    j["strategy"] = {{"name", strategy_name(strategy.name)},
                     {"mu", strategy.mu},
                     {"literal_paper_sign", strategy.literal_paper_sign},
                     {"personalize_out_proj", strategy.personalize_out_proj},
                     {"freeze_embeddings", strategy.freeze_embeddings},
                     {"literal_global_mass", strategy.literal_global_mass}};
    j["hyper"] = {{"embed_dim", hyper.embed_dim},
                  {"trunk_width", hyper.trunk_width},
                  {"trunk_layers", hyper.trunk_layers}};
    j["rounds"] = rounds;
    j["local_epochs"] = local_epochs;
    j["local_lr"] = local_lr;
    j["server_lr"] = server_lr;
    j["batch_size"] = batch_size;
    j["sample_rate"] = sample_rate;
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    j["checkpoint_every"] = checkpoint_every;
    j["eval_every"] = eval_every;
    j["workers"] = workers;
    return j.dump(2);
}

FedRunConfig ExperimentConfig::run_config() const {
    FedRunConfig rc;
    rc.model = model;
    rc.hyper = hyper;
    rc.strategy = strategy;
    rc.local_epochs = local_epochs;
    rc.batch_size = batch_size;
    rc.local_lr = local_lr;
    rc.server_lr = server_lr;
    rc.sample_rate = sample_rate;
    rc.seed = seed;
    rc.workers = workers;
    return rc;
}

ExperimentConfig preset_config(const std::string& name) {
    ExperimentConfig cfg;  // defaults are the desk preset
    if (name == "desk" || name.empty()) {
        // L=2, heads=4, d=32, patch 4 on 16x16 synthetic images; K=5,
        // lr=0.01, beta=0.01, B=64
    } else if (name == "paper") {
        cfg.dataset.kind = "cifar10";
        cfg.dataset.path = "data/cifar10";
        cfg.model.num_blocks = 8;
        cfg.model.num_heads = 8;
        cfg.model.d_model = 128;
        cfg.model.mlp_hidden = 256;
        cfg.model.patch_size = 4;
        cfg.partition.clients = 50;
        cfg.sample_rate = 0.1;
        cfg.rounds = 1500;
        cfg.checkpoint_every = 500;
        cfg.eval_every = 100;
    } else {
        throw std::invalid_argument("config: unknown preset '" + name + "' (expected desk or paper)");
    }
    cfg.finalize();
    return cfg;
}

ExperimentConfig parse_config(const std::string& json_text, const std::string& preset,
                              const ConfigOverrides& o) {
    ExperimentConfig cfg = preset_config(preset);

    if (!json_text.empty()) {
        json j = json::parse(json_text);
        check_keys(j, "", {"dataset", "partition", "model", "strategy", "hyper", "rounds", "local_epochs", "local_lr",
                           "server_lr", "batch_size", "sample_rate", "seed", "out_dir", "checkpoint_every",
                           "eval_every", "workers", "preset"});
        if (j.contains("preset")) cfg = preset_config(j.at("preset").get<std::string>());
        if (j.contains("dataset")) {
            const json& d = j.at("dataset");
            check_keys(d, "dataset", {"kind", "num_classes", "per_class", "extent", "vocab", "seq_len", "num_styles",
                                      "per_style", "path"});
            get_to(d, "kind", cfg.dataset.kind);
            get_to(d, "num_classes", cfg.dataset.num_classes);
            get_to(d, "per_class", cfg.dataset.per_class);
            get_to(d, "extent", cfg.dataset.extent);
            get_to(d, "vocab", cfg.dataset.vocab);
            get_to(d, "seq_len", cfg.dataset.seq_len);
            get_to(d, "num_styles", cfg.dataset.num_styles);
            get_to(d, "per_style", cfg.dataset.per_style);
            get_to(d, "path", cfg.dataset.path);
        }
        if (j.contains("partition")) {
            const json& p = j.at("partition");
            check_keys(p, "partition", {"scheme", "clients", "classes_per_client", "alpha", "beta_fine", "sigma_max"});
            get_to(p, "scheme", cfg.partition.scheme);
            get_to(p, "clients", cfg.partition.clients);
            get_to(p, "classes_per_client", cfg.partition.classes_per_client);
            get_to(p, "alpha", cfg.partition.alpha);
            get_to(p, "beta_fine", cfg.partition.beta_fine);
            get_to(p, "sigma_max", cfg.partition.sigma_max);
        }
        if (j.contains("model")) {
            const json& m = j.at("model");
            check_keys(m, "model",
                       {"num_blocks", "num_heads", "d_model", "mlp_hidden", "patch_size", "pool", "precision"});
            get_to(m, "num_blocks", cfg.model.num_blocks);
            get_to(m, "num_heads", cfg.model.num_heads);
            get_to(m, "d_model", cfg.model.d_model);
            get_to(m, "mlp_hidden", cfg.model.mlp_hidden);
            get_to(m, "patch_size", cfg.model.patch_size);
            if (m.contains("pool")) cfg.model.pool = pool_from_string(m.at("pool").get<std::string>());
            if (m.contains("precision")) {
                std::string p = m.at("precision").get<std::string>();
                if (p != "f64" && p != "f32")
                    throw std::invalid_argument("config: precision must be 'f64' or 'f32'");
                cfg.model.precision = p == "f64" ? Precision::f64 : Precision::f32;
            }
        }
        if (j.contains("strategy")) {
            const json& s = j.at("strategy");
            check_keys(s, "strategy", {"name", "mu", "literal_paper_sign", "personalize_out_proj",
                                       "freeze_embeddings", "literal_global_mass"});
            if (s.contains("name")) cfg.strategy.name = strategy_from_string(s.at("name").get<std::string>());
            get_to(s, "mu", cfg.strategy.mu);
            get_to(s, "literal_paper_sign", cfg.strategy.literal_paper_sign);
            get_to(s, "personalize_out_proj", cfg.strategy.personalize_out_proj);
            get_to(s, "freeze_embeddings", cfg.strategy.freeze_embeddings);
            get_to(s, "literal_global_mass", cfg.strategy.literal_global_mass);
        }
        if (j.contains("hyper")) {
            const json& h = j.at("hyper");
            check_keys(h, "hyper", {"embed_dim", "trunk_width", "trunk_layers"});
            get_to(h, "embed_dim", cfg.hyper.embed_dim);
            get_to(h, "trunk_width", cfg.hyper.trunk_width);
            get_to(h, "trunk_layers", cfg.hyper.trunk_layers);
        }
        get_to(j, "rounds", cfg.rounds);
        get_to(j, "local_epochs", cfg.local_epochs);
        get_to(j, "local_lr", cfg.local_lr);
        get_to(j, "server_lr", cfg.server_lr);
        get_to(j, "batch_size", cfg.batch_size);
        get_to(j, "sample_rate", cfg.sample_rate);
        get_to(j, "seed", cfg.seed);
        get_to(j, "out_dir", cfg.out_dir);
        get_to(j, "checkpoint_every", cfg.checkpoint_every);
        get_to(j, "eval_every", cfg.eval_every);
        get_to(j, "workers", cfg.workers);
    }

    if (o.strategy) cfg.strategy.name = strategy_from_string(*o.strategy);
    if (o.rounds) cfg.rounds = *o.rounds;
    if (o.clients) cfg.partition.clients = *o.clients;
    if (o.workers) cfg.workers = *o.workers;
    if (o.classes_per_client) cfg.partition.classes_per_client = *o.classes_per_client;
    if (o.local_epochs) cfg.local_epochs = *o.local_epochs;
    if (o.batch_size) cfg.batch_size = *o.batch_size;
    if (o.sample_rate) cfg.sample_rate = *o.sample_rate;
    if (o.alpha) cfg.partition.alpha = *o.alpha;
    if (o.beta_fine) cfg.partition.beta_fine = *o.beta_fine;
    if (o.sigma_max) cfg.partition.sigma_max = *o.sigma_max;
    if (o.local_lr) cfg.local_lr = *o.local_lr;
    if (o.server_lr) cfg.server_lr = *o.server_lr;
    if (o.seed) cfg.seed = *o.seed;
    if (o.out_dir) cfg.out_dir = *o.out_dir;

    cfg.finalize();
    cfg.validate();
    return cfg;
}

LabeledDataset build_dataset(const ExperimentConfig& cfg) {
    if (cfg.dataset.kind == "synth_image")
        return synth_image_task(cfg.dataset.num_classes, cfg.dataset.per_class, cfg.dataset.extent,
                                derive_seed(cfg.seed, "dataset"));
    if (cfg.dataset.kind == "synth_char")
        return synth_char_task(cfg.dataset.vocab, cfg.dataset.seq_len, cfg.dataset.num_styles, cfg.dataset.per_style,
                               derive_seed(cfg.seed, "dataset"));
    if (cfg.dataset.kind == "cifar10") return load_cifar(cfg.dataset.path, CifarVariant::cifar10);
    if (cfg.dataset.kind == "cifar100") return load_cifar(cfg.dataset.path, CifarVariant::cifar100);
    throw std::invalid_argument("config: unknown dataset.kind '" + cfg.dataset.kind + "'");
}

PartitionManifest build_partition(const ExperimentConfig& cfg, const LabeledDataset& ds) {
    std::uint64_t seed = derive_seed(cfg.seed, "partition");
    if (cfg.partition.scheme == "pathological")
        return partition_pathological(ds, cfg.partition.clients, cfg.partition.classes_per_client, seed);
    if (cfg.partition.scheme == "dirichlet")
        return partition_dirichlet(ds, cfg.partition.clients, cfg.partition.alpha, seed);
    if (cfg.partition.scheme == "pachinko")
        return partition_pachinko(ds, cfg.partition.clients, cfg.partition.alpha, cfg.partition.beta_fine, seed);
    throw std::invalid_argument("config: unknown partition.scheme '" + cfg.partition.scheme + "'");
}

ClientData make_novel_duplicate_client(const ExperimentConfig& cfg, const PartitionManifest& manifest,
                                       const LabeledDataset& ds, int reference_client, std::uint64_t salt) {
    if (reference_client < 0 || reference_client >= manifest.num_clients())
        throw std::invalid_argument("novel client: reference client id out of range");
    if (cfg.dataset.kind != "synth_image" && cfg.dataset.kind != "synth_char")
        throw std::invalid_argument("novel client: fresh draws are only available for synthetic datasets");

    // per-class counts of the reference client's full assignment
    std::vector<int> counts(static_cast<std::size_t>(ds.num_classes), 0);
    for (int i : manifest.train_idx[static_cast<std::size_t>(reference_client)])
        counts[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])] += 1;
    for (int i : manifest.test_idx[static_cast<std::size_t>(reference_client)])
        counts[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])] += 1;
    int per_class_needed = *std::max_element(counts.begin(), counts.end());
    if (per_class_needed == 0) throw std::invalid_argument("novel client: reference client has no samples");

    std::uint64_t fresh_seed = derive_seed(cfg.seed, "novel-data", salt);
    LabeledDataset fresh =
        cfg.dataset.kind == "synth_image"
            ? synth_image_task(ds.num_classes, per_class_needed, cfg.dataset.extent, fresh_seed)
            : synth_char_task(cfg.dataset.vocab, cfg.dataset.seq_len, ds.num_classes, per_class_needed, fresh_seed);

    std::vector<int> assigned;
    std::vector<int> taken(static_cast<std::size_t>(ds.num_classes), 0);
    for (int i = 0; i < fresh.size(); ++i) {
        int c = fresh.labels[static_cast<std::size_t>(i)];
        if (taken[static_cast<std::size_t>(c)] < counts[static_cast<std::size_t>(c)]) {
            assigned.push_back(i);
            taken[static_cast<std::size_t>(c)] += 1;
        }
    }
    auto [train, test] = stratified_split(fresh, assigned, derive_seed(fresh_seed, "split"));
    return make_client_from_indices(fresh, manifest.num_clients(), train, test);
}

}  // namespace fedtp
