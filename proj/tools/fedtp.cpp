// fedtp: federated Transformer personalization experiments.
// Stages: partition -> train -> eval / rollout / finetune-novel, each writing
// its artifacts under the run directory.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "fedtp/analysis.hpp"
#include "fedtp/config.hpp"
#include "fedtp/federation.hpp"

namespace fs = std::filesystem;
using namespace fedtp;

namespace {

std::string timestamp_dir() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[64];
    std::strftime(buf, sizeof(buf), "run-%Y%m%d-%H%M%S", std::localtime(&t));
    return std::string("runs/") + buf;
}

std::string read_text_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

struct Cli {
    std::string config_path;
    std::string preset = "desk";
    ConfigOverrides overrides;

    // stage-specific
    std::string checkpoint_path;
    std::string manifest_path;
    int probe_index = 0;
    int duplicate_of = 0;
    int finetune_epochs = 1;
};

ExperimentConfig resolve_config(const Cli& cli) {
    std::string text;
    if (!cli.config_path.empty()) text = read_text_file(cli.config_path);
    ExperimentConfig cfg = parse_config(text, cli.preset, cli.overrides);
    if (cfg.out_dir.empty()) cfg.out_dir = timestamp_dir();
    return cfg;
}

void require_artifact(const std::string& path, const std::string& hint) {
    if (!fs::exists(path))
        throw std::runtime_error("missing artifact '" + path + "' (" + hint + ")");
}

LabeledDataset load_or_build_dataset(const ExperimentConfig& cfg) {
    std::string persisted = cfg.out_dir + "/dataset.bin";
    if (fs::exists(persisted)) return load_dataset(persisted);
    return build_dataset(cfg);
}

Federation make_federation(const ExperimentConfig& cfg, const LabeledDataset& ds, const PartitionManifest& manifest) {
    manifest.validate(ds);
    std::vector<ClientData> clients = apply_noise_ladder(manifest, ds, cfg.partition.sigma_max);
    return Federation(clients, cfg.run_config());
}

int cmd_partition(const Cli& cli) {
    ExperimentConfig cfg = resolve_config(cli);
    fs::create_directories(cfg.out_dir);
    LabeledDataset ds = build_dataset(cfg);
    PartitionManifest manifest = build_partition(cfg, ds);
    manifest.validate(ds);
    manifest.save(cfg.out_dir + "/manifest.json");
    if (cfg.dataset.kind == "synth_image" || cfg.dataset.kind == "synth_char")
        save_dataset(cfg.out_dir + "/dataset.bin", ds);
    std::ofstream(cfg.out_dir + "/config.json") << cfg.to_json() << "\n";
    std::cout << "partition: " << manifest.num_clients() << " clients, manifest at " << cfg.out_dir
              << "/manifest.json\n";
    return 0;
}

int cmd_train(const Cli& cli) {
    ExperimentConfig cfg = resolve_config(cli);
    std::string manifest_path = cli.manifest_path.empty() ? cfg.out_dir + "/manifest.json" : cli.manifest_path;
    require_artifact(manifest_path, "run the partition stage first");
    PartitionManifest manifest = PartitionManifest::load(manifest_path);
    LabeledDataset ds = load_or_build_dataset(cfg);
    Federation fed = make_federation(cfg, ds, manifest);

    fs::create_directories(cfg.out_dir + "/checkpoints");
    std::ofstream(cfg.out_dir + "/config.json") << cfg.to_json() << "\n";

    std::vector<RoundReport> reports;
    for (int t = 1; t <= cfg.rounds; ++t) {
        reports.push_back(fed.run_round());
        if (t % cfg.checkpoint_every == 0)
            fed.save_checkpoint(cfg.out_dir + "/checkpoints/round_" + std::to_string(t) + ".ckpt", cfg.to_json());
        if (t % cfg.eval_every == 0 || t == cfg.rounds) {
            const RoundReport& r = reports.back();
            std::cout << "round " << t << ": sampled " << r.sampled.size() << " clients, weighted acc "
                      << r.weighted_mean_acc << ", |dxi| " << r.delta_xi_norm << "\n";
        }
    }
    fed.save_checkpoint(cfg.out_dir + "/checkpoints/final.ckpt", cfg.to_json());
    export_metrics_csv(cfg.out_dir + "/metrics.csv", reports);
    export_metrics_jsonl(cfg.out_dir + "/metrics.jsonl", reports);
    if (!fed.server().embeddings.empty())
        export_embeddings_csv(cfg.out_dir + "/embeddings.csv", fed.server().embeddings);

    EvalResult final_eval = fed.evaluate();
    std::cout << "final weighted accuracy over all clients: " << final_eval.weighted_mean << "\n";
    return 0;
}

int cmd_eval(const Cli& cli) {
    ExperimentConfig cfg = resolve_config(cli);
    std::string ckpt = cli.checkpoint_path.empty() ? cfg.out_dir + "/checkpoints/final.ckpt" : cli.checkpoint_path;
    require_artifact(ckpt, "run the train stage first");
    std::string manifest_path = cli.manifest_path.empty() ? cfg.out_dir + "/manifest.json" : cli.manifest_path;
    require_artifact(manifest_path, "run the partition stage first");

    PartitionManifest manifest = PartitionManifest::load(manifest_path);
    LabeledDataset ds = load_or_build_dataset(cfg);
    Federation fed = make_federation(cfg, ds, manifest);
    fed.load_checkpoint(ckpt);

    EvalResult res = fed.evaluate();
    nlohmann::json j;
    j["per_client_acc"] = res.per_client_acc;
    j["correct"] = res.correct;
    j["counts"] = res.counts;
    j["weighted_mean"] = res.weighted_mean;
    std::ofstream(cfg.out_dir + "/eval.json") << j.dump(2) << "\n";
    for (std::size_t i = 0; i < res.per_client_acc.size(); ++i)
        std::cout << "client " << i << ": acc " << res.per_client_acc[i] << " (" << res.correct[i] << "/"
                  << res.counts[i] << ")\n";
    std::cout << "weighted mean accuracy: " << res.weighted_mean << "\n";
    return 0;
}

int cmd_rollout(const Cli& cli) {
    ExperimentConfig cfg = resolve_config(cli);
    if (cfg.model.task != Task::image_classification)
        throw std::runtime_error("rollout requires an image-classification run");
    std::string ckpt = cli.checkpoint_path.empty() ? cfg.out_dir + "/checkpoints/final.ckpt" : cli.checkpoint_path;
    require_artifact(ckpt, "run the train stage first");
    std::string manifest_path = cli.manifest_path.empty() ? cfg.out_dir + "/manifest.json" : cli.manifest_path;
    require_artifact(manifest_path, "run the partition stage first");

    PartitionManifest manifest = PartitionManifest::load(manifest_path);
    LabeledDataset ds = load_or_build_dataset(cfg);
    Federation fed = make_federation(cfg, ds, manifest);
    fed.load_checkpoint(ckpt);

    if (cli.probe_index < 0 || cli.probe_index >= ds.size())
        throw std::runtime_error("probe index " + std::to_string(cli.probe_index) + " out of range");
    Batch probe;
    probe.size = 1;
    Tensor tok = patchify(ds.image_tensor(cli.probe_index), cfg.model.patch_size);
    probe.x = Tensor({1, tok.shape[0], tok.shape[1]}, tok.data);

    std::vector<AttentionMap> maps;
    for (int id = 0; id < fed.num_clients(); ++id) {
        ModelOutput out = model_forward(fed.client_params(id), cfg.model, probe, true);
        maps.push_back(attention_rollout(out.trace));
    }
    fs::create_directories(cfg.out_dir + "/maps");
    for (std::size_t i = 0; i < maps.size(); ++i)
        write_pgm(cfg.out_dir + "/maps/client" + std::to_string(i) + ".pgm", maps[i]);
    double divergence = maps.size() >= 2 ? map_divergence(maps) : 0.0;
    nlohmann::json j;
    j["probe_index"] = cli.probe_index;
    j["mean_pairwise_l2"] = divergence;
    std::ofstream(cfg.out_dir + "/rollout.json") << j.dump(2) << "\n";
    std::cout << "rollout maps for " << maps.size() << " clients, mean pairwise L2 divergence " << divergence << "\n";
    return 0;
}

int cmd_finetune_novel(const Cli& cli) {
    ExperimentConfig cfg = resolve_config(cli);
    std::string ckpt = cli.checkpoint_path.empty() ? cfg.out_dir + "/checkpoints/final.ckpt" : cli.checkpoint_path;
    require_artifact(ckpt, "run the train stage first");
    std::string manifest_path = cli.manifest_path.empty() ? cfg.out_dir + "/manifest.json" : cli.manifest_path;
    require_artifact(manifest_path, "run the partition stage first");

    PartitionManifest manifest = PartitionManifest::load(manifest_path);
    LabeledDataset ds = load_or_build_dataset(cfg);
    Federation fed = make_federation(cfg, ds, manifest);
    fed.load_checkpoint(ckpt);

    ClientData novel = make_novel_duplicate_client(cfg, manifest, ds, cli.duplicate_of, 0);
    FinetuneResult res = fed.finetune_novel_client(novel, cli.finetune_epochs);
    nlohmann::json j;
    j["duplicate_of"] = cli.duplicate_of;
    j["epochs"] = cli.finetune_epochs;
    j["acc_before"] = res.acc_before;
    j["acc_after"] = res.acc_after;
    std::ofstream(cfg.out_dir + "/finetune.json") << j.dump(2) << "\n";
    std::cout << "novel client (duplicate of " << cli.duplicate_of << "): acc " << res.acc_before << " -> "
              << res.acc_after << " after " << cli.finetune_epochs << " embedding epoch(s)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fedtp: personalized federated Transformer experiments"};
    app.require_subcommand(1);

    Cli cli;
    std::string strategy, out_dir;
    int rounds = 0, clients = 0, workers = 0, cpc = 0, epochs = 0, batch = 0;
    double sample_rate = 0, alpha = 0, beta_fine = 0, sigma_max = 0, local_lr = 0, server_lr = 0;
    std::uint64_t seed = 0;

    app.add_option("--config", cli.config_path, "JSON experiment config");
    app.add_option("--preset", cli.preset, "desk|paper")->check(CLI::IsMember({"desk", "paper"}));
    auto* o_strategy = app.add_option("--strategy", strategy,
                                      "fedtp|vanilla_personalized|fedavg|fedprox|local_only|fedper_head");
    auto* o_rounds = app.add_option("--rounds", rounds, "communication rounds");
    auto* o_clients = app.add_option("--clients", clients, "number of clients");
    auto* o_rate = app.add_option("--sample_rate", sample_rate, "client participation rate");
    auto* o_seed = app.add_option("--seed", seed, "experiment seed");
    auto* o_workers = app.add_option("--workers", workers, "intra-round worker threads (1 = serial)");
    auto* o_out = app.add_option("--out", out_dir, "run directory");
    auto* o_alpha = app.add_option("--alpha", alpha, "dirichlet/pachinko coarse alpha");
    auto* o_beta = app.add_option("--beta-fine", beta_fine, "pachinko fine beta");
    auto* o_cpc = app.add_option("--classes-per-client", cpc, "pathological classes per client");
    auto* o_sigma = app.add_option("--sigma-max", sigma_max, "noise ladder maximum sigma");
    auto* o_epochs = app.add_option("--local_epochs", epochs, "local epochs per round");
    auto* o_batch = app.add_option("--batch_size", batch, "local batch size");
    auto* o_llr = app.add_option("--local_lr", local_lr, "local learning rate");
    auto* o_slr = app.add_option("--server_lr", server_lr, "server learning rate");

    auto* p_part = app.add_subcommand("partition", "build the dataset and client partition manifest");
    auto* p_train = app.add_subcommand("train", "run federated training rounds");
    auto* p_eval = app.add_subcommand("eval", "evaluate a checkpoint on every client");
    auto* p_roll = app.add_subcommand("rollout", "attention rollout maps per client");
    auto* p_fine = app.add_subcommand("finetune-novel", "embedding-only fine-tuning for a novel client");
    for (auto* sub : {p_part, p_train, p_eval, p_roll, p_fine}) sub->fallthrough();

    for (auto* sub : {p_train, p_eval, p_roll, p_fine})
        sub->add_option("--manifest", cli.manifest_path, "manifest path (default OUT/manifest.json)");
    for (auto* sub : {p_eval, p_roll, p_fine})
        sub->add_option("--checkpoint", cli.checkpoint_path, "checkpoint path (default OUT/checkpoints/final.ckpt)");
    p_roll->add_option("--probe-index", cli.probe_index, "dataset index of the shared probe image");
    p_fine->add_option("--duplicate-of", cli.duplicate_of, "training client whose distribution the novel client copies");
    p_fine->add_option("--epochs", cli.finetune_epochs, "embedding fine-tuning epochs");

    CLI11_PARSE(app, argc, argv);

    if (o_strategy->count()) cli.overrides.strategy = strategy;
    if (o_rounds->count()) cli.overrides.rounds = rounds;
    if (o_clients->count()) cli.overrides.clients = clients;
    if (o_rate->count()) cli.overrides.sample_rate = sample_rate;
    if (o_seed->count()) cli.overrides.seed = seed;
    if (o_workers->count()) cli.overrides.workers = workers;
    if (o_out->count()) cli.overrides.out_dir = out_dir;
    if (o_alpha->count()) cli.overrides.alpha = alpha;
    if (o_beta->count()) cli.overrides.beta_fine = beta_fine;
    if (o_cpc->count()) cli.overrides.classes_per_client = cpc;
    if (o_sigma->count()) cli.overrides.sigma_max = sigma_max;
    if (o_epochs->count()) cli.overrides.local_epochs = epochs;
    if (o_batch->count()) cli.overrides.batch_size = batch;
    if (o_llr->count()) cli.overrides.local_lr = local_lr;
    if (o_slr->count()) cli.overrides.server_lr = server_lr;

    try {
        if (p_part->parsed()) return cmd_partition(cli);
        if (p_train->parsed()) return cmd_train(cli);
        if (p_eval->parsed()) return cmd_eval(cli);
        if (p_roll->parsed()) return cmd_rollout(cli);
        if (p_fine->parsed()) return cmd_finetune_novel(cli);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no subcommand\n";
    return 1;
}
