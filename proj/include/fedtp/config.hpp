#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "fedtp/datagen.hpp"
#include "fedtp/federation.hpp"

namespace fedtp {

struct DatasetSpec {
    std::string kind = "synth_image";  // synth_image | synth_char | cifar10 | cifar100
    int num_classes = 8;
    int per_class = 50;
    int extent = 16;
    int vocab = 16;
    int seq_len = 32;
    int num_styles = 4;
    int per_style = 100;
    std::string path;  // cifar binary directory or file
};

struct PartitionSpec {
    std::string scheme = "pathological";  // pathological | dirichlet | pachinko
    int clients = 10;
    int classes_per_client = 2;
    double alpha = 0.3;
    double beta_fine = 10.0;
    double sigma_max = 0.0;
};

struct ExperimentConfig {
    DatasetSpec dataset;
    PartitionSpec partition;
    ModelConfig model;
    StrategySpec strategy;
    HyperNetConfig hyper;

    int rounds = 50;
    int local_epochs = 5;
    double local_lr = 0.01;
    double server_lr = 0.01;
    int batch_size = 64;
    double sample_rate = 1.0;
    std::uint64_t seed = 0;
    std::string out_dir;
    int checkpoint_every = 50;
    int eval_every = 10;
    int workers = 1;

    // fills model task/shape fields from the dataset spec and syncs the
    // hypernet target dimensions
    void finalize();
    void validate() const;
    std::string to_json() const;

    FedRunConfig run_config() const;
};

struct ConfigOverrides {
    std::optional<std::string> strategy;
    std::optional<int> rounds, clients, workers, classes_per_client, local_epochs, batch_size;
    std::optional<double> sample_rate, alpha, beta_fine, sigma_max, local_lr, server_lr;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
};

ExperimentConfig preset_config(const std::string& name);  // desk | paper

// json_text may be empty (preset defaults apply); unknown keys are an error,
// flag overrides win over file values.
ExperimentConfig parse_config(const std::string& json_text, const std::string& preset,
                              const ConfigOverrides& overrides);

LabeledDataset build_dataset(const ExperimentConfig& cfg);
PartitionManifest build_partition(const ExperimentConfig& cfg, const LabeledDataset& ds);

// Novel client whose label distribution duplicates a training client's, with
// freshly generated samples (synthetic datasets only). `salt` separates draws
// across seeds/epochs of a harness.
ClientData make_novel_duplicate_client(const ExperimentConfig& cfg, const PartitionManifest& manifest,
                                       const LabeledDataset& ds, int reference_client, std::uint64_t salt);

}  // namespace fedtp
