#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedtp/tensor.hpp"

namespace fedtp {

enum class DataKind : std::uint8_t { image, sequence };

// Flat sample storage: images are C*H*W doubles in [0,1]; sequences are
// seq_len+1 integer-valued token ids (inputs plus the shifted target stream).
struct LabeledDataset {
    DataKind kind = DataKind::image;
    int channels = 0, height = 0, width = 0;
    int seq_len = 0, vocab = 0;
    int num_classes = 0;
    int num_coarse = 0;

    std::vector<double> data;  // n * sample_dim, row-major
    std::vector<int> labels;   // fine labels (style ids for sequences)
    std::vector<int> coarse;   // empty unless the dataset has coarse labels

    int size() const { return static_cast<int>(labels.size()); }
    int sample_dim() const;
    const double* sample(int i) const { return data.data() + static_cast<std::ptrdiff_t>(i) * sample_dim(); }
    Tensor image_tensor(int i) const;  // (C,H,W)
    std::uint64_t fingerprint() const;
    void validate() const;
};

enum class CifarVariant : std::uint8_t { cifar10, cifar100 };

// Standard CIFAR binary layout; train and test records are pooled, the
// partitioner re-splits per client.
LabeledDataset load_cifar(const std::string& path, CifarVariant variant);

LabeledDataset synth_image_task(int num_classes, int per_class, int extent, std::uint64_t seed);

// Row-stochastic per-style transition matrix used by the sequence generator.
std::vector<double> char_style_chain(int vocab, int style, std::uint64_t seed);
LabeledDataset synth_char_task(int vocab, int seq_len, int num_styles, int per_style, std::uint64_t seed);

struct PartitionManifest {
    std::string scheme;
    std::map<std::string, double> params;
    std::uint64_t seed = 0;
    std::uint64_t dataset_fingerprint = 0;
    std::vector<std::vector<int>> train_idx;
    std::vector<std::vector<int>> test_idx;

    int num_clients() const { return static_cast<int>(train_idx.size()); }
    std::string to_json() const;
    static PartitionManifest from_json(const std::string& text);
    void save(const std::string& path) const;
    static PartitionManifest load(const std::string& path);

    // disjointness, index ranges, and the matched train/test class
    // proportions required of every partition
    void validate(const LabeledDataset& ds) const;
};

PartitionManifest partition_pathological(const LabeledDataset& ds, int num_clients, int classes_per_client,
                                         std::uint64_t seed);
PartitionManifest partition_dirichlet(const LabeledDataset& ds, int num_clients, double alpha, std::uint64_t seed);
PartitionManifest partition_pachinko(const LabeledDataset& ds, int num_clients, double alpha, double beta,
                                     std::uint64_t seed);

// Materialized per-client train/test rows. The noise ladder assigns client i
// Gaussian noise of sigma_i = sigma_max/(N-1)*i, identical law on its train
// and test rows, clipped back to [0,1]; sigma_max = 0 leaves inputs untouched.
struct ClientData {
    int id = 0;
    int dim = 0;
    std::vector<double> train_x, test_x;
    std::vector<int> train_y, test_y;
    int train_count() const { return static_cast<int>(train_y.size()); }
    int test_count() const { return static_cast<int>(test_y.size()); }
};

std::vector<ClientData> apply_noise_ladder(const PartitionManifest& manifest, const LabeledDataset& ds,
                                           double sigma_max);

// The 80/20 per-class split used for every client's train/test assignment.
std::pair<std::vector<int>, std::vector<int>> stratified_split(const LabeledDataset& ds,
                                                               const std::vector<int>& assigned, std::uint64_t seed);

ClientData make_client_from_indices(const LabeledDataset& ds, int id, const std::vector<int>& train,
                                    const std::vector<int>& test);

// Synthetic datasets persist in the named-array checkpoint format.
void save_dataset(const std::string& path, const LabeledDataset& ds);
LabeledDataset load_dataset(const std::string& path);

}  // namespace fedtp
