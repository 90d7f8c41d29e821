#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedtp/datagen.hpp"
#include "fedtp/hypernet.hpp"
#include "fedtp/model.hpp"

namespace fedtp {

enum class Strategy : std::uint8_t {
    fedtp,
    vanilla_personalized,
    fedavg,
    fedprox,
    local_only,
    fedper_head,
};

Strategy strategy_from_string(const std::string& s);
std::string strategy_name(Strategy s);

struct StrategySpec {
    Strategy name = Strategy::fedtp;
    double mu = 0.0;  // fedprox proximal weight
    bool literal_paper_sign = false;
    bool personalize_out_proj = false;
    bool freeze_embeddings = false;
    bool literal_global_mass = false;
    void validate() const;
};

struct ClientState {
    int id = 0;
    ParamSet cache;  // vanilla: attention set; fedper_head: classifier head; local_only: full model
};

struct ServerState {
    int round = 0;
    ParamSet global;                  // full model parameters; the shared subset is xi-bar
    ParamSet phi;                     // hypernetwork (fedtp)
    std::vector<Tensor> embeddings;   // one per client (fedtp)
};

struct RoundReport {
    int round = 0;
    std::vector<int> sampled;
    std::vector<double> train_loss;   // aligned with `sampled`
    std::vector<double> test_acc;     // aligned with `sampled`
    double weighted_mean_acc = 0.0;   // sum(correct) / sum(test_count) over sampled clients
    double delta_xi_norm = 0.0;
    double grad_phi_norm = 0.0;
    std::vector<double> grad_z_norm;  // aligned with `sampled`
    double wall_clock_s = 0.0;
};

struct EvalResult {
    std::vector<double> per_client_acc;
    std::vector<int> correct;
    std::vector<int> counts;
    double weighted_mean = 0.0;
};

// Client rows converted into bindable form: images pre-patchified, sequences
// split into input ids and shifted targets.
struct PreparedClient {
    int id = 0;
    int n_train = 0, n_test = 0;
    int x_dim = 0;  // per-sample x extent (m*pd or m)
    int y_dim = 0;  // per-sample label extent (1 or m)
    std::vector<double> train_x, train_y, test_x, test_y;
};

PreparedClient prepare_client(const ClientData& data, const ModelConfig& model);
Batch make_batch(const PreparedClient& c, const ModelConfig& model, const std::vector<int>& rows, bool train_rows);

struct LocalTrainResult {
    ParamSet theta;     // theta^K
    ParamSet delta_w;   // W^K - W^0, stored as printed; sign handling is the server's
    double mean_loss = 0.0;
};

// K epochs of mini-batch SGD on cross-entropy (plus the fedprox proximal term
// when mu > 0). Batch order is drawn from (seed, client, round, epoch), so the
// result does not depend on scheduling.
LocalTrainResult local_train(const PreparedClient& client, const ParamSet& theta0, const ModelConfig& model,
                             int epochs, double lr, int batch, const StrategySpec& strategy,
                             std::uint64_t experiment_seed, int round);

// xi-bar = sum_i (m_i / M) xi_i with M the provided masses' total.
ParamSet aggregate_shared(const std::vector<std::pair<const ParamSet*, double>>& updates);

struct FedRunConfig {
    ModelConfig model;
    HyperNetConfig hyper;
    StrategySpec strategy;
    int local_epochs = 5;
    int batch_size = 64;
    double local_lr = 0.01;
    double server_lr = 0.01;
    double sample_rate = 1.0;
    std::uint64_t seed = 0;
    int workers = 1;
    void validate() const;
};

struct FinetuneResult {
    double acc_before = 0.0;
    double acc_after = 0.0;
    Tensor embedding;
};

class Federation {
public:
    Federation(std::vector<ClientData> clients, FedRunConfig config);

    RoundReport run_round();
    EvalResult evaluate() const;                 // every client on its own test split
    ParamSet client_params(int id) const;        // composed personalized parameters
    double client_test_accuracy(int id, const ParamSet& params) const;

    // Fresh embedding from the trained ones; only z is optimized, phi and
    // xi-bar stay frozen. Requires the fedtp strategy.
    FinetuneResult finetune_novel_client(const ClientData& novel, int epochs) const;

    int num_clients() const { return static_cast<int>(prepared_.size()); }
    const ServerState& server() const { return server_; }
    ServerState& server() { return server_; }
    const std::vector<ClientState>& client_states() const { return states_; }
    const FedRunConfig& config() const { return cfg_; }
    const PreparedClient& prepared(int id) const { return prepared_[static_cast<std::size_t>(id)]; }

    // full server + per-client strategy state, named-array checkpoint format
    void save_checkpoint(const std::string& path, const std::string& config_echo_json) const;
    void load_checkpoint(const std::string& path);

private:
    FedRunConfig cfg_;
    std::vector<PreparedClient> prepared_;
    std::vector<ClientState> states_;
    ServerState server_;
};

}  // namespace fedtp
