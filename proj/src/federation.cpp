#include "fedtp/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "fedtp/checkpoint.hpp"
#include "fedtp/rng.hpp"

namespace fedtp {

Strategy strategy_from_string(const std::string& s) {
    if (s == "fedtp") return Strategy::fedtp;
    if (s == "vanilla_personalized") return Strategy::vanilla_personalized;
    if (s == "fedavg") return Strategy::fedavg;
    if (s == "fedprox") return Strategy::fedprox;
    if (s == "local_only") return Strategy::local_only;
    if (s == "fedper_head") return Strategy::fedper_head;
    throw std::invalid_argument("unknown strategy '" + s + "'");
}

std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::fedtp: return "fedtp";
        case Strategy::vanilla_personalized: return "vanilla_personalized";
        case Strategy::fedavg: return "fedavg";
        case Strategy::fedprox: return "fedprox";
        case Strategy::local_only: return "local_only";
        case Strategy::fedper_head: return "fedper_head";
    }
    return "?";
}

void StrategySpec::validate() const {
    if (mu < 0.0) throw std::invalid_argument("strategy: mu must be >= 0");
    if (mu > 0.0 && name != Strategy::fedprox)
        throw std::invalid_argument("strategy: mu is only used by fedprox");
    if (personalize_out_proj && name == Strategy::fedtp)
        throw std::invalid_argument("strategy: fedtp generates exactly wq/wk/wv; personalize_out_proj is unsupported");
}

void FedRunConfig::validate() const {
    model.validate();
    strategy.validate();
    if (local_epochs < 1) throw std::invalid_argument("run config: local_epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("run config: batch_size must be >= 1");
    if (!(local_lr > 0.0) || !(server_lr > 0.0))
        throw std::invalid_argument("run config: learning rates must be > 0");
    if (!(sample_rate > 0.0 && sample_rate <= 1.0))
        throw std::invalid_argument("run config: sample_rate must be in (0, 1]");
    if (workers < 1) throw std::invalid_argument("run config: workers must be >= 1");
}

// ---------------------------------------------------------------------------
// data preparation
// ---------------------------------------------------------------------------

PreparedClient prepare_client(const ClientData& data, const ModelConfig& model) {
    PreparedClient p;
    p.id = data.id;
    p.n_train = data.train_count();
    p.n_test = data.test_count();
    if (p.n_train == 0) throw std::invalid_argument("client " + std::to_string(data.id) + " has no training data");

    if (model.task == Task::image_classification) {
        int m = model.num_patches(), pd = model.patch_dim();
        if (data.dim != model.channels * model.image_extent * model.image_extent)
            throw std::invalid_argument("client data dimension does not match the image model config");
        p.x_dim = m * pd;
        p.y_dim = 1;
        auto emit = [&](const std::vector<double>& xs, const std::vector<int>& ys, std::vector<double>& ox,
                        std::vector<double>& oy) {
            Tensor img({model.channels, model.image_extent, model.image_extent});
            for (std::size_t i = 0; i < ys.size(); ++i) {
                std::copy_n(xs.data() + static_cast<std::ptrdiff_t>(i) * data.dim, data.dim, img.data.data());
                Tensor tok = patchify(img, model.patch_size);
                ox.insert(ox.end(), tok.data.begin(), tok.data.end());
                oy.push_back(static_cast<double>(ys[i]));
            }
        };
        emit(data.train_x, data.train_y, p.train_x, p.train_y);
        emit(data.test_x, data.test_y, p.test_x, p.test_y);
    } else {
        int m = model.seq_len;
        if (data.dim != m + 1)
            throw std::invalid_argument("client sequence length does not match the model config");
        p.x_dim = m;
        p.y_dim = m;
        auto emit = [&](const std::vector<double>& xs, const std::vector<int>& ys, std::vector<double>& ox,
                        std::vector<double>& oy) {
            for (std::size_t i = 0; i < ys.size(); ++i) {
                const double* row = xs.data() + static_cast<std::ptrdiff_t>(i) * (m + 1);
                ox.insert(ox.end(), row, row + m);
                oy.insert(oy.end(), row + 1, row + m + 1);
            }
        };
        emit(data.train_x, data.train_y, p.train_x, p.train_y);
        emit(data.test_x, data.test_y, p.test_x, p.test_y);
    }
    return p;
}

Batch make_batch(const PreparedClient& c, const ModelConfig& model, const std::vector<int>& rows, bool train_rows) {
    const std::vector<double>& xs = train_rows ? c.train_x : c.test_x;
    const std::vector<double>& ys = train_rows ? c.train_y : c.test_y;
    int b = static_cast<int>(rows.size());
    Batch batch;
    batch.size = b;
    if (model.task == Task::image_classification) {
        batch.x = Tensor({b, model.num_patches(), model.patch_dim()});
        batch.labels = Tensor({b});
    } else {
        batch.x = Tensor({b, model.seq_len});
        batch.labels = Tensor({b, model.seq_len});
    }
    for (int i = 0; i < b; ++i) {
        int r = rows[static_cast<std::size_t>(i)];
        std::copy_n(xs.data() + static_cast<std::ptrdiff_t>(r) * c.x_dim, c.x_dim,
                    batch.x.data.data() + static_cast<std::ptrdiff_t>(i) * c.x_dim);
        std::copy_n(ys.data() + static_cast<std::ptrdiff_t>(r) * c.y_dim, c.y_dim,
                    batch.labels.data.data() + static_cast<std::ptrdiff_t>(i) * c.y_dim);
    }
    return batch;
}

// ---------------------------------------------------------------------------
// local training and aggregation
// ---------------------------------------------------------------------------

namespace {

ParamSet attention_subset(const ParamSet& theta, bool personalize_out_proj) {
    ParamSet w;
    for (const auto& [name, t] : theta)
        if (is_attention_param(name, personalize_out_proj)) w[name] = t;
    return w;
}

}  // namespace

LocalTrainResult local_train(const PreparedClient& client, const ParamSet& theta0, const ModelConfig& model,
                             int epochs, double lr, int batch, const StrategySpec& strategy,
                             std::uint64_t experiment_seed, int round) {
    if (epochs < 1 || batch < 1) throw std::invalid_argument("local_train: epochs and batch must be >= 1");
    if (client.n_train == 0) throw std::invalid_argument("local_train: client has no training data");

    LocalTrainResult out;
    out.theta = theta0;
    ParamSet w0 = attention_subset(theta0, strategy.personalize_out_proj);
    const bool prox = strategy.name == Strategy::fedprox && strategy.mu > 0.0;

    double loss_sum = 0.0;
    int steps = 0;
    for (int epoch = 1; epoch <= epochs; ++epoch) {
        Rng order_rng(derive_seed(experiment_seed, "order", static_cast<std::uint64_t>(client.id),
                                  static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(epoch)));
        std::vector<int> perm(static_cast<std::size_t>(client.n_train));
        std::iota(perm.begin(), perm.end(), 0);
        order_rng.shuffle(perm);

        for (int off = 0; off < client.n_train; off += batch) {
            int bs = std::min(batch, client.n_train - off);
            std::vector<int> rows(perm.begin() + off, perm.begin() + off + bs);
            Batch b = make_batch(client, model, rows, true);

            Tape tape(model.precision);
            ModelGraph g = build_model_graph(tape, model, bs, true, true);
            std::map<std::string, Tensor> bound;
            for (const auto& [name, t] : out.theta) bound[name] = t;
            bound["x"] = b.x;
            bound["y"] = b.labels;
            Tensor loss = forward_eval(tape, bound, g.loss);
            GradMap grads = backward(tape, g.loss);
            if (prox) {
                for (auto& [name, g_t] : grads) {
                    const Tensor& cur = out.theta.at(name);
                    const Tensor& ref = theta0.at(name);
                    for (std::size_t i = 0; i < g_t.data.size(); ++i)
                        g_t.data[i] += strategy.mu * (cur.data[i] - ref.data[i]);
                }
            }
            sgd_step(out.theta, grads, lr);
            loss_sum += loss.data[0];
            steps += 1;
        }
    }
    out.mean_loss = steps > 0 ? loss_sum / steps : 0.0;

    for (const auto& [name, t0] : w0) {
        Tensor d = out.theta.at(name);
        for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] -= t0.data[i];
        out.delta_w[name] = std::move(d);
    }
    return out;
}

ParamSet aggregate_shared(const std::vector<std::pair<const ParamSet*, double>>& updates) {
    if (updates.empty()) throw std::invalid_argument("aggregate_shared: empty update list");
    double mass = 0.0;
    for (const auto& [p, m] : updates) {
        (void)p;
        if (m <= 0.0) throw std::invalid_argument("aggregate_shared: sample counts must be positive");
        mass += m;
    }
    ParamSet out = *updates.front().first;
    for (auto& [name, t] : out) {
        std::fill(t.data.begin(), t.data.end(), 0.0);
        for (const auto& [p, m] : updates) {
            auto it = p->find(name);
            if (it == p->end()) throw std::invalid_argument("aggregate_shared: parameter '" + name + "' missing");
            if (it->second.shape != t.shape)
                throw std::invalid_argument("aggregate_shared: shape mismatch for '" + name + "'");
            double w = m / mass;
            for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += w * it->second.data[i];
        }
    }
    for (const auto& [p, m] : updates) {
        (void)m;
        if (p->size() != out.size()) throw std::invalid_argument("aggregate_shared: parameter sets differ in keys");
    }
    return out;
}

// ---------------------------------------------------------------------------
// federation engine
// ---------------------------------------------------------------------------

Federation::Federation(std::vector<ClientData> clients, FedRunConfig config) : cfg_(std::move(config)) {
    cfg_.validate();
    if (clients.empty()) throw std::invalid_argument("federation: need at least one client");
    cfg_.model.personalize_out_proj = cfg_.strategy.personalize_out_proj;
    cfg_.hyper.num_blocks = cfg_.model.num_blocks;
    cfg_.hyper.d_model = cfg_.model.d_model;

    prepared_.reserve(clients.size());
    for (const auto& c : clients) prepared_.push_back(prepare_client(c, cfg_.model));

    server_.global = init_model(cfg_.model, cfg_.seed);
    if (cfg_.strategy.name == Strategy::fedtp) {
        server_.phi = init_hypernet(cfg_.hyper, derive_seed(cfg_.seed, "hypernet"));
        server_.embeddings =
            init_embeddings(static_cast<int>(clients.size()), cfg_.hyper.embed_dim, derive_seed(cfg_.seed, "embeddings"));
    }

    states_.resize(clients.size());
    for (std::size_t i = 0; i < clients.size(); ++i) {
        states_[i].id = static_cast<int>(i);
        switch (cfg_.strategy.name) {
            case Strategy::vanilla_personalized:
                states_[i].cache = attention_subset(server_.global, cfg_.strategy.personalize_out_proj);
                break;
            case Strategy::local_only:
                states_[i].cache = server_.global;
                break;
            case Strategy::fedper_head:
                states_[i].cache["head.w"] = server_.global.at("head.w");
                states_[i].cache["head.b"] = server_.global.at("head.b");
                break;
            default:
                break;
        }
    }
}

ParamSet Federation::client_params(int id) const {
    const ClientState& st = states_[static_cast<std::size_t>(id)];
    switch (cfg_.strategy.name) {
        case Strategy::fedtp: {
            ParamSet w = hypernet_forward(server_.phi, server_.embeddings[static_cast<std::size_t>(id)], cfg_.hyper);
            ParamPartition part = split_params(cfg_.model, server_.global);
            return merge_params(cfg_.model, w, part.shared);
        }
        case Strategy::vanilla_personalized: {
            ParamPartition part = split_params(cfg_.model, server_.global);
            return merge_params(cfg_.model, st.cache, part.shared);
        }
        case Strategy::local_only:
            return st.cache;
        case Strategy::fedper_head: {
            ParamSet p = server_.global;
            for (const auto& [name, t] : st.cache) p[name] = t;
            return p;
        }
        case Strategy::fedavg:
        case Strategy::fedprox:
            return server_.global;
    }
    throw std::logic_error("client_params: unreachable");
}

double Federation::client_test_accuracy(int id, const ParamSet& params) const {
    const PreparedClient& c = prepared_[static_cast<std::size_t>(id)];
    if (c.n_test == 0) throw std::invalid_argument("client " + std::to_string(id) + " has an empty test split");
    const int chunk = 128;
    long correct = 0, total = 0;
    for (int off = 0; off < c.n_test; off += chunk) {
        int bs = std::min(chunk, c.n_test - off);
        std::vector<int> rows(static_cast<std::size_t>(bs));
        std::iota(rows.begin(), rows.end(), off);
        Batch b = make_batch(c, cfg_.model, rows, false);
        ModelOutput out = model_forward(params, cfg_.model, b, false);
        int classes = cfg_.model.output_classes();
        std::size_t positions = out.logits.data.size() / static_cast<std::size_t>(classes);
        for (std::size_t p = 0; p < positions; ++p) {
            const double* row = out.logits.data.data() + p * static_cast<std::size_t>(classes);
            int best = 0;  // ties resolve to the lowest index
            for (int j = 1; j < classes; ++j)
                if (row[j] > row[best]) best = j;
            int want = static_cast<int>(b.labels.data[p]);
            if (best == want) correct += 1;
            total += 1;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

EvalResult Federation::evaluate() const {
    EvalResult res;
    long correct_sum = 0, count_sum = 0;
    for (int id = 0; id < num_clients(); ++id) {
        ParamSet p = client_params(id);
        const PreparedClient& c = prepared_[static_cast<std::size_t>(id)];
        double acc = client_test_accuracy(id, p);
        int positions = c.n_test * c.y_dim;
        int corr = static_cast<int>(std::lround(acc * positions));
        res.per_client_acc.push_back(acc);
        res.correct.push_back(corr);
        res.counts.push_back(positions);
        correct_sum += corr;
        count_sum += positions;
    }
    res.weighted_mean = count_sum > 0 ? static_cast<double>(correct_sum) / static_cast<double>(count_sum) : 0.0;
    return res;
}

RoundReport Federation::run_round() {
    auto t0 = std::chrono::steady_clock::now();
    const int t = server_.round + 1;
    const int n = num_clients();
    const int k = std::max(1, static_cast<int>(std::ceil(cfg_.sample_rate * n)));

    std::vector<int> ids(static_cast<std::size_t>(n));
    std::iota(ids.begin(), ids.end(), 0);
    Rng sample_rng(derive_seed(cfg_.seed, "sample", static_cast<std::uint64_t>(t)));
    sample_rng.shuffle(ids);
    std::vector<int> sampled(ids.begin(), ids.begin() + k);
    std::sort(sampled.begin(), sampled.end());

    struct Slot {
        LocalTrainResult res;
        GradMap grad_phi;
        Tensor grad_z;
        std::exception_ptr error;
    };
    std::vector<Slot> slots(sampled.size());

    const bool fedtp = cfg_.strategy.name == Strategy::fedtp;
    auto work_one = [&](std::size_t j) {
        int id = sampled[j];
        ParamSet theta0 = client_params(id);
        slots[j].res = local_train(prepared_[static_cast<std::size_t>(id)], theta0, cfg_.model, cfg_.local_epochs,
                                   cfg_.local_lr, cfg_.batch_size, cfg_.strategy, cfg_.seed, t);
        if (fedtp) {
            // Algorithm stores dW = W^K - W^0; the descent convention feeds the
            // negated direction so the server steps downhill.
            ParamSet cot = slots[j].res.delta_w;
            if (!cfg_.strategy.literal_paper_sign) {
                for (auto& [name, d] : cot) {
                    (void)name;
                    for (double& v : d.data) v = -v;
                }
            }
            auto [gphi, gz] =
                hypernet_grads(server_.phi, server_.embeddings[static_cast<std::size_t>(id)], cot, cfg_.hyper);
            slots[j].grad_phi = std::move(gphi);
            slots[j].grad_z = std::move(gz);
        }
    };

    const int workers = std::min<int>(cfg_.workers, static_cast<int>(sampled.size()));
    if (workers <= 1) {
        for (std::size_t j = 0; j < sampled.size(); ++j) {
            try {
                work_one(j);
            } catch (...) {
                slots[j].error = std::current_exception();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        auto runner = [&]() {
            for (;;) {
                std::size_t j = next.fetch_add(1);
                if (j >= sampled.size()) break;
                try {
                    work_one(j);
                } catch (...) {
                    slots[j].error = std::current_exception();
                }
            }
        };
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(runner);
        for (auto& th : pool) th.join();
    }
    // deterministic failure: the lowest sampled client id wins
    for (const auto& s : slots)
        if (s.error) std::rethrow_exception(s.error);

    // aggregation masses
    double mass = 0.0;
    if (cfg_.strategy.literal_global_mass) {
        for (const auto& p : prepared_) mass += p.n_train;
    } else {
        for (int id : sampled) mass += prepared_[static_cast<std::size_t>(id)].n_train;
    }

    ParamPartition before = split_params(cfg_.model, server_.global);

    switch (cfg_.strategy.name) {
        case Strategy::fedtp:
        case Strategy::vanilla_personalized: {
            ParamSet xi(before.shared);
            for (auto& [name, tv] : xi) {
                std::fill(tv.data.begin(), tv.data.end(), 0.0);
                for (std::size_t j = 0; j < sampled.size(); ++j) {
                    double w = prepared_[static_cast<std::size_t>(sampled[j])].n_train / mass;
                    const Tensor& src = slots[j].res.theta.at(name);
                    for (std::size_t i = 0; i < tv.data.size(); ++i) tv.data[i] += w * src.data[i];
                }
            }
            for (auto& [name, tv] : xi) server_.global[name] = tv;
            if (cfg_.strategy.name == Strategy::vanilla_personalized) {
                for (std::size_t j = 0; j < sampled.size(); ++j)
                    states_[static_cast<std::size_t>(sampled[j])].cache =
                        attention_subset(slots[j].res.theta, cfg_.strategy.personalize_out_proj);
            }
            break;
        }
        case Strategy::fedavg:
        case Strategy::fedprox:
        case Strategy::fedper_head: {
            bool keep_head = cfg_.strategy.name == Strategy::fedper_head;
            for (auto& [name, tv] : server_.global) {
                if (keep_head && (name == "head.w" || name == "head.b")) continue;
                std::fill(tv.data.begin(), tv.data.end(), 0.0);
                for (std::size_t j = 0; j < sampled.size(); ++j) {
                    double w = prepared_[static_cast<std::size_t>(sampled[j])].n_train / mass;
                    const Tensor& src = slots[j].res.theta.at(name);
                    for (std::size_t i = 0; i < tv.data.size(); ++i) tv.data[i] += w * src.data[i];
                }
            }
            if (keep_head) {
                for (std::size_t j = 0; j < sampled.size(); ++j) {
                    ClientState& st = states_[static_cast<std::size_t>(sampled[j])];
                    st.cache["head.w"] = slots[j].res.theta.at("head.w");
                    st.cache["head.b"] = slots[j].res.theta.at("head.b");
                }
            }
            break;
        }
        case Strategy::local_only: {
            for (std::size_t j = 0; j < sampled.size(); ++j)
                states_[static_cast<std::size_t>(sampled[j])].cache = slots[j].res.theta;
            break;
        }
    }

    RoundReport report;
    report.round = t;
    report.sampled = sampled;

    if (fedtp) {
        GradMap phi_total;
        for (const auto& [name, p] : server_.phi) phi_total[name] = Tensor(p.shape);
        for (std::size_t j = 0; j < sampled.size(); ++j) {
            double w = prepared_[static_cast<std::size_t>(sampled[j])].n_train / mass;
            for (auto& [name, acc] : phi_total) {
                const Tensor& g = slots[j].grad_phi.at(name);
                for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += w * g.data[i];
            }
        }
        report.grad_phi_norm = grad_map_l2(phi_total);
        Tensor unused;
        apply_server_update(server_.phi, unused, phi_total, Tensor{}, cfg_.server_lr);
        for (std::size_t j = 0; j < sampled.size(); ++j) {
            double w = prepared_[static_cast<std::size_t>(sampled[j])].n_train / mass;
            Tensor gz = slots[j].grad_z;
            for (double& v : gz.data) v *= w;
            report.grad_z_norm.push_back(l2_norm(gz.data));
            if (!cfg_.strategy.freeze_embeddings) {
                apply_server_update(server_.phi, server_.embeddings[static_cast<std::size_t>(sampled[j])], GradMap{},
                                    gz, cfg_.server_lr);
            }
        }
    } else {
        report.grad_z_norm.assign(sampled.size(), 0.0);
    }

    server_.round = t;

    ParamPartition after = split_params(cfg_.model, server_.global);
    report.delta_xi_norm = param_set_l2(before.shared, after.shared);

    long correct_sum = 0, count_sum = 0;
    for (std::size_t j = 0; j < sampled.size(); ++j) {
        int id = sampled[j];
        report.train_loss.push_back(slots[j].res.mean_loss);
        double acc = client_test_accuracy(id, client_params(id));
        report.test_acc.push_back(acc);
        const PreparedClient& c = prepared_[static_cast<std::size_t>(id)];
        int positions = c.n_test * c.y_dim;
        correct_sum += std::lround(acc * positions);
        count_sum += positions;
    }
    report.weighted_mean_acc =
        count_sum > 0 ? static_cast<double>(correct_sum) / static_cast<double>(count_sum) : 0.0;
    report.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

void Federation::save_checkpoint(const std::string& path, const std::string& config_echo_json) const {
    ParamSet arrays;
    arrays["meta/round"] = Tensor::scalar(static_cast<double>(server_.round));
    for (const auto& [name, t] : server_.global) arrays["global/" + name] = t;
    for (const auto& [name, t] : server_.phi) arrays["hyper/" + name] = t;
    for (std::size_t i = 0; i < server_.embeddings.size(); ++i)
        arrays["embed/" + std::to_string(i)] = server_.embeddings[i];
    for (const auto& st : states_)
        for (const auto& [name, t] : st.cache) arrays["cache/" + std::to_string(st.id) + "/" + name] = t;
    save_named_arrays(path, arrays, config_echo_json);
}

void Federation::load_checkpoint(const std::string& path) {
    NamedArrayFile f = load_named_arrays(path);
    auto want = [&](const std::string& name) -> const Tensor& {
        auto it = f.arrays.find(name);
        if (it == f.arrays.end()) throw std::runtime_error("checkpoint '" + path + "' is missing array '" + name + "'");
        return it->second;
    };
    server_.round = static_cast<int>(std::lround(want("meta/round").data[0]));
    for (auto& [name, t] : server_.global) {
        const Tensor& src = want("global/" + name);
        if (src.shape != t.shape)
            throw std::runtime_error("checkpoint array 'global/" + name + "' shape does not match the model");
        t.data = src.data;
    }
    for (auto& [name, t] : server_.phi) t.data = want("hyper/" + name).data;
    for (std::size_t i = 0; i < server_.embeddings.size(); ++i)
        server_.embeddings[i].data = want("embed/" + std::to_string(i)).data;
    for (auto& st : states_)
        for (auto& [name, t] : st.cache) t.data = want("cache/" + std::to_string(st.id) + "/" + name).data;
}

FinetuneResult Federation::finetune_novel_client(const ClientData& novel, int epochs) const {
    if (cfg_.strategy.name != Strategy::fedtp)
        throw std::invalid_argument("finetune_novel_client: requires the fedtp strategy (no embeddings otherwise)");
    if (epochs < 0) throw std::invalid_argument("finetune_novel_client: epochs must be >= 0");
    PreparedClient prep = prepare_client(novel, cfg_.model);

    Tensor z({cfg_.hyper.embed_dim});
    for (const auto& e : server_.embeddings)
        for (std::size_t i = 0; i < z.data.size(); ++i) z.data[i] += e.data[i];
    for (double& v : z.data) v /= static_cast<double>(server_.embeddings.size());

    ParamPartition part = split_params(cfg_.model, server_.global);
    auto compose = [&](const Tensor& emb) {
        return merge_params(cfg_.model, hypernet_forward(server_.phi, emb, cfg_.hyper), part.shared);
    };
    auto accuracy = [&](const ParamSet& params) {
        const int chunk = 128;
        long correct = 0, total = 0;
        for (int off = 0; off < prep.n_test; off += chunk) {
            int bs = std::min(chunk, prep.n_test - off);
            std::vector<int> rows(static_cast<std::size_t>(bs));
            std::iota(rows.begin(), rows.end(), off);
            Batch b = make_batch(prep, cfg_.model, rows, false);
            ModelOutput out = model_forward(params, cfg_.model, b, false);
            int classes = cfg_.model.output_classes();
            std::size_t positions = out.logits.data.size() / static_cast<std::size_t>(classes);
            for (std::size_t p = 0; p < positions; ++p) {
                const double* row = out.logits.data.data() + p * static_cast<std::size_t>(classes);
                int best = 0;
                for (int j = 1; j < classes; ++j)
                    if (row[j] > row[best]) best = j;
                if (best == static_cast<int>(b.labels.data[p])) correct += 1;
                total += 1;
            }
        }
        return static_cast<double>(correct) / static_cast<double>(total);
    };

    FinetuneResult res;
    res.acc_before = accuracy(compose(z));
    ParamSet phi = server_.phi;  // frozen; local copy only for the VJP call
    for (int e = 1; e <= epochs; ++e) {
        ParamSet w0 = hypernet_forward(phi, z, cfg_.hyper);
        ParamSet theta0 = merge_params(cfg_.model, w0, part.shared);
        LocalTrainResult r = local_train(prep, theta0, cfg_.model, 1, cfg_.local_lr, cfg_.batch_size, cfg_.strategy,
                                         derive_seed(cfg_.seed, "novel"), e);
        ParamSet cot = r.delta_w;
        if (!cfg_.strategy.literal_paper_sign) {
            for (auto& [name, d] : cot) {
                (void)name;
                for (double& v : d.data) v = -v;
            }
        }
        auto [gphi, gz] = hypernet_grads(phi, z, cot, cfg_.hyper);
        (void)gphi;
        ParamSet no_phi;
        apply_server_update(no_phi, z, GradMap{}, gz, cfg_.server_lr);
    }
    res.acc_after = epochs == 0 ? res.acc_before : accuracy(compose(z));
    res.embedding = std::move(z);
    return res;
}

}  // namespace fedtp
