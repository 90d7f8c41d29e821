#include "fedtp/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace fedtp {

int filter_smallest(Tensor& mat, double frac) {
    if (mat.rank() != 2 || mat.shape[0] != mat.shape[1])
        throw std::invalid_argument("filter_smallest: need a square matrix, got " + shape_str(mat.shape));
    int m = mat.shape[0];
    int count = static_cast<int>(std::floor(frac * m * m));
    if (count <= 0) return 0;
    std::vector<int> order(mat.data.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return mat.data[static_cast<std::size_t>(a)] < mat.data[static_cast<std::size_t>(b)];
    });
    for (int k = 0; k < count; ++k) mat.data[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = 0.0;
    return count;
}

AttentionMap attention_rollout(const AttentionTrace& trace, RolloutOptions opts) {
    if (trace.empty()) throw std::invalid_argument("attention_rollout: trace is empty");
    int m = trace.block_head_attn[0][0].shape[0];
    for (const auto& block : trace.block_head_attn) {
        if (block.empty()) throw std::invalid_argument("attention_rollout: a block has no heads");
        for (const auto& h : block)
            if (h.shape != Shape{m, m})
                throw std::invalid_argument("attention_rollout: inconsistent attention shapes");
    }

    Tensor rolled({m, m});
    for (int i = 0; i < m; ++i) rolled.at2(i, i) = 1.0;

    for (const auto& block : trace.block_head_attn) {
        Tensor a = block[0];
        for (std::size_t h = 1; h < block.size(); ++h)
            for (std::size_t p = 0; p < a.data.size(); ++p) a.data[p] = std::max(a.data[p], block[h].data[p]);
        if (opts.filter_enabled) filter_smallest(a, opts.filter_frac);
        // residual path: equal-weight identity, rows re-normalized
        for (int i = 0; i < m; ++i) {
            a.at2(i, i) += 1.0;
            double sum = 0.0;
            for (int j = 0; j < m; ++j) sum += a.at2(i, j);
            if (sum > 0.0)
                for (int j = 0; j < m; ++j) a.at2(i, j) /= sum;
        }
        Tensor next({m, m});
        for (int i = 0; i < m; ++i)
            for (int k = 0; k < m; ++k) {
                double av = a.at2(i, k);
                if (av == 0.0) continue;
                for (int j = 0; j < m; ++j) next.at2(i, j) += av * rolled.at2(k, j);
            }
        rolled = std::move(next);
    }

    std::vector<double> row;
    if (trace.has_cls) {
        row.assign(m - 1, 0.0);
        for (int j = 1; j < m; ++j) row[static_cast<std::size_t>(j - 1)] = rolled.at2(0, j);
    } else {
        row.assign(m, 0.0);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) row[static_cast<std::size_t>(j)] += rolled.at2(i, j) / m;
    }

    int cells = static_cast<int>(row.size());
    AttentionMap map;
    int g = trace.grid;
    if (g <= 0 || g * g != cells) g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(cells))));
    if (g >= 1 && g * g == cells) {
        map.grid_h = map.grid_w = g;
    } else {
        map.grid_h = 1;
        map.grid_w = cells;
    }

    double lo = row[0], hi = row[0];
    for (double v : row) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    map.v.resize(row.size());
    if (hi > lo) {
        for (std::size_t i = 0; i < row.size(); ++i) map.v[i] = (row[i] - lo) / (hi - lo);
    } else if (hi > 0.0) {
        std::fill(map.v.begin(), map.v.end(), 1.0);  // constant positive maps normalize to all-1
    } else {
        std::fill(map.v.begin(), map.v.end(), 0.0);
    }
    return map;
}

double map_divergence(const std::vector<AttentionMap>& maps) {
    if (maps.size() < 2) throw std::invalid_argument("map_divergence: need at least two maps");
    for (const auto& m : maps)
        if (m.grid_h != maps[0].grid_h || m.grid_w != maps[0].grid_w)
            throw std::invalid_argument("map_divergence: grid sizes differ");
    double total = 0.0;
    int pairs = 0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        for (std::size_t j = i + 1; j < maps.size(); ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < maps[i].v.size(); ++p) {
                double d = maps[i].v[p] - maps[j].v[p];
                s += d * d;
            }
            total += std::sqrt(s);
            pairs += 1;
        }
    }
    return total / pairs;
}

void write_pgm(const std::string& path, const AttentionMap& map) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    os << "P5\n" << map.grid_w << " " << map.grid_h << "\n255\n";
    for (double v : map.v) {
        int byte = static_cast<int>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
        os.put(static_cast<char>(byte));
    }
    if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

void export_metrics_csv(const std::string& path, const std::vector<RoundReport>& reports) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    os << "round,client_id,train_loss,test_acc,weighted_acc\n";
    os.precision(17);
    for (const auto& r : reports) {
        for (std::size_t j = 0; j < r.sampled.size(); ++j) {
            os << r.round << "," << r.sampled[j] << "," << r.train_loss[j] << "," << r.test_acc[j] << ","
               << r.weighted_mean_acc << "\n";
        }
    }
    if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

void export_metrics_jsonl(const std::string& path, const std::vector<RoundReport>& reports) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    for (const auto& r : reports) {
        nlohmann::json j;
        j["round"] = r.round;
        j["sampled"] = r.sampled;
        j["train_loss"] = r.train_loss;
        j["test_acc"] = r.test_acc;
        j["weighted_mean_acc"] = r.weighted_mean_acc;
        j["delta_xi_norm"] = r.delta_xi_norm;
        j["grad_phi_norm"] = r.grad_phi_norm;
        j["grad_z_norm"] = r.grad_z_norm;
        j["wall_clock_s"] = r.wall_clock_s;
        os << j.dump() << "\n";
    }
    if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

void export_embeddings_csv(const std::string& path, const std::vector<Tensor>& embeddings) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    os << "client_id";
    std::size_t dim = embeddings.empty() ? 0 : embeddings[0].data.size();
    for (std::size_t i = 0; i < dim; ++i) os << ",e" << i;
    os << "\n";
    os.precision(17);
    for (std::size_t c = 0; c < embeddings.size(); ++c) {
        os << c;
        for (double v : embeddings[c].data) os << "," << v;
        os << "\n";
    }
    if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

void export_artifacts(const std::string& run_dir, const std::vector<RoundReport>& reports,
                      const std::vector<Tensor>& embeddings, const std::vector<AttentionMap>& maps,
                      const std::string& config_echo_json) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(run_dir, ec);
    if (ec) throw std::runtime_error("cannot create run directory '" + run_dir + "': " + ec.message());

    export_metrics_csv(run_dir + "/metrics.csv", reports);
    export_metrics_jsonl(run_dir + "/metrics.jsonl", reports);
    {
        std::ofstream os(run_dir + "/config.json", std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open '" + run_dir + "/config.json' for writing");
        os << config_echo_json << "\n";
    }
    if (!embeddings.empty()) export_embeddings_csv(run_dir + "/embeddings.csv", embeddings);
    if (!maps.empty()) {
        fs::create_directories(run_dir + "/maps", ec);
        if (ec) throw std::runtime_error("cannot create '" + run_dir + "/maps': " + ec.message());
        for (std::size_t i = 0; i < maps.size(); ++i)
            write_pgm(run_dir + "/maps/client" + std::to_string(i) + ".pgm", maps[i]);
    }
}

}  // namespace fedtp
