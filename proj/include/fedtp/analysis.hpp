#pragma once

#include <string>
#include <vector>

#include "fedtp/federation.hpp"
#include "fedtp/model.hpp"
#include "fedtp/tensor.hpp"

namespace fedtp {

// Per-patch saliency grid in [0,1]; max is exactly 1 unless the map is all
// zero.
struct AttentionMap {
    int grid_h = 0, grid_w = 0;
    std::vector<double> v;
    double& at(int y, int x) { return v[static_cast<std::size_t>(y) * grid_w + x]; }
    double at(int y, int x) const { return v[static_cast<std::size_t>(y) * grid_w + x]; }
};

struct RolloutOptions {
    bool filter_enabled = true;
    double filter_frac = 0.3;  // zero out the smallest floor(frac * m^2) entries
};

// In-place: zeroes the smallest floor(frac*m*m) entries of an m x m matrix,
// ties broken by index order. Returns how many entries were zeroed.
int filter_smallest(Tensor& mat, double frac);

// Depth rollout: per block, MAX across heads, 30% filter, residual identity
// with equal weight and row re-normalization, then matrix products through the
// blocks. The class-token row (or the row mean, without a class token) becomes
// the patch grid, min-max normalized.
AttentionMap attention_rollout(const AttentionTrace& trace, RolloutOptions opts = {});

// Mean pairwise L2 distance between maps on the same grid.
double map_divergence(const std::vector<AttentionMap>& maps);

void write_pgm(const std::string& path, const AttentionMap& map);

void export_metrics_csv(const std::string& path, const std::vector<RoundReport>& reports);
void export_metrics_jsonl(const std::string& path, const std::vector<RoundReport>& reports);
void export_embeddings_csv(const std::string& path, const std::vector<Tensor>& embeddings);

// metrics CSV + config echo + embeddings CSV + one PGM per map under
// run_dir/maps/
void export_artifacts(const std::string& run_dir, const std::vector<RoundReport>& reports,
                      const std::vector<Tensor>& embeddings, const std::vector<AttentionMap>& maps,
                      const std::string& config_echo_json);

}  // namespace fedtp
