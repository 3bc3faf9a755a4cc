#pragma once

#include <span>
#include <string>
#include <vector>

#include "embattr/dataset.hpp"
#include "embattr/models.hpp"
#include "embattr/scores.hpp"

namespace embattr {

// Spearman rank-order correlation, ties by average rank. NaN when either
// argument has zero rank variance.
double spearman(std::span<const double> xs, std::span<const double> ys);

// ---- dataset drift ----
struct DriftSpec {
    std::vector<double> lambda_grid{0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0};
    bool clamp01 = true;  // x + lambda*y leaves [0,1]; clamped back by default
    int samples = 25;
    int probe = 1;  // second conv block
    std::uint64_t seed = 0;
};

struct DriftRow {
    double lambda;
    double mean_rel_diff;   // mean of (N(x) - N(x_lambda)) / N(x)
    double mean_raw_score;  // mean of N(x_lambda)
};

struct DriftResult {
    std::vector<DriftRow> rows;  // sorted by lambda, always contains 0
    double rho = 0;              // spearman(mean_rel_diff, lambda)
    int excluded = 0;            // samples with N(x) == 0
};

DriftResult run_drift(Network& net, const Dataset& data, const DriftSpec& spec,
                      const ScoreConfig& score_cfg);

// ---- layer randomization ----
struct RandomizationRow {
    std::string layer;  // "none", trunk layer names, "all"
    double avg_noise_score;
    double accuracy;
};

struct RandomizationResult {
    std::vector<RandomizationRow> rows;
    double rho = 0;  // spearman(avg noise score, accuracy)
};

// Clones the trained base per row; non-target parameters stay bit-identical.
RandomizationResult run_layer_randomization(const Network& base, const Dataset& test,
                                            const ScoreConfig& score_cfg, std::uint64_t seed,
                                            int samples = 25);

// ---- variance curves (trained vs untrained) ----
struct VarianceCurveRow {
    int probe;
    double trained;
    double untrained;
};

std::vector<VarianceCurveRow> run_variance_curves(Network& trained, Network& untrained,
                                                  const Dataset& data, const ScoreConfig& cfg);

// ---- sparsity study ----
struct SparsityRow {
    int probe;
    SaliencyMethod method;
    Aggregator channel_agg;
    Aggregator embedding_agg;
    double sparsity;  // averaged over the batch
};

struct SparsityResult {
    std::vector<SparsityRow> rows;
    // population-variance vs mean-absolute aggregation over per-dimension
    // normalized maps, per probe: variance map is the sparser one
    bool var_sparser_than_abs = true;
};

SparsityResult sparsity_study(Network& net, const Tensor& x_batch, const std::vector<int>& probes,
                              SaliencyMethod method);

}  // namespace embattr
