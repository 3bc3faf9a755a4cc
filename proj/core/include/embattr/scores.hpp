#pragma once

#include <optional>
#include <vector>

#include "embattr/aggregation.hpp"
#include "embattr/network.hpp"
#include "embattr/saliency.hpp"

namespace embattr {

struct ScoreConfig {
    SaliencyMethod method = SaliencyMethod::ActivationsTimesGradients;
    Aggregator channel_agg = Aggregator::MeanAbs;
    Aggregator embedding_agg = Aggregator::MeanAbs;
    std::vector<int> probes;            // empty: all probes of the network
    std::uint64_t seed = 0;             // noise input streams
    std::optional<double> binarize;     // variance-score maps; 0.5 in the binarized variant
    int samples = 50;                   // curve averaging
};

// C -> E -> U on a stack, no normalization: [B,1,out_h,out_w]
Tensor stack_to_raw_maps(const AttributionStack& stack, Aggregator channel_agg,
                         Aggregator embedding_agg, int out_h, int out_w);
// C -> E -> U -> per-sample normalize (differentiable)
Tensor stack_to_maps(const AttributionStack& stack, Aggregator channel_agg,
                     Aggregator embedding_agg, int out_h, int out_w);
// differentiable variance-score scalar (population variance across dimensions
// of per-dimension normalized channel-aggregated maps, averaged)
Tensor variance_score_term(const AttributionStack& stack, Aggregator channel_agg);

// Fully aggregated, upscaled, per-sample-normalized maps A^p(x): [B,1,H,W]
// at input resolution. The building block of both scores.
Tensor attribution_maps(Network& net, const Tensor& x, int probe, const ScoreConfig& cfg,
                        const AttributeOptions& aopts = {});

// noise score N(x, x_noise): mean |A(x) - A(x_noise)| with x_noise ~ U(0,1)^d
// drawn from stream(cfg.seed, sample_stream). In [0,1].
double noise_score(Network& net, const Tensor& x, int probe, const ScoreConfig& cfg,
                   std::uint64_t sample_stream = 0);
// benchmark N0: both inputs independent noise. In [0,1].
double benchmark_score(Network& net, int probe, const ScoreConfig& cfg,
                       std::uint64_t sample_stream = 0);
// variance score V(x): mean over positions of the population variance across
// the N per-dimension channel-aggregated normalized maps. In [0, 1/4].
double variance_score(Network& net, const Tensor& x, int probe, const ScoreConfig& cfg);

// map-level entry points (score definitions on given maps; used by the
// property suites and shared by the network paths)
double noise_from_maps(const Map2D& a, const Map2D& b);  // normalizes each, then MAE
double variance_from_dim_maps(const std::vector<Map2D>& per_dim,
                              std::optional<double> binarize_threshold = std::nullopt);

struct ScoreCurveEntry {
    int probe = 0;
    double noise_mean = 0, noise_std = 0;
    double bench_mean = 0, bench_std = 0;
    double var_mean = 0, var_std = 0;
};
struct ScoreCurve {
    std::vector<ScoreCurveEntry> entries;
    int n_samples = 0;
};

// Per-probe averages over xs (population std); deterministic under cfg.seed.
ScoreCurve score_curve(Network& net, const std::vector<Tensor>& xs, const ScoreConfig& cfg);
double avg_noise_score(const ScoreCurve& curve);

}  // namespace embattr
