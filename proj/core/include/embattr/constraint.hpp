#pragma once

#include <span>

#include "embattr/network.hpp"
#include "embattr/scores.hpp"

namespace embattr {

// Score-constrained training loss configuration. Scores are computed with
// differentiable attribution stacks at `probe`, so the loss gradient runs
// through second derivatives of the network.
struct ConstraintCfg {
    double lambda1 = 0.0;  // noise-score weight
    double lambda2 = 0.0;  // variance-score weight
    int period = 20;       // apply score terms every `period` mini-batches
    int probe = 1;         // second conv block
    SaliencyMethod method = SaliencyMethod::ActivationsTimesGradients;
    Aggregator channel_agg = Aggregator::MeanAbs;
    Aggregator embedding_agg = Aggregator::MeanAbs;

    void validate() const;
    bool active() const { return lambda1 > 0.0 || lambda2 > 0.0; }
};

// L = L_rec + L_class - lambda1 * N(x, y_noise) - lambda2 * V(x)
// Reconstruction/classification terms follow the network's heads. Score
// terms are added only when apply_scores is set; with lambda1=lambda2=0 the
// branch is a complete no-op (no noise draw, no extra forward).
Tensor constrained_loss(Network& net, const Tensor& xb, std::span<const int> yb,
                        const ConstraintCfg& cfg, bool apply_scores, Rng& noise_rng);

}  // namespace embattr
