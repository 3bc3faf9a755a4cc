#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "embattr/tensor.hpp"

namespace embattr {

// Var is the unbiased (n-1) sample variance. Population variance
// (E[X^2]-E[X]^2) is exposed separately; the variance *score* and the
// sparsity inequality use the population form, the Var aggregator the
// sample form.
enum class Aggregator { Mean, MeanAbs, Var };

const char* aggregator_name(Aggregator a);
std::optional<Aggregator> aggregator_from_name(const std::string& s);

double aggregate(std::span<const double> multiset, Aggregator a);  // throws on empty
double variance_population(std::span<const double> values);

// ---- plain 2-D maps (analysis / export) ----
struct Map2D {
    int h = 0, w = 0;
    std::vector<double> v;

    Map2D() = default;
    Map2D(int hh, int ww) : h(hh), w(ww), v(static_cast<std::size_t>(hh) * ww, 0.0) {}
    double& at(int i, int j) { return v[static_cast<std::size_t>(i) * w + j]; }
    double at(int i, int j) const { return v[static_cast<std::size_t>(i) * w + j]; }
};

// min-max to [0,1]; a constant map normalizes to all zeros
Map2D normalize(const Map2D& m);
// nearest-neighbor (floor index); exact block replication on integral factors
Map2D upscale(const Map2D& m, int out_h, int out_w);
// mean of the normalized map; abs_first for sign-carrying (Mean-aggregated) maps
double sparsity(const Map2D& m, bool abs_first = false);
Map2D binarize(const Map2D& m, double threshold);

// ---- differentiable pipeline pieces ----
// stack: one tensor per embedding dimension, each [B,C,H,W]
// channel aggregation C: [B,C,H,W] -> [B,1,H,W] per dimension
std::vector<Tensor> channel_aggregate(const std::vector<Tensor>& stack, Aggregator a);
// embedding aggregation E across dimensions: -> [B,1,H,W]
Tensor embedding_aggregate(const std::vector<Tensor>& per_dim, Aggregator a);
// per-sample min-max normalization over all non-batch axes; constant slices -> 0
Tensor normalize_per_sample(const Tensor& maps);

// extraction helpers
Map2D to_map(const Tensor& t, int sample = 0);  // [B,1,H,W] or [B,H,W] or [H,W]

}  // namespace embattr
