#include "embattr/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>

namespace embattr {

namespace {

std::vector<double> ranks_avg_ties(std::span<const double> v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace

double spearman(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size())
        throw std::invalid_argument("spearman: length mismatch " + std::to_string(xs.size()) + " vs " +
                                    std::to_string(ys.size()));
    if (xs.size() < 2) throw std::invalid_argument("spearman: need at least 2 pairs");
    const auto rx = ranks_avg_ties(xs);
    const auto ry = ranks_avg_ties(ys);
    const double n = static_cast<double>(xs.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0 || syy == 0) return std::nan("");  // zero rank variance
    return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// drift

DriftResult run_drift(Network& net, const Dataset& data, const DriftSpec& spec,
                      const ScoreConfig& score_cfg) {
    if (spec.samples < 1) throw std::invalid_argument("run_drift: samples must be >= 1");
    if (spec.samples > data.count)
        throw std::invalid_argument("run_drift: dataset has only " + std::to_string(data.count) +
                                    " samples");
    std::vector<double> grid = spec.lambda_grid;
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    if (grid.empty() || grid.front() != 0.0) grid.insert(grid.begin(), 0.0);  // identity reference

    const int S = spec.samples;
    const int h = data.rows, w = data.cols;
    const std::int64_t px = static_cast<std::int64_t>(h) * w;

    // one shift direction per sample, shared across the grid
    Rng base(spec.seed);
    std::vector<std::vector<double>> shift(static_cast<std::size_t>(S));
    for (int j = 0; j < S; ++j) {
        Rng rs = base.stream(static_cast<std::uint64_t>(j));
        shift[static_cast<std::size_t>(j)].resize(static_cast<std::size_t>(px));
        for (auto& v : shift[static_cast<std::size_t>(j)]) v = rs.normal();
    }
    // per-sample noise-score inputs, fixed across the grid (paired scores)
    Rng score_base(score_cfg.seed);
    std::vector<std::vector<double>> noise(static_cast<std::size_t>(S));
    for (int j = 0; j < S; ++j) {
        Rng rn = score_base.stream(static_cast<std::uint64_t>(2 * j));
        noise[static_cast<std::size_t>(j)].resize(static_cast<std::size_t>(px));
        for (auto& v : noise[static_cast<std::size_t>(j)]) v = rn.uniform();
    }

    std::vector<int> idx(static_cast<std::size_t>(S));
    std::iota(idx.begin(), idx.end(), 0);
    Tensor clean = data.batch(idx);
    auto clean_d = clean.data();

    const int ih = static_cast<int>(net.input_shape[net.input_shape.size() - 2]);
    const int iw = static_cast<int>(net.input_shape[net.input_shape.size() - 1]);

    std::vector<double> nd;
    nd.reserve(static_cast<std::size_t>(S * px));
    for (int j = 0; j < S; ++j)
        nd.insert(nd.end(), noise[static_cast<std::size_t>(j)].begin(),
                  noise[static_cast<std::size_t>(j)].end());
    Tensor noise_b = Tensor::from(clean.shape(), std::move(nd));
    Tensor noise_maps = attribution_maps(net, noise_b, spec.probe, score_cfg);

    // per-lambda noise scores for every sample
    std::vector<std::vector<double>> scores(grid.size());
    for (std::size_t li = 0; li < grid.size(); ++li) {
        const double lam = grid[li];
        std::vector<double> xd(clean_d.begin(), clean_d.end());
        for (int j = 0; j < S; ++j) {
            double* row = xd.data() + static_cast<std::int64_t>(j) * px;
            const auto& sh = shift[static_cast<std::size_t>(j)];
            for (std::int64_t k = 0; k < px; ++k) {
                double v = row[k] + lam * sh[static_cast<std::size_t>(k)];
                if (spec.clamp01) v = std::clamp(v, 0.0, 1.0);
                row[k] = v;
            }
        }
        Tensor xb = Tensor::from(clean.shape(), std::move(xd));
        Tensor maps = attribution_maps(net, xb, spec.probe, score_cfg);
        auto ma = maps.data();
        auto mn = noise_maps.data();
        const std::int64_t n = maps.numel() / S;
        scores[li].resize(static_cast<std::size_t>(S));
        for (int j = 0; j < S; ++j) {
            double acc = 0;
            for (std::int64_t k = 0; k < n; ++k) acc += std::abs(ma[j * n + k] - mn[j * n + k]);
            scores[li][static_cast<std::size_t>(j)] = acc / static_cast<double>(n);
        }
    }

    DriftResult out;
    std::vector<char> keep(static_cast<std::size_t>(S), 1);
    for (int j = 0; j < S; ++j) {
        if (scores[0][static_cast<std::size_t>(j)] == 0.0) {
            keep[static_cast<std::size_t>(j)] = 0;
            ++out.excluded;
            std::cerr << "run_drift: sample " << j << " has zero reference noise score, excluded\n";
        }
    }
    const int kept = S - out.excluded;
    if (kept == 0) throw std::runtime_error("run_drift: all samples excluded (zero reference scores)");

    std::vector<double> lams, rels;
    for (std::size_t li = 0; li < grid.size(); ++li) {
        double rel_sum = 0, raw_sum = 0;
        for (int j = 0; j < S; ++j) {
            if (!keep[static_cast<std::size_t>(j)]) continue;
            const double ref = scores[0][static_cast<std::size_t>(j)];
            const double cur = scores[li][static_cast<std::size_t>(j)];
            rel_sum += (ref - cur) / ref;
            raw_sum += cur;
        }
        DriftRow row;
        row.lambda = grid[li];
        row.mean_rel_diff = rel_sum / kept;
        row.mean_raw_score = raw_sum / kept;
        out.rows.push_back(row);
        lams.push_back(row.lambda);
        rels.push_back(row.mean_rel_diff);
    }
    out.rho = spearman(rels, lams);
    return out;
}

// ---------------------------------------------------------------------------
// layer randomization

RandomizationResult run_layer_randomization(const Network& base, const Dataset& test,
                                            const ScoreConfig& score_cfg, std::uint64_t seed,
                                            int samples) {
    // single-layer targets are the convolutional feature layers (conv and
    // batchnorm); the embedding projection and heads are exercised by "all"
    std::vector<std::string> targets{"none"};
    for (const auto& l : base.trunk)
        if (l.spec.kind == LayerKind::Conv2d || l.spec.kind == LayerKind::Conv2dTransposed ||
            l.spec.kind == LayerKind::BatchNorm)
            targets.push_back(l.name);
    targets.push_back("all");

    std::vector<Tensor> xs;
    const int S = std::min(samples, test.count);
    for (int j = 0; j < S; ++j) xs.push_back(test.image(j));

    RandomizationResult out;
    std::vector<double> scores, accs;
    Rng base_rng(seed);
    for (std::size_t t = 0; t < targets.size(); ++t) {
        Network net = base.clone();
        if (targets[t] != "none") {
            Rng r = base_rng.stream(t);
            net.reinit_layer(targets[t], r);
        }
        const double acc = evaluate_accuracy(net, test);
        ScoreCurve curve = score_curve(net, xs, score_cfg);
        RandomizationRow row;
        row.layer = targets[t];
        row.avg_noise_score = avg_noise_score(curve);
        row.accuracy = acc;
        out.rows.push_back(row);
        scores.push_back(row.avg_noise_score);
        accs.push_back(row.accuracy);
    }
    out.rho = spearman(scores, accs);
    return out;
}

// ---------------------------------------------------------------------------
// variance curves

std::vector<VarianceCurveRow> run_variance_curves(Network& trained, Network& untrained,
                                                  const Dataset& data, const ScoreConfig& cfg) {
    const int S = std::min(cfg.samples, data.count);
    std::vector<Tensor> xs;
    for (int j = 0; j < S; ++j) xs.push_back(data.image(j));
    ScoreCurve ct = score_curve(trained, xs, cfg);
    ScoreCurve cu = score_curve(untrained, xs, cfg);
    if (ct.entries.size() != cu.entries.size())
        throw std::invalid_argument("run_variance_curves: probe sets differ between networks");
    std::vector<VarianceCurveRow> rows;
    for (std::size_t i = 0; i < ct.entries.size(); ++i)
        rows.push_back({ct.entries[i].probe, ct.entries[i].var_mean, cu.entries[i].var_mean});
    return rows;
}

// ---------------------------------------------------------------------------
// sparsity study

SparsityResult sparsity_study(Network& net, const Tensor& x_batch, const std::vector<int>& probes,
                              SaliencyMethod method) {
    const int h = static_cast<int>(net.input_shape[net.input_shape.size() - 2]);
    const int w = static_cast<int>(net.input_shape[net.input_shape.size() - 1]);
    const std::int64_t B = x_batch.dim(0);
    const Aggregator aggs[3] = {Aggregator::Mean, Aggregator::MeanAbs, Aggregator::Var};

    SparsityResult out;
    for (int p : probes) {
        AttributionStack stack = attribute_batch(net, x_batch, p, method, {});
        for (Aggregator c : aggs) {
            for (Aggregator e : aggs) {
                Tensor raw = stack_to_raw_maps(stack, c, e, h, w);
                double acc = 0;
                for (std::int64_t b = 0; b < B; ++b)
                    acc += sparsity(to_map(raw, static_cast<int>(b)), e == Aggregator::Mean);
                out.rows.push_back({p, method, c, e, acc / static_cast<double>(B)});
            }
        }
        // Appendix-style comparison: per-dimension maps normalized to [0,1],
        // then population-variance vs mean aggregation across dimensions
        std::vector<Tensor> ca = channel_aggregate(stack.per_dim, Aggregator::MeanAbs);
        const std::size_t N = ca.size();
        if (N >= 2) {
            for (std::int64_t b = 0; b < B; ++b) {
                std::vector<Map2D> dims(N);
                for (std::size_t i = 0; i < N; ++i)
                    dims[i] = normalize(to_map(ca[i], static_cast<int>(b)));
                const std::size_t n = dims[0].v.size();
                Map2D var_map(dims[0].h, dims[0].w), abs_map(dims[0].h, dims[0].w);
                for (std::size_t k = 0; k < n; ++k) {
                    std::vector<double> ms(N);
                    for (std::size_t i = 0; i < N; ++i) ms[i] = dims[i].v[k];
                    var_map.v[k] = variance_population(ms);
                    abs_map.v[k] = aggregate(ms, Aggregator::MeanAbs);
                }
                if (sparsity(var_map) > sparsity(abs_map)) out.var_sparser_than_abs = false;
            }
        }
    }
    return out;
}

}  // namespace embattr
