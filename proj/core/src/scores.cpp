#include "embattr/scores.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace embattr {

namespace {

std::vector<int> resolve_probes(const Network& net, const ScoreConfig& cfg) {
    if (!cfg.probes.empty()) return cfg.probes;
    std::vector<int> all(static_cast<std::size_t>(net.probe_count()));
    std::iota(all.begin(), all.end(), 0);
    return all;
}

Tensor noise_like(const Tensor& x, Rng rng) {
    return Tensor::uniform(x.shape(), 0.0, 1.0, rng);
}

Tensor stack_to_final_maps(const AttributionStack& stack, const ScoreConfig& cfg, int out_h,
                           int out_w) {
    return stack_to_maps(stack, cfg.channel_agg, cfg.embedding_agg, out_h, out_w);
}

std::vector<double> per_sample_mae(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("per_sample_mae: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    const std::int64_t B = a.dim(0);
    const std::int64_t n = a.numel() / B;
    auto pa = a.data();
    auto pb = b.data();
    std::vector<double> out(static_cast<std::size_t>(B), 0.0);
    for (std::int64_t s = 0; s < B; ++s) {
        double acc = 0;
        for (std::int64_t i = 0; i < n; ++i) acc += std::abs(pa[s * n + i] - pb[s * n + i]);
        out[static_cast<std::size_t>(s)] = acc / static_cast<double>(n);
    }
    return out;
}

// per-dimension channel-aggregated maps -> per-sample variance scores
std::vector<double> variance_from_stack(const AttributionStack& stack, const ScoreConfig& cfg) {
    if (stack.dims() < 2)
        throw std::invalid_argument("variance_score: needs an embedding of dimension >= 2, got " +
                                    std::to_string(stack.dims()));
    std::vector<Tensor> ca = channel_aggregate(stack.per_dim, cfg.channel_agg);
    const std::int64_t B = ca[0].dim(0);
    const std::int64_t n = ca[0].numel() / B;  // spatial positions
    const std::size_t N = ca.size();
    std::vector<std::span<const double>> maps(N);
    std::vector<Tensor> normed(N);
    for (std::size_t i = 0; i < N; ++i) {
        normed[i] = normalize_per_sample(ca[i]);
        if (cfg.binarize) {
            auto d = normed[i].data();
            std::vector<double> bin(d.size());
            for (std::size_t k = 0; k < d.size(); ++k) bin[k] = d[k] >= *cfg.binarize ? 1.0 : 0.0;
            normed[i] = Tensor::from(normed[i].shape(), std::move(bin));
        }
        maps[i] = normed[i].data();
    }
    std::vector<double> out(static_cast<std::size_t>(B), 0.0);
    for (std::int64_t s = 0; s < B; ++s) {
        double acc = 0;
        for (std::int64_t p = 0; p < n; ++p) {
            double sum = 0, sum2 = 0;
            for (std::size_t i = 0; i < N; ++i) {
                const double v = maps[i][s * n + p];
                sum += v;
                sum2 += v * v;
            }
            const double m = sum / static_cast<double>(N);
            acc += sum2 / static_cast<double>(N) - m * m;  // population variance
        }
        out[static_cast<std::size_t>(s)] = acc / static_cast<double>(n);
    }
    return out;
}

struct Stats {
    double mean = 0, stddev = 0;
};

Stats stats_of(const std::vector<double>& v) {
    Stats s;
    if (v.empty()) return s;
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    double acc = 0;
    for (double x : v) acc += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(acc / static_cast<double>(v.size()));
    return s;
}

}  // namespace

Tensor stack_to_raw_maps(const AttributionStack& stack, Aggregator channel_agg,
                         Aggregator embedding_agg, int out_h, int out_w) {
    std::vector<Tensor> ca = channel_aggregate(stack.per_dim, channel_agg);
    Tensor agg = embedding_aggregate(ca, embedding_agg);  // [B,1,Hp,Wp]
    return upsample_nearest(agg, out_h, out_w);
}

Tensor stack_to_maps(const AttributionStack& stack, Aggregator channel_agg,
                     Aggregator embedding_agg, int out_h, int out_w) {
    return normalize_per_sample(stack_to_raw_maps(stack, channel_agg, embedding_agg, out_h, out_w));
}

Tensor variance_score_term(const AttributionStack& stack, Aggregator channel_agg) {
    if (stack.dims() < 2)
        throw std::invalid_argument("variance_score_term: needs an embedding of dimension >= 2");
    std::vector<Tensor> ca = channel_aggregate(stack.per_dim, channel_agg);
    const double n = static_cast<double>(ca.size());
    std::vector<Tensor> normed(ca.size());
    for (std::size_t i = 0; i < ca.size(); ++i) normed[i] = normalize_per_sample(ca[i]);
    Tensor s = normed[0];
    Tensor s2 = square(normed[0]);
    for (std::size_t i = 1; i < normed.size(); ++i) {
        s = add(s, normed[i]);
        s2 = add(s2, square(normed[i]));
    }
    Tensor m = div(s, n);
    Tensor v = sub(div(s2, n), square(m));  // population variance per position
    return mean(v);
}

Tensor attribution_maps(Network& net, const Tensor& x, int probe, const ScoreConfig& cfg,
                        const AttributeOptions& aopts) {
    AttributionStack stack = attribute_batch(net, x, probe, cfg.method, aopts);
    const int h = static_cast<int>(net.input_shape[net.input_shape.size() - 2]);
    const int w = static_cast<int>(net.input_shape[net.input_shape.size() - 1]);
    return stack_to_final_maps(stack, cfg, h, w);
}

double noise_score(Network& net, const Tensor& x, int probe, const ScoreConfig& cfg,
                   std::uint64_t sample_stream) {
    Rng base(cfg.seed);
    Tensor xn = noise_like(x, base.stream(2 * sample_stream));
    Tensor mx = attribution_maps(net, x, probe, cfg);
    Tensor mn = attribution_maps(net, xn, probe, cfg);
    return per_sample_mae(mx, mn)[0];
}

double benchmark_score(Network& net, int probe, const ScoreConfig& cfg,
                       std::uint64_t sample_stream) {
    Shape s = net.input_shape;
    s.insert(s.begin(), 1);
    Rng base(cfg.seed);
    Rng rx = base.stream(2 * sample_stream);
    Rng ry = base.stream(2 * sample_stream + 1);
    Tensor xn = Tensor::uniform(s, 0.0, 1.0, rx);
    Tensor yn = Tensor::uniform(s, 0.0, 1.0, ry);
    Tensor my = attribution_maps(net, yn, probe, cfg);
    Tensor mn = attribution_maps(net, xn, probe, cfg);
    return per_sample_mae(my, mn)[0];
}

double variance_score(Network& net, const Tensor& x, int probe, const ScoreConfig& cfg) {
    AttributionStack stack = attribute_batch(net, x, probe, cfg.method, {});
    return variance_from_stack(stack, cfg)[0];
}

double noise_from_maps(const Map2D& a, const Map2D& b) {
    if (a.h != b.h || a.w != b.w)
        throw std::invalid_argument("noise_from_maps: map sizes differ");
    Map2D na = normalize(a), nb = normalize(b);
    double acc = 0;
    for (std::size_t i = 0; i < na.v.size(); ++i) acc += std::abs(na.v[i] - nb.v[i]);
    return na.v.empty() ? 0.0 : acc / static_cast<double>(na.v.size());
}

double variance_from_dim_maps(const std::vector<Map2D>& per_dim,
                              std::optional<double> binarize_threshold) {
    if (per_dim.size() < 2)
        throw std::invalid_argument("variance_from_dim_maps: need at least 2 dimension maps");
    const std::size_t n = per_dim[0].v.size();
    std::vector<Map2D> normed(per_dim.size());
    for (std::size_t i = 0; i < per_dim.size(); ++i) {
        if (per_dim[i].v.size() != n)
            throw std::invalid_argument("variance_from_dim_maps: map sizes differ");
        normed[i] = normalize(per_dim[i]);
        if (binarize_threshold) normed[i] = binarize(normed[i], *binarize_threshold);
    }
    double acc = 0;
    const double N = static_cast<double>(per_dim.size());
    for (std::size_t p = 0; p < n; ++p) {
        double sum = 0, sum2 = 0;
        for (const auto& m : normed) {
            sum += m.v[p];
            sum2 += m.v[p] * m.v[p];
        }
        const double mean = sum / N;
        acc += sum2 / N - mean * mean;
    }
    return acc / static_cast<double>(n);
}

ScoreCurve score_curve(Network& net, const std::vector<Tensor>& xs, const ScoreConfig& cfg) {
    if (xs.empty()) throw std::invalid_argument("score_curve: empty sample set");
    const std::vector<int> probes = resolve_probes(net, cfg);
    if (probes.empty()) throw std::invalid_argument("score_curve: network has no probes");

    // assemble batches: samples, per-sample noise, independent noise partners
    const std::int64_t S = static_cast<std::int64_t>(xs.size());
    Shape bs = net.input_shape;
    bs.insert(bs.begin(), S);
    std::vector<double> xd, nd, yd;
    xd.reserve(static_cast<std::size_t>(numel_of(bs)));
    Rng base(cfg.seed);
    for (std::int64_t j = 0; j < S; ++j) {
        const Tensor& x = xs[static_cast<std::size_t>(j)];
        if (x.numel() != numel_of(net.input_shape))
            throw std::invalid_argument("score_curve: sample " + std::to_string(j) + " has shape " +
                                        shape_str(x.shape()));
        auto d = x.data();
        xd.insert(xd.end(), d.begin(), d.end());
        Rng rn = base.stream(static_cast<std::uint64_t>(2 * j));
        Rng ry = base.stream(static_cast<std::uint64_t>(2 * j + 1));
        for (std::int64_t k = 0; k < x.numel(); ++k) nd.push_back(rn.uniform());
        for (std::int64_t k = 0; k < x.numel(); ++k) yd.push_back(ry.uniform());
    }
    Tensor xb = Tensor::from(bs, std::move(xd));
    Tensor nb = Tensor::from(bs, std::move(nd));
    Tensor yb = Tensor::from(bs, std::move(yd));

    const int h = static_cast<int>(net.input_shape[net.input_shape.size() - 2]);
    const int w = static_cast<int>(net.input_shape[net.input_shape.size() - 1]);

    ScoreCurve curve;
    curve.n_samples = static_cast<int>(S);
    for (int p : probes) {
        AttributionStack sx = attribute_batch(net, xb, p, cfg.method, {});
        Tensor mx = stack_to_final_maps(sx, cfg, h, w);
        Tensor mn = stack_to_final_maps(attribute_batch(net, nb, p, cfg.method, {}), cfg, h, w);
        Tensor my = stack_to_final_maps(attribute_batch(net, yb, p, cfg.method, {}), cfg, h, w);

        const auto noise = per_sample_mae(mx, mn);
        const auto bench = per_sample_mae(my, mn);
        const auto vs = variance_from_stack(sx, cfg);

        ScoreCurveEntry e;
        e.probe = p;
        const Stats sn = stats_of(noise), sb = stats_of(bench), sv = stats_of(vs);
        e.noise_mean = sn.mean;
        e.noise_std = sn.stddev;
        e.bench_mean = sb.mean;
        e.bench_std = sb.stddev;
        e.var_mean = sv.mean;
        e.var_std = sv.stddev;
        curve.entries.push_back(e);
    }
    return curve;
}

double avg_noise_score(const ScoreCurve& curve) {
    if (curve.entries.empty()) throw std::invalid_argument("avg_noise_score: empty curve");
    double s = 0;
    for (const auto& e : curve.entries) s += e.noise_mean;
    return s / static_cast<double>(curve.entries.size());
}

}  // namespace embattr
