#include "embattr/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace embattr {

const char* aggregator_name(Aggregator a) {
    switch (a) {
        case Aggregator::Mean: return "mean";
        case Aggregator::MeanAbs: return "abs";
        case Aggregator::Var: return "var";
    }
    return "?";
}

std::optional<Aggregator> aggregator_from_name(const std::string& s) {
    if (s == "mean") return Aggregator::Mean;
    if (s == "abs" || s == "meanabs" || s == "mean_abs") return Aggregator::MeanAbs;
    if (s == "var" || s == "variance") return Aggregator::Var;
    return std::nullopt;
}

double aggregate(std::span<const double> multiset, Aggregator a) {
    const std::size_t n = multiset.size();
    if (n == 0) throw std::invalid_argument("aggregate: empty multiset");
    switch (a) {
        case Aggregator::Mean: {
            double s = 0;
            for (double v : multiset) s += v;
            return s / static_cast<double>(n);
        }
        case Aggregator::MeanAbs: {
            double s = 0;
            for (double v : multiset) s += std::abs(v);
            return s / static_cast<double>(n);
        }
        case Aggregator::Var: {
            if (n == 1) return 0.0;
            double s = 0;
            for (double v : multiset) s += v;
            const double m = s / static_cast<double>(n);
            double ss = 0;
            for (double v : multiset) ss += (v - m) * (v - m);
            return ss / static_cast<double>(n - 1);
        }
    }
    throw std::logic_error("aggregate: unknown aggregator");
}

double variance_population(std::span<const double> values) {
    const std::size_t n = values.size();
    if (n == 0) throw std::invalid_argument("variance_population: empty multiset");
    double s = 0;
    for (double v : values) s += v;
    const double m = s / static_cast<double>(n);
    double ss = 0;
    for (double v : values) ss += (v - m) * (v - m);
    return ss / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// plain maps

Map2D normalize(const Map2D& m) {
    Map2D out(m.h, m.w);
    if (m.v.empty()) return out;
    double lo = m.v[0], hi = m.v[0];
    for (double v : m.v) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi == lo) return out;  // constant map -> zeros
    const double inv = 1.0 / (hi - lo);
    for (std::size_t i = 0; i < m.v.size(); ++i) out.v[i] = (m.v[i] - lo) * inv;
    return out;
}

Map2D upscale(const Map2D& m, int out_h, int out_w) {
    if (out_h < m.h || out_w < m.w)
        throw std::invalid_argument("upscale: target " + std::to_string(out_h) + "x" +
                                    std::to_string(out_w) + " smaller than source " +
                                    std::to_string(m.h) + "x" + std::to_string(m.w));
    Map2D out(out_h, out_w);
    for (int i = 0; i < out_h; ++i) {
        const int si = static_cast<int>(static_cast<std::int64_t>(i) * m.h / out_h);
        for (int j = 0; j < out_w; ++j) {
            const int sj = static_cast<int>(static_cast<std::int64_t>(j) * m.w / out_w);
            out.at(i, j) = m.at(si, sj);
        }
    }
    return out;
}

double sparsity(const Map2D& m, bool abs_first) {
    Map2D base = m;
    if (abs_first)
        for (auto& v : base.v) v = std::abs(v);
    Map2D n = normalize(base);
    double s = 0;
    for (double v : n.v) s += v;
    return n.v.empty() ? 0.0 : s / static_cast<double>(n.v.size());
}

Map2D binarize(const Map2D& m, double threshold) {
    Map2D out(m.h, m.w);
    for (std::size_t i = 0; i < m.v.size(); ++i) out.v[i] = m.v[i] >= threshold ? 1.0 : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// differentiable pipeline

namespace {

Tensor var_over_channel_axis(const Tensor& x) {
    // unbiased sample variance along axis 1 of [B,C,H,W]
    const std::int64_t c = x.dim(1);
    if (c == 1) return Tensor::zeros({x.dim(0), 1, x.dim(2), x.dim(3)});
    Tensor m = mean(x, {1}, true);
    Tensor ss = sum(square(sub(x, m)), {1}, true);
    return div(ss, static_cast<double>(c - 1));
}

}  // namespace

std::vector<Tensor> channel_aggregate(const std::vector<Tensor>& stack, Aggregator a) {
    std::vector<Tensor> out;
    out.reserve(stack.size());
    for (const auto& t : stack) {
        if (t.ndim() != 4)
            throw std::invalid_argument("channel_aggregate: expected [B,C,H,W], got " +
                                        shape_str(t.shape()));
        switch (a) {
            case Aggregator::Mean: out.push_back(mean(t, {1}, true)); break;
            case Aggregator::MeanAbs: out.push_back(mean(abs(t), {1}, true)); break;
            case Aggregator::Var: out.push_back(var_over_channel_axis(t)); break;
        }
    }
    return out;
}

Tensor embedding_aggregate(const std::vector<Tensor>& per_dim, Aggregator a) {
    if (per_dim.empty()) throw std::invalid_argument("embedding_aggregate: empty stack");
    const std::size_t n = per_dim.size();
    switch (a) {
        case Aggregator::Mean: {
            Tensor s = per_dim[0];
            for (std::size_t i = 1; i < n; ++i) s = add(s, per_dim[i]);
            return div(s, static_cast<double>(n));
        }
        case Aggregator::MeanAbs: {
            Tensor s = abs(per_dim[0]);
            for (std::size_t i = 1; i < n; ++i) s = add(s, abs(per_dim[i]));
            return div(s, static_cast<double>(n));
        }
        case Aggregator::Var: {
            if (n == 1) return Tensor::zeros(per_dim[0].shape());
            Tensor s = per_dim[0];
            for (std::size_t i = 1; i < n; ++i) s = add(s, per_dim[i]);
            Tensor m = div(s, static_cast<double>(n));
            Tensor ss = square(sub(per_dim[0], m));
            for (std::size_t i = 1; i < n; ++i) ss = add(ss, square(sub(per_dim[i], m)));
            return div(ss, static_cast<double>(n - 1));
        }
    }
    throw std::logic_error("embedding_aggregate: unknown aggregator");
}

Tensor normalize_per_sample(const Tensor& maps) {
    if (maps.ndim() < 2)
        throw std::invalid_argument("normalize_per_sample: expected batched maps, got " +
                                    shape_str(maps.shape()));
    std::vector<int> axes;
    for (std::size_t i = 1; i < maps.ndim(); ++i) axes.push_back(static_cast<int>(i));
    Tensor lo = reduce_min(maps, axes, true);
    Tensor hi = reduce_max(maps, axes, true);
    Tensor range = sub(hi, lo);
    // constant slices: zero output, no gradient through the degenerate division
    auto rd = range.data();
    std::vector<double> mask(rd.size()), safe(rd.size());
    for (std::size_t i = 0; i < rd.size(); ++i) {
        const bool ok = rd[i] > 0.0;
        mask[i] = ok ? 1.0 : 0.0;
        safe[i] = ok ? 0.0 : 1.0;
    }
    Tensor mask_t = Tensor::from(range.shape(), std::move(mask));
    Tensor safe_t = Tensor::from(range.shape(), std::move(safe));
    return mul(div(sub(maps, lo), add(range, safe_t)), mask_t);
}

Map2D to_map(const Tensor& t, int sample) {
    std::int64_t h = 0, w = 0, off = 0;
    if (t.ndim() == 4 && t.dim(1) == 1) {
        h = t.dim(2);
        w = t.dim(3);
        off = sample * h * w;
    } else if (t.ndim() == 3) {
        h = t.dim(1);
        w = t.dim(2);
        off = sample * h * w;
    } else if (t.ndim() == 2 && sample == 0) {
        h = t.dim(0);
        w = t.dim(1);
    } else {
        throw std::invalid_argument("to_map: unsupported shape " + shape_str(t.shape()));
    }
    Map2D m(static_cast<int>(h), static_cast<int>(w));
    auto d = t.data();
    std::copy(d.begin() + off, d.begin() + off + h * w, m.v.begin());
    return m;
}

}  // namespace embattr
