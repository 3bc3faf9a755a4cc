#include "embattr/synthdigits.hpp"

#include <algorithm>
#include <cmath>

#include "embattr/rng.hpp"

namespace embattr {

namespace {

struct Pt {
    double x, y;
};

using Stroke = std::vector<Pt>;

void bezier(Stroke& s, Pt p0, Pt p1, Pt p2, Pt p3, int n = 16) {
    for (int i = 0; i <= n; ++i) {
        const double t = static_cast<double>(i) / n, u = 1.0 - t;
        s.push_back({u * u * u * p0.x + 3 * u * u * t * p1.x + 3 * u * t * t * p2.x + t * t * t * p3.x,
                     u * u * u * p0.y + 3 * u * u * t * p1.y + 3 * u * t * t * p2.y + t * t * t * p3.y});
    }
}

Stroke line(Pt a, Pt b, int n = 8) {
    Stroke s;
    for (int i = 0; i <= n; ++i) {
        const double t = static_cast<double>(i) / n;
        s.push_back({a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)});
    }
    return s;
}

Stroke ellipse(double cx, double cy, double rx, double ry, double a0_deg = 0, double a1_deg = 360,
               int n = 28) {
    Stroke s;
    const double d2r = 3.14159265358979323846 / 180.0;
    for (int i = 0; i <= n; ++i) {
        const double a = (a0_deg + (a1_deg - a0_deg) * i / n) * d2r;
        s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
    }
    return s;
}

// skeletons in a unit box, x right / y down
std::vector<Stroke> digit_skeleton(int digit, Rng& rng) {
    std::vector<Stroke> strokes;
    switch (digit) {
        case 0:
            strokes.push_back(ellipse(0.50, 0.50, 0.21, 0.31));
            break;
        case 1: {
            strokes.push_back(line({0.52, 0.17}, {0.52, 0.84}));
            if (rng.uniform() < 0.7) strokes.push_back(line({0.38, 0.31}, {0.52, 0.17}, 4));
            break;
        }
        case 2: {
            Stroke top;
            bezier(top, {0.30, 0.34}, {0.30, 0.12}, {0.71, 0.10}, {0.70, 0.36});
            strokes.push_back(top);
            strokes.push_back(line({0.70, 0.36}, {0.30, 0.82}));
            strokes.push_back(line({0.30, 0.82}, {0.73, 0.82}, 6));
            break;
        }
        case 3: {
            Stroke up, lo;
            bezier(up, {0.32, 0.21}, {0.64, 0.14}, {0.68, 0.44}, {0.46, 0.49});
            bezier(lo, {0.46, 0.49}, {0.72, 0.53}, {0.66, 0.86}, {0.30, 0.79});
            strokes.push_back(up);
            strokes.push_back(lo);
            break;
        }
        case 4: {
            strokes.push_back(line({0.60, 0.16}, {0.25, 0.61}));
            strokes.push_back(line({0.25, 0.61}, {0.77, 0.61}, 6));
            strokes.push_back(line({0.62, 0.38}, {0.62, 0.85}));
            break;
        }
        case 5: {
            strokes.push_back(line({0.69, 0.17}, {0.33, 0.17}, 5));
            strokes.push_back(line({0.33, 0.17}, {0.31, 0.47}, 5));
            Stroke belly;
            bezier(belly, {0.31, 0.47}, {0.72, 0.40}, {0.74, 0.84}, {0.29, 0.78});
            strokes.push_back(belly);
            break;
        }
        case 6: {
            Stroke neck;
            bezier(neck, {0.66, 0.15}, {0.38, 0.25}, {0.30, 0.45}, {0.315, 0.62});
            strokes.push_back(neck);
            strokes.push_back(ellipse(0.49, 0.645, 0.175, 0.155));
            break;
        }
        case 7: {
            strokes.push_back(line({0.27, 0.20}, {0.73, 0.20}, 6));
            strokes.push_back(line({0.73, 0.20}, {0.43, 0.84}));
            if (rng.uniform() < 0.25) strokes.push_back(line({0.40, 0.52}, {0.62, 0.52}, 4));
            break;
        }
        case 8: {
            strokes.push_back(ellipse(0.50, 0.325, 0.165, 0.150));
            strokes.push_back(ellipse(0.50, 0.655, 0.195, 0.175));
            break;
        }
        case 9: {
            strokes.push_back(ellipse(0.51, 0.335, 0.175, 0.155));
            Stroke tail;
            bezier(tail, {0.685, 0.345}, {0.67, 0.58}, {0.61, 0.72}, {0.46, 0.85});
            strokes.push_back(tail);
            break;
        }
        default:
            break;
    }
    return strokes;
}

void render_sample(int digit, Rng& rng, const DigitStyle& style, std::uint8_t* out, int rows,
                   int cols) {
    auto strokes = digit_skeleton(digit, rng);

    // a slice of samples is rendered much harder: the ambiguous tail of the set
    DigitStyle st = style;
    if (rng.uniform() < style.hard_prob) {
        st.ctl_jitter *= 2.0;
        st.rot_sigma_deg *= 1.8;
        st.scale_sigma *= 1.6;
        st.shear_sigma *= 1.8;
        st.shift_sigma *= 1.5;
        st.wobble_amp *= 2.2;
        st.truncate_prob = 0.8;
        st.truncate_max = 0.45;
        st.blur_prob = 1.0;
        st.pixel_noise *= 1.5;
        st.thickness_lo = 0.03;
        st.thickness_hi = 0.12;
    }

    // per-sample distortion parameters
    const double d2r = 3.14159265358979323846 / 180.0;
    const double rot = rng.normal() * st.rot_sigma_deg * d2r;
    const double scale = std::exp(rng.normal() * st.scale_sigma);
    const double shear = rng.normal() * st.shear_sigma;
    const double dx = rng.normal() * st.shift_sigma;
    const double dy = rng.normal() * st.shift_sigma;
    const double wf1 = rng.uniform(0.8, 2.2), wf2 = rng.uniform(0.8, 2.2);
    const double wp1 = rng.uniform(0.0, 6.283), wp2 = rng.uniform(0.0, 6.283);
    const double ca = std::cos(rot), sa = std::sin(rot);
    const double thick = rng.uniform(st.thickness_lo, st.thickness_hi);
    const double ink = rng.uniform(st.ink_lo, st.ink_hi);

    // occasional stroke truncation: drop a fraction from one end
    for (auto& s : strokes) {
        if (s.size() < 6 || rng.uniform() >= st.truncate_prob) continue;
        const double frac = rng.uniform(0.0, st.truncate_max);
        const auto cut = static_cast<std::size_t>(frac * static_cast<double>(s.size()));
        if (cut == 0 || cut + 3 >= s.size()) continue;
        if (rng.uniform() < 0.5) s.erase(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(cut));
        else s.erase(s.end() - static_cast<std::ptrdiff_t>(cut), s.end());
    }

    for (auto& s : strokes) {
        for (auto& p : s) {
            p.x += rng.normal() * st.ctl_jitter;
            p.y += rng.normal() * st.ctl_jitter;
            p.x += st.wobble_amp * std::sin(6.283 * wf1 * p.y + wp1);
            p.y += st.wobble_amp * std::sin(6.283 * wf2 * p.x + wp2);
            double u = p.x - 0.5, v = p.y - 0.5;
            u += shear * v;
            const double ru = ca * u - sa * v, rv = sa * u + ca * v;
            p.x = 0.5 + scale * ru + dx;
            p.y = 0.5 + scale * rv + dy;
        }
    }

    // rasterize: distance to polylines with a soft edge
    const double px_scale = 24.0, px_off = 2.0;  // unit box -> ~20px content area
    const double t_px = thick * px_scale;
    const double aa_px = st.edge_soft * px_scale;
    std::vector<double> img(static_cast<std::size_t>(rows) * cols, 0.0);
    for (const auto& s : strokes) {
        for (std::size_t i = 0; i + 1 < s.size(); ++i) {
            const double ax = s[i].x * px_scale + px_off, ay = s[i].y * px_scale + px_off;
            const double bx = s[i + 1].x * px_scale + px_off, by = s[i + 1].y * px_scale + px_off;
            const double reach = t_px + aa_px + 0.5;
            const int y0 = std::max(0, static_cast<int>(std::floor(std::min(ay, by) - reach)));
            const int y1 = std::min(rows - 1, static_cast<int>(std::ceil(std::max(ay, by) + reach)));
            const int x0 = std::max(0, static_cast<int>(std::floor(std::min(ax, bx) - reach)));
            const int x1 = std::min(cols - 1, static_cast<int>(std::ceil(std::max(ax, bx) + reach)));
            const double ux = bx - ax, uy = by - ay;
            const double len2 = ux * ux + uy * uy;
            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) {
                    const double qx = x - ax, qy = y - ay;
                    double t = len2 > 0 ? (qx * ux + qy * uy) / len2 : 0.0;
                    t = std::clamp(t, 0.0, 1.0);
                    const double ex = qx - t * ux, ey = qy - t * uy;
                    const double d = std::sqrt(ex * ex + ey * ey);
                    const double v = std::clamp((t_px + aa_px - d) / (2.0 * aa_px), 0.0, 1.0);
                    double& cell = img[static_cast<std::size_t>(y) * cols + x];
                    cell = std::max(cell, v);
                }
            }
        }
    }
    if (rng.uniform() < st.blur_prob) {
        // separable 3x3 binomial blur
        std::vector<double> tmp(img.size(), 0.0);
        for (int y = 0; y < rows; ++y) {
            for (int x = 0; x < cols; ++x) {
                double acc = 2.0 * img[static_cast<std::size_t>(y) * cols + x];
                if (x > 0) acc += img[static_cast<std::size_t>(y) * cols + x - 1];
                if (x + 1 < cols) acc += img[static_cast<std::size_t>(y) * cols + x + 1];
                tmp[static_cast<std::size_t>(y) * cols + x] = acc / 4.0;
            }
        }
        for (int y = 0; y < rows; ++y) {
            for (int x = 0; x < cols; ++x) {
                double acc = 2.0 * tmp[static_cast<std::size_t>(y) * cols + x];
                if (y > 0) acc += tmp[static_cast<std::size_t>(y - 1) * cols + x];
                if (y + 1 < rows) acc += tmp[static_cast<std::size_t>(y + 1) * cols + x];
                img[static_cast<std::size_t>(y) * cols + x] = acc / 4.0;
            }
        }
    }

    for (std::size_t i = 0; i < img.size(); ++i) {
        double v = img[i] * ink;
        if (st.pixel_noise > 0) {
            const double w = v > 0.02 ? 1.0 : 0.15;  // grain lives mostly on strokes
            v += st.pixel_noise * w * rng.normal();
        }
        out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
}

}  // namespace

Dataset synth_digits(int count, std::uint64_t seed, const DigitStyle& style) {
    Dataset d;
    d.count = count;
    d.rows = 28;
    d.cols = 28;
    d.pixels.assign(static_cast<std::size_t>(count) * 28 * 28, 0);
    d.labels.resize(static_cast<std::size_t>(count));
    Rng base(seed);
    for (int i = 0; i < count; ++i) {
        Rng s = base.stream(static_cast<std::uint64_t>(i));
        const int digit = static_cast<int>(s.uniform_int(10));
        d.labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(digit);
        render_sample(digit, s, style, d.pixels.data() + static_cast<std::size_t>(i) * 28 * 28, 28, 28);
    }
    return d;
}

}  // namespace embattr
