#include "embattr/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace embattr {

namespace {

using autograd::make_op;

std::vector<double> pad_spatial(const double* src, std::int64_t bc, std::int64_t h, std::int64_t w,
                                int pad) {
    const std::int64_t hp = h + 2 * pad, wp = w + 2 * pad;
    std::vector<double> out(static_cast<std::size_t>(bc * hp * wp), 0.0);
    for (std::int64_t p = 0; p < bc; ++p) {
        const double* s = src + p * h * w;
        double* d = out.data() + p * hp * wp;
        for (std::int64_t i = 0; i < h; ++i)
            std::memcpy(d + (i + pad) * wp + pad, s + i * w, sizeof(double) * static_cast<std::size_t>(w));
    }
    return out;
}

// y[b,co,oy,ox] = sum_{ci,ky,kx} w[co,ci,ky,kx] * xpad[b,ci,oy*S+ky,ox*S+kx]
std::vector<double> conv2d_raw(const double* px, std::int64_t B, std::int64_t Ci, std::int64_t H,
                               std::int64_t W, const double* pw, std::int64_t Co, int K, int S,
                               int P, std::int64_t Ho, std::int64_t Wo,
                               const double* bias = nullptr) {
    const std::int64_t Hp = H + 2 * P, Wp = W + 2 * P;
    std::vector<double> xp = pad_spatial(px, B * Ci, H, W, P);
    std::vector<double> out(static_cast<std::size_t>(B * Co * Ho * Wo), 0.0);
#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t co = 0; co < Co; ++co) {
            double* __restrict yplane = out.data() + (b * Co + co) * Ho * Wo;
            if (bias)
                for (std::int64_t i = 0; i < Ho * Wo; ++i) yplane[i] = bias[co];
            for (std::int64_t ci = 0; ci < Ci; ++ci) {
                const double* xplane = xp.data() + (b * Ci + ci) * Hp * Wp;
                const double* wplane = pw + (co * Ci + ci) * K * K;
                for (int ky = 0; ky < K; ++ky) {
                    for (int kx = 0; kx < K; ++kx) {
                        const double wv = wplane[ky * K + kx];
                        if (S == 1) {
                            for (std::int64_t oy = 0; oy < Ho; ++oy) {
                                const double* __restrict xrow = xplane + (oy + ky) * Wp + kx;
                                double* __restrict yrow = yplane + oy * Wo;
                                for (std::int64_t ox = 0; ox < Wo; ++ox) yrow[ox] += wv * xrow[ox];
                            }
                        } else {
                            for (std::int64_t oy = 0; oy < Ho; ++oy) {
                                const double* xrow = xplane + (oy * S + ky) * Wp + kx;
                                double* yrow = yplane + oy * Wo;
                                for (std::int64_t ox = 0; ox < Wo; ++ox) yrow[ox] += wv * xrow[ox * S];
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

// gx[b,ci,iy,ix] = sum_{co,ky,kx : oy=(iy+P-ky)/S, ox=(ix+P-kx)/S valid} gy[b,co,oy,ox]*w[co,ci,ky,kx]
std::vector<double> conv_dgrad_raw(const double* pgy, std::int64_t B, std::int64_t Co,
                                   std::int64_t Ho, std::int64_t Wo, const double* pw,
                                   std::int64_t Ci, int K, int S, int P, std::int64_t H,
                                   std::int64_t W) {
    std::vector<double> out(static_cast<std::size_t>(B * Ci * H * W), 0.0);
    if (S == 1 && P <= K - 1) {
        const int m = K - 1 - P;
        const std::int64_t Hop = Ho + 2 * m, Wop = Wo + 2 * m;
        std::vector<double> gyp = pad_spatial(pgy, B * Co, Ho, Wo, m);
#pragma omp parallel for collapse(2) schedule(static)
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t ci = 0; ci < Ci; ++ci) {
                double* __restrict gxplane = out.data() + (b * Ci + ci) * H * W;
                for (std::int64_t co = 0; co < Co; ++co) {
                    const double* gplane = gyp.data() + (b * Co + co) * Hop * Wop;
                    const double* wplane = pw + (co * Ci + ci) * K * K;
                    for (int ky = 0; ky < K; ++ky) {
                        for (int kx = 0; kx < K; ++kx) {
                            const double wv = wplane[(K - 1 - ky) * K + (K - 1 - kx)];
                            for (std::int64_t iy = 0; iy < H; ++iy) {
                                const double* __restrict grow = gplane + (iy + ky) * Wop + kx;
                                double* __restrict xrow = gxplane + iy * W;
                                for (std::int64_t ix = 0; ix < W; ++ix) xrow[ix] += wv * grow[ix];
                            }
                        }
                    }
                }
            }
        }
        return out;
    }
#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t ci = 0; ci < Ci; ++ci) {
            double* gxplane = out.data() + (b * Ci + ci) * H * W;
            for (std::int64_t iy = 0; iy < H; ++iy) {
                for (std::int64_t ix = 0; ix < W; ++ix) {
                    double acc = 0.0;
                    for (std::int64_t co = 0; co < Co; ++co) {
                        const double* gplane = pgy + (b * Co + co) * Ho * Wo;
                        const double* wplane = pw + (co * Ci + ci) * K * K;
                        for (int ky = 0; ky < K; ++ky) {
                            const std::int64_t ty = iy + P - ky;
                            if (ty < 0 || ty % S) continue;
                            const std::int64_t oy = ty / S;
                            if (oy >= Ho) continue;
                            for (int kx = 0; kx < K; ++kx) {
                                const std::int64_t tx = ix + P - kx;
                                if (tx < 0 || tx % S) continue;
                                const std::int64_t ox = tx / S;
                                if (ox >= Wo) continue;
                                acc += gplane[oy * Wo + ox] * wplane[ky * K + kx];
                            }
                        }
                    }
                    gxplane[iy * W + ix] = acc;
                }
            }
        }
    }
    return out;
}

// gw[co,ci,ky,kx] = sum_{b,oy,ox} gy[b,co,oy,ox] * xpad[b,ci,oy*S+ky,ox*S+kx]
std::vector<double> conv_wgrad_raw(const double* px, std::int64_t B, std::int64_t Ci,
                                   std::int64_t H, std::int64_t W, const double* pgy,
                                   std::int64_t Co, std::int64_t Ho, std::int64_t Wo, int K, int S,
                                   int P) {
    const std::int64_t Hp = H + 2 * P, Wp = W + 2 * P;
    std::vector<double> xp = pad_spatial(px, B * Ci, H, W, P);
    std::vector<double> out(static_cast<std::size_t>(Co * Ci * K * K), 0.0);
#pragma omp parallel for schedule(static)
    for (std::int64_t co = 0; co < Co; ++co) {
        for (std::int64_t ci = 0; ci < Ci; ++ci) {
            for (int ky = 0; ky < K; ++ky) {
                for (int kx = 0; kx < K; ++kx) {
                    double acc = 0.0;
                    for (std::int64_t b = 0; b < B; ++b) {
                        const double* gplane = pgy + (b * Co + co) * Ho * Wo;
                        const double* xplane = xp.data() + (b * Ci + ci) * Hp * Wp;
                        for (std::int64_t oy = 0; oy < Ho; ++oy) {
                            const double* __restrict grow = gplane + oy * Wo;
                            const double* __restrict xrow = xplane + (oy * S + ky) * Wp + kx;
                            if (S == 1) {
#pragma omp simd reduction(+ : acc)
                                for (std::int64_t ox = 0; ox < Wo; ++ox) acc += grow[ox] * xrow[ox];
                            } else {
                                for (std::int64_t ox = 0; ox < Wo; ++ox) acc += grow[ox] * xrow[ox * S];
                            }
                        }
                    }
                    out[static_cast<std::size_t>(((co * Ci + ci) * K + ky) * K + kx)] = acc;
                }
            }
        }
    }
    return out;
}

Tensor conv_dgrad_op(const Tensor& gy, const Tensor& w, int S, int P, std::int64_t H,
                     std::int64_t W);
Tensor conv_wgrad_op(const Tensor& x, const Tensor& gy, int S, int P, int K);

Tensor conv2d_impl(const Tensor& x, const Tensor& w, const Tensor* bias, int S, int P) {
    const std::int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Co = w.dim(0);
    const int K = static_cast<int>(w.dim(2));
    const std::int64_t Ho = (H + 2 * P - K) / S + 1;
    const std::int64_t Wo = (W + 2 * P - K) / S + 1;
    if (Ho < 1 || Wo < 1)
        throw std::invalid_argument("conv2d: kernel " + std::to_string(K) + " exceeds padded input " +
                                    shape_str(x.shape()));
    auto data = conv2d_raw(x.data().data(), B, Ci, H, W, w.data().data(), Co, K, S, P, Ho, Wo,
                           bias ? bias->data().data() : nullptr);
    if (!bias) {
        return make_op("conv2d", {B, Co, Ho, Wo}, std::move(data), {x, w},
                       [x, w, S, P, H, W, K](const Tensor& g) -> std::vector<Tensor> {
                           Tensor gx, gw;
                           if (autograd::parent_needed(x)) gx = conv_dgrad_op(g, w, S, P, H, W);
                           if (autograd::parent_needed(w)) gw = conv_wgrad_op(x, g, S, P, K);
                           return {gx, gw};
                       });
    }
    Tensor b = *bias;
    return make_op("conv2d_bias", {B, Co, Ho, Wo}, std::move(data), {x, w, b},
                   [x, w, b, S, P, H, W, K](const Tensor& g) -> std::vector<Tensor> {
                       Tensor gx, gw, gb;
                       if (autograd::parent_needed(x)) gx = conv_dgrad_op(g, w, S, P, H, W);
                       if (autograd::parent_needed(w)) gw = conv_wgrad_op(x, g, S, P, K);
                       if (autograd::parent_needed(b)) gb = sum(g, {0, 2, 3}, false);
                       return {gx, gw, gb};
                   });
}

Tensor conv_dgrad_op(const Tensor& gy, const Tensor& w, int S, int P, std::int64_t H,
                     std::int64_t W) {
    const std::int64_t B = gy.dim(0), Co = gy.dim(1), Ho = gy.dim(2), Wo = gy.dim(3);
    const std::int64_t Ci = w.dim(1);
    const int K = static_cast<int>(w.dim(2));
    auto data = conv_dgrad_raw(gy.data().data(), B, Co, Ho, Wo, w.data().data(), Ci, K, S, P, H, W);
    return make_op("conv_dgrad", {B, Ci, H, W}, std::move(data), {gy, w},
                   [gy, w, S, P, K](const Tensor& h) -> std::vector<Tensor> {
                       Tensor g_gy, g_w;
                       if (autograd::parent_needed(gy)) g_gy = conv2d_impl(h, w, nullptr, S, P);
                       if (autograd::parent_needed(w)) g_w = conv_wgrad_op(h, gy, S, P, K);
                       return {g_gy, g_w};
                   });
}

Tensor conv_wgrad_op(const Tensor& x, const Tensor& gy, int S, int P, int K) {
    const std::int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Co = gy.dim(1), Ho = gy.dim(2), Wo = gy.dim(3);
    auto data =
        conv_wgrad_raw(x.data().data(), B, Ci, H, W, gy.data().data(), Co, Ho, Wo, K, S, P);
    return make_op("conv_wgrad", {Co, Ci, K, K}, std::move(data), {x, gy},
                   [x, gy, S, P, H, W, K](const Tensor& m) -> std::vector<Tensor> {
                       Tensor g_x, g_gy;
                       if (autograd::parent_needed(x)) g_x = conv_dgrad_op(gy, m, S, P, H, W);
                       if (autograd::parent_needed(gy)) g_gy = conv2d_impl(x, m, nullptr, S, P);
                       return {g_x, g_gy};
                   });
}

// Fused batchnorm training forward. Saves xhat and inv_std; the backward
// uses the closed-form kernel under plain differentiation and rebuilds the
// expression from the parents when a differentiable gradient is requested.
Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                       std::vector<double>* mu_out, std::vector<double>* var_out) {
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t S = H * W;
    const double n = static_cast<double>(B * S);
    const double* px = x.data().data();
    const double* pg = gamma.data().data();
    const double* pb = beta.data().data();

    std::vector<double> mu(static_cast<std::size_t>(C), 0.0), var(static_cast<std::size_t>(C), 0.0);
    for (std::int64_t c = 0; c < C; ++c) {
        double acc = 0;
        for (std::int64_t b = 0; b < B; ++b) {
            const double* __restrict row = px + (b * C + c) * S;
#pragma omp simd reduction(+ : acc)
            for (std::int64_t i = 0; i < S; ++i) acc += row[i];
        }
        mu[static_cast<std::size_t>(c)] = acc / n;
    }
    for (std::int64_t c = 0; c < C; ++c) {
        const double m = mu[static_cast<std::size_t>(c)];
        double acc = 0;
        for (std::int64_t b = 0; b < B; ++b) {
            const double* __restrict row = px + (b * C + c) * S;
#pragma omp simd reduction(+ : acc)
            for (std::int64_t i = 0; i < S; ++i) acc += (row[i] - m) * (row[i] - m);
        }
        var[static_cast<std::size_t>(c)] = acc / n;
    }
    auto inv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c)
        (*inv)[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);

    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B * C * S));
    std::vector<double> out(static_cast<std::size_t>(B * C * S));
#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            const double m = mu[static_cast<std::size_t>(c)];
            const double iv = (*inv)[static_cast<std::size_t>(c)];
            const double ga = pg[c], be = pb[c];
            const double* __restrict row = px + (b * C + c) * S;
            double* __restrict ho = xhat->data() + (b * C + c) * S;
            double* __restrict yo = out.data() + (b * C + c) * S;
            for (std::int64_t i = 0; i < S; ++i) {
                const double h = (row[i] - m) * iv;
                ho[i] = h;
                yo[i] = h * ga + be;
            }
        }
    }
    if (mu_out) *mu_out = mu;
    if (var_out) *var_out = var;

    Shape xs = x.shape();
    return make_op(
        "batchnorm_train", x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, eps, inv, xhat, xs, B, C, S, n](const Tensor& g) -> std::vector<Tensor> {
            if (autograd::grad_enabled()) {
                // expression form, differentiable to any order
                Tensor mu_e = mean(x, {0, 2, 3}, true);
                Tensor xc_e = sub(x, mu_e);
                Tensor var_e = mean(square(xc_e), {0, 2, 3}, true);
                Tensor denom = sqrt(add(var_e, eps));
                Tensor xhat_e = div(xc_e, denom);
                Tensor g4 = reshape(gamma, {1, C, 1, 1});
                Tensor dxhat = mul(g, g4);
                Tensor m1 = mean(dxhat, {0, 2, 3}, true);
                Tensor m2 = mean(mul(dxhat, xhat_e), {0, 2, 3}, true);
                Tensor dx;
                if (autograd::parent_needed(x))
                    dx = div(sub(sub(dxhat, m1), mul(xhat_e, m2)), denom);
                Tensor dgamma, dbeta;
                if (autograd::parent_needed(gamma)) dgamma = sum(mul(g, xhat_e), {0, 2, 3}, false);
                if (autograd::parent_needed(beta)) dbeta = sum(g, {0, 2, 3}, false);
                return {dx, dgamma, dbeta};
            }
            const double* pg = g.data().data();
            const double* ph = xhat->data();
            std::vector<double> s1(static_cast<std::size_t>(C), 0.0),
                s2(static_cast<std::size_t>(C), 0.0);
            for (std::int64_t c = 0; c < C; ++c) {
                double a1 = 0, a2 = 0;
                for (std::int64_t b = 0; b < B; ++b) {
                    const double* __restrict gr = pg + (b * C + c) * S;
                    const double* __restrict hr = ph + (b * C + c) * S;
#pragma omp simd reduction(+ : a1, a2)
                    for (std::int64_t i = 0; i < S; ++i) {
                        a1 += gr[i];
                        a2 += gr[i] * hr[i];
                    }
                }
                s1[static_cast<std::size_t>(c)] = a1;
                s2[static_cast<std::size_t>(c)] = a2;
            }
            Tensor dx, dgamma, dbeta;
            if (autograd::parent_needed(x)) {
                auto dxv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B * C * S));
                const double* pga = gamma.data().data();
#pragma omp parallel for collapse(2) schedule(static)
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t c = 0; c < C; ++c) {
                        const double k = pga[c] * (*inv)[static_cast<std::size_t>(c)];
                        const double c1 = s1[static_cast<std::size_t>(c)] / n;
                        const double c2 = s2[static_cast<std::size_t>(c)] / n;
                        const double* __restrict gr = pg + (b * C + c) * S;
                        const double* __restrict hr = ph + (b * C + c) * S;
                        double* __restrict dr = dxv->data() + (b * C + c) * S;
                        for (std::int64_t i = 0; i < S; ++i) dr[i] = k * (gr[i] - c1 - hr[i] * c2);
                    }
                }
                dx = make_tensor(xs, std::move(dxv), nullptr);
            }
            if (autograd::parent_needed(gamma))
                dgamma = Tensor::from({C}, std::vector<double>(s2));
            if (autograd::parent_needed(beta)) dbeta = Tensor::from({C}, std::vector<double>(s1));
            return {dx, dgamma, dbeta};
        });
}

void check_conv_args(const char* op, const Tensor& x, const Tensor& w, int S, int P,
                     std::int64_t w_in_dim) {
    if (x.ndim() != 4)
        throw std::invalid_argument(std::string(op) + ": input must be [B,C,H,W], got " +
                                    shape_str(x.shape()));
    if (w.ndim() != 4)
        throw std::invalid_argument(std::string(op) + ": weight must be 4-D, got " +
                                    shape_str(w.shape()));
    if (w.dim(2) != w.dim(3))
        throw std::invalid_argument(std::string(op) + ": non-square kernel " + shape_str(w.shape()));
    if (x.dim(1) != w_in_dim)
        throw std::invalid_argument(std::string(op) + ": input channels " + std::to_string(x.dim(1)) +
                                    " do not match weight channels " + std::to_string(w_in_dim) +
                                    " (weight " + shape_str(w.shape()) + ")");
    if (S < 1 || P < 0)
        throw std::invalid_argument(std::string(op) + ": invalid stride/padding " + std::to_string(S) +
                                    "/" + std::to_string(P));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
    check_conv_args("conv2d", x, w, stride, padding, w.dim(1));
    return conv2d_impl(x, w, nullptr, stride, padding);
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding) {
    check_conv_args("conv2d", x, w, stride, padding, w.dim(1));
    if (bias.ndim() != 1 || bias.dim(0) != w.dim(0))
        throw std::invalid_argument("conv2d: bias shape " + shape_str(bias.shape()) +
                                    " does not match output channels " + std::to_string(w.dim(0)));
    return conv2d_impl(x, w, &bias, stride, padding);
}

Tensor conv2d_transposed(const Tensor& x, const Tensor& w, int stride, int padding) {
    check_conv_args("conv2d_transposed", x, w, stride, padding, w.dim(0));
    const int K = static_cast<int>(w.dim(2));
    const std::int64_t OH = (x.dim(2) - 1) * stride + K - 2 * padding;
    const std::int64_t OW = (x.dim(3) - 1) * stride + K - 2 * padding;
    if (OH < 1 || OW < 1)
        throw std::invalid_argument("conv2d_transposed: output would be empty for input " +
                                    shape_str(x.shape()));
    return conv_dgrad_op(x, w, stride, padding, OH, OW);
}

Tensor maxpool2d(const Tensor& x, int kernel, int stride, bool ceil_mode) {
    if (x.ndim() != 4)
        throw std::invalid_argument("maxpool2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
    if (kernel < 1 || stride < 1) throw std::invalid_argument("maxpool2d: kernel and stride must be >= 1");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto out_extent = [&](std::int64_t n) {
        std::int64_t o = ceil_mode ? (n - kernel + stride - 1) / stride + 1 : (n - kernel) / stride + 1;
        if (ceil_mode && (o - 1) * stride >= n) --o;  // last window must start inside
        return std::max<std::int64_t>(o, 1);
    };
    const std::int64_t Ho = out_extent(H), Wo = out_extent(W);
    const double* px = x.data().data();
    auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(B * C * Ho * Wo));
    std::size_t o = 0;
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* plane = px + bc * H * W;
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
            const std::int64_t y0 = oy * stride, y1 = std::min<std::int64_t>(y0 + kernel, H);
            for (std::int64_t ox = 0; ox < Wo; ++ox) {
                const std::int64_t x0 = ox * stride, x1 = std::min<std::int64_t>(x0 + kernel, W);
                std::int64_t best = y0 * W + x0;
                double bv = plane[best];
                for (std::int64_t yy = y0; yy < y1; ++yy)
                    for (std::int64_t xx = x0; xx < x1; ++xx)
                        if (plane[yy * W + xx] > bv) {
                            bv = plane[yy * W + xx];
                            best = yy * W + xx;
                        }
                (*idx)[o++] = bc * H * W + best;
            }
        }
    }
    return index_gather(x, idx, {B, C, Ho, Wo});
}

Tensor upsample_nearest(const Tensor& x, int out_h, int out_w) {
    if (x.ndim() != 4)
        throw std::invalid_argument("upsample_nearest: input must be [B,C,H,W], got " +
                                    shape_str(x.shape()));
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (out_h < H || out_w < W)
        throw std::invalid_argument("upsample_nearest: target " + std::to_string(out_h) + "x" +
                                    std::to_string(out_w) + " smaller than source " +
                                    std::to_string(H) + "x" + std::to_string(W));
    auto idx = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::size_t>(B * C * out_h * out_w));
    std::size_t o = 0;
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const std::int64_t base = bc * H * W;
        for (std::int64_t oy = 0; oy < out_h; ++oy) {
            const std::int64_t sy = oy * H / out_h;
            for (std::int64_t ox = 0; ox < out_w; ++ox) {
                const std::int64_t sx = ox * W / out_w;
                (*idx)[o++] = base + sy * W + sx;
            }
        }
    }
    return index_gather(x, idx, {B, C, out_h, out_w});
}

Tensor loss_mse(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape())
        throw std::invalid_argument("loss_mse: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                    shape_str(target.shape()));
    return mean(square(sub(pred, target)));
}

Tensor loss_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    if (logits.ndim() != 2)
        throw std::invalid_argument("loss_cross_entropy: logits must be [B,K], got " +
                                    shape_str(logits.shape()));
    const std::int64_t B = logits.dim(0), K = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != B)
        throw std::invalid_argument("loss_cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for batch " + std::to_string(B));
    auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(B));
    for (std::int64_t i = 0; i < B; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= K)
            throw std::invalid_argument("loss_cross_entropy: label " + std::to_string(y) +
                                        " out of range [0," + std::to_string(K) + ")");
        (*idx)[static_cast<std::size_t>(i)] = i * K + y;
    }
    Tensor picked = index_gather(logits, idx, {B});
    return mean(sub(logsumexp_rows(logits), picked));
}

// ---------------------------------------------------------------------------
// LayerSpec

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv2d: return "conv2d";
        case LayerKind::Conv2dTransposed: return "conv2d_transposed";
        case LayerKind::Linear: return "linear";
        case LayerKind::BatchNorm: return "batchnorm";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::UpsampleNN: return "upsample_nn";
        case LayerKind::ReLU: return "relu";
        case LayerKind::Softplus: return "softplus";
        case LayerKind::Sigmoid: return "sigmoid";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::CenterCrop: return "center_crop";
    }
    return "?";
}

LayerSpec LayerSpec::conv2d(int u, int k, int s, int p) {
    return {LayerKind::Conv2d, u, k, s, p};
}
LayerSpec LayerSpec::conv2d_transposed(int u, int k, int s, int p) {
    return {LayerKind::Conv2dTransposed, u, k, s, p};
}
LayerSpec LayerSpec::linear(int u) { return {LayerKind::Linear, u}; }
LayerSpec LayerSpec::batchnorm() { return {LayerKind::BatchNorm}; }
LayerSpec LayerSpec::maxpool(int k, bool ceil_mode) {
    LayerSpec s{LayerKind::MaxPool, 0, k, k, 0};
    s.ceil_mode = ceil_mode;
    return s;
}
LayerSpec LayerSpec::upsample_x2() { return {LayerKind::UpsampleNN}; }
LayerSpec LayerSpec::relu() { return {LayerKind::ReLU}; }
LayerSpec LayerSpec::softplus() { return {LayerKind::Softplus}; }
LayerSpec LayerSpec::sigmoid_out() { return {LayerKind::Sigmoid}; }
LayerSpec LayerSpec::flatten() { return {LayerKind::Flatten}; }
LayerSpec LayerSpec::center_crop(int h, int w) {
    LayerSpec s{LayerKind::CenterCrop};
    s.out_h = h;
    s.out_w = w;
    return s;
}

void LayerSpec::validate() const {
    const bool needs_units = kind == LayerKind::Conv2d || kind == LayerKind::Conv2dTransposed ||
                             kind == LayerKind::Linear;
    if (needs_units && units < 1)
        throw std::invalid_argument(std::string(layer_kind_name(kind)) + ": units must be >= 1");
    if (kernel < 1 || stride < 1 || padding < 0)
        throw std::invalid_argument(std::string(layer_kind_name(kind)) +
                                    ": require K,S >= 1 and P >= 0, got K=" + std::to_string(kernel) +
                                    " S=" + std::to_string(stride) + " P=" + std::to_string(padding));
}

// ---------------------------------------------------------------------------
// Layer

bool Layer::has_params() const {
    return spec.kind == LayerKind::Conv2d || spec.kind == LayerKind::Conv2dTransposed ||
           spec.kind == LayerKind::Linear || spec.kind == LayerKind::BatchNorm;
}

std::vector<std::pair<std::string, Tensor*>> Layer::named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    switch (spec.kind) {
        case LayerKind::Conv2d:
        case LayerKind::Conv2dTransposed:
        case LayerKind::Linear:
            out.emplace_back(name + ".weight", &weight);
            out.emplace_back(name + ".bias", &bias);
            break;
        case LayerKind::BatchNorm:
            out.emplace_back(name + ".gamma", &gamma);
            out.emplace_back(name + ".beta", &beta);
            break;
        default:
            break;
    }
    return out;
}

std::vector<std::pair<std::string, Tensor*>> Layer::named_state() {
    auto out = named_params();
    if (spec.kind == LayerKind::BatchNorm) {
        out.emplace_back(name + ".running_mean", &running_mean);
        out.emplace_back(name + ".running_var", &running_var);
    }
    return out;
}

void Layer::init(const Shape& in, Rng& rng) {
    spec.validate();
    in_shape = in;
    switch (spec.kind) {
        case LayerKind::Conv2d: {
            const std::int64_t ci = in[0];
            const double bound = 1.0 / std::sqrt(static_cast<double>(ci) * spec.kernel * spec.kernel);
            weight = Tensor::uniform({spec.units, ci, spec.kernel, spec.kernel}, -bound, bound, rng);
            bias = Tensor::uniform({spec.units}, -bound, bound, rng);
            break;
        }
        case LayerKind::Conv2dTransposed: {
            const std::int64_t ci = in[0];
            const double bound = 1.0 / std::sqrt(static_cast<double>(ci) * spec.kernel * spec.kernel);
            weight = Tensor::uniform({ci, spec.units, spec.kernel, spec.kernel}, -bound, bound, rng);
            bias = Tensor::uniform({spec.units}, -bound, bound, rng);
            break;
        }
        case LayerKind::Linear: {
            const std::int64_t fin = in[0];
            const double bound = 1.0 / std::sqrt(static_cast<double>(fin));
            weight = Tensor::uniform({spec.units, fin}, -bound, bound, rng);
            bias = Tensor::uniform({spec.units}, -bound, bound, rng);
            break;
        }
        case LayerKind::BatchNorm: {
            const std::int64_t c = in[0];
            gamma = Tensor::ones({c});
            beta = Tensor::zeros({c});
            running_mean = Tensor::zeros({c});
            running_var = Tensor::ones({c});
            break;
        }
        default:
            break;
    }
}

Shape layer_output_shape(const LayerSpec& spec, const Shape& in) {
    auto conv_hw = [&](std::int64_t n) { return (n + 2 * spec.padding - spec.kernel) / spec.stride + 1; };
    switch (spec.kind) {
        case LayerKind::Conv2d:
            if (in.size() != 3) throw std::invalid_argument("conv2d expects [C,H,W] input");
            return {spec.units, conv_hw(in[1]), conv_hw(in[2])};
        case LayerKind::Conv2dTransposed:
            if (in.size() != 3) throw std::invalid_argument("conv2d_transposed expects [C,H,W] input");
            return {spec.units, (in[1] - 1) * spec.stride + spec.kernel - 2 * spec.padding,
                    (in[2] - 1) * spec.stride + spec.kernel - 2 * spec.padding};
        case LayerKind::Linear:
            if (in.size() != 1) throw std::invalid_argument("linear expects flattened [F] input");
            return {spec.units};
        case LayerKind::MaxPool: {
            if (in.size() != 3) throw std::invalid_argument("maxpool expects [C,H,W] input");
            auto ext = [&](std::int64_t n) {
                std::int64_t o = spec.ceil_mode ? (n - spec.kernel + spec.stride - 1) / spec.stride + 1
                                                : (n - spec.kernel) / spec.stride + 1;
                if (spec.ceil_mode && (o - 1) * spec.stride >= n) --o;
                return std::max<std::int64_t>(o, 1);
            };
            return {in[0], ext(in[1]), ext(in[2])};
        }
        case LayerKind::UpsampleNN:
            if (in.size() != 3) throw std::invalid_argument("upsample expects [C,H,W] input");
            return {in[0], in[1] * 2, in[2] * 2};
        case LayerKind::Flatten:
            return {numel_of(in)};
        case LayerKind::CenterCrop:
            if (in.size() != 3) throw std::invalid_argument("center_crop expects [C,H,W] input");
            return {in[0], spec.out_h, spec.out_w};
        case LayerKind::BatchNorm:
        case LayerKind::ReLU:
        case LayerKind::Softplus:
        case LayerKind::Sigmoid:
            return in;
    }
    throw std::logic_error("layer_output_shape: unknown kind");
}

Tensor layer_forward(Layer& layer, const Tensor& x, const LayerForwardOptions& opts) {
    const LayerSpec& spec = layer.spec;
    switch (spec.kind) {
        case LayerKind::Conv2d:
            return conv2d(x, layer.weight, layer.bias, spec.stride, spec.padding);
        case LayerKind::Conv2dTransposed: {
            Tensor y = conv2d_transposed(x, layer.weight, spec.stride, spec.padding);
            return add(y, reshape(layer.bias, {1, spec.units, 1, 1}));
        }
        case LayerKind::Linear: {
            if (x.ndim() != 2)
                throw std::invalid_argument("linear layer '" + layer.name + "': expected [B,F], got " +
                                            shape_str(x.shape()));
            return add(matmul(x, transpose(layer.weight)), reshape(layer.bias, {1, spec.units}));
        }
        case LayerKind::BatchNorm: {
            if (x.ndim() != 4)
                throw std::invalid_argument("batchnorm '" + layer.name + "': expected [B,C,H,W], got " +
                                            shape_str(x.shape()));
            const std::int64_t C = x.dim(1);
            if (C != layer.gamma.dim(0))
                throw std::invalid_argument("batchnorm '" + layer.name + "': channels " +
                                            std::to_string(C) + " != parameters " +
                                            std::to_string(layer.gamma.dim(0)));
            if (opts.training) {
                std::vector<double> mu, var;
                Tensor y = batchnorm_train(x, layer.gamma, layer.beta, opts.bn_eps, &mu, &var);
                if (opts.update_running_stats) {
                    const std::int64_t n = x.dim(0) * x.dim(2) * x.dim(3);
                    const double unbias = n > 1 ? static_cast<double>(n) / static_cast<double>(n - 1) : 1.0;
                    auto rm = layer.running_mean.mutable_data();
                    auto rv = layer.running_var.mutable_data();
                    for (std::int64_t c = 0; c < C; ++c) {
                        rm[c] = (1.0 - opts.bn_momentum) * rm[c] + opts.bn_momentum * mu[static_cast<std::size_t>(c)];
                        rv[c] = (1.0 - opts.bn_momentum) * rv[c] +
                                opts.bn_momentum * var[static_cast<std::size_t>(c)] * unbias;
                    }
                }
                return y;
            }
            Tensor g4 = reshape(layer.gamma, {1, C, 1, 1});
            Tensor b4 = reshape(layer.beta, {1, C, 1, 1});
            // evaluation: running statistics as constants
            std::vector<double> shift(static_cast<std::size_t>(C)), scale(static_cast<std::size_t>(C));
            auto rm = layer.running_mean.data();
            auto rv = layer.running_var.data();
            for (std::int64_t c = 0; c < C; ++c) {
                shift[static_cast<std::size_t>(c)] = rm[c];
                scale[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(rv[c] + opts.bn_eps);
            }
            Tensor sh = Tensor::from({1, C, 1, 1}, std::move(shift));
            Tensor sc = Tensor::from({1, C, 1, 1}, std::move(scale));
            return add(mul(mul(sub(x, sh), sc), g4), b4);
        }
        case LayerKind::MaxPool:
            return maxpool2d(x, spec.kernel, spec.stride, spec.ceil_mode);
        case LayerKind::UpsampleNN:
            return upsample_nearest(x, static_cast<int>(x.dim(2)) * 2, static_cast<int>(x.dim(3)) * 2);
        case LayerKind::ReLU:
            return relu(x);
        case LayerKind::Softplus:
            return softplus(x);
        case LayerKind::Sigmoid:
            return sigmoid(x);
        case LayerKind::Flatten:
            return reshape(x, {x.dim(0), x.numel() / x.dim(0)});
        case LayerKind::CenterCrop: {
            const int top = static_cast<int>(x.dim(2) - spec.out_h) / 2;
            const int left = static_cast<int>(x.dim(3) - spec.out_w) / 2;
            return crop2d(x, top, left, spec.out_h, spec.out_w);
        }
    }
    throw std::logic_error("layer_forward: unknown kind");
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
    if (params.size() != grads.size())
        throw std::invalid_argument("Adam::step: " + std::to_string(params.size()) + " params vs " +
                                    std::to_string(grads.size()) + " grads");
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(static_cast<std::size_t>(params[i]->numel()), 0.0);
            v_[i].assign(static_cast<std::size_t>(params[i]->numel()), 0.0);
        }
    }
    if (m_.size() != params.size())
        throw std::invalid_argument("Adam::step: parameter count changed across steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i]->mutable_data();
        auto g = grads[i].data();
        if (p.size() != g.size())
            throw std::invalid_argument("Adam::step: grad size mismatch at param " + std::to_string(i));
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

}  // namespace embattr
