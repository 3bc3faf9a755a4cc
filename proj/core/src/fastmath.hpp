#pragma once

#include <bit>
#include <cmath>
#include <cstdint>

// Branch-free double-precision exp/log kernels that auto-vectorize. Accuracy
// is a few ulp, which is consistent across both the forward values and the
// analytic gradients (both sides use the same kernels), so gradient checks
// compare like with like. Arguments are clamped to the non-overflowing
// range; NaN propagates through the polynomial.

namespace embattr::detail {

inline double fast_exp(double x) {
    const double xc = x < -708.0 ? -708.0 : (x > 709.0 ? 709.0 : x);
    constexpr double log2e = 1.4426950408889634074;
    constexpr double ln2_hi = 6.93147180369123816490e-01;
    constexpr double ln2_lo = 1.90821492927058770002e-10;
    const double t = xc * log2e;
    const double k = std::floor(t + 0.5);
    const double r = (xc - k * ln2_hi) - k * ln2_lo;
    // Taylor e^r on |r| <= ln2/2
    double p = 1.0 / 6227020800.0;  // 1/13!
    p = p * r + 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    const auto ki = static_cast<std::int64_t>(k);
    const double two_k = std::bit_cast<double>(static_cast<std::uint64_t>(ki + 1023) << 52);
    return p * two_k;
}

// log(u) for u in [1, 2]
inline double fast_log_1to2(double u) {
    constexpr double sqrt2 = 1.41421356237309504880;
    constexpr double ln2 = 0.69314718055994530942;
    const bool upper = u > sqrt2;
    const double v = upper ? 0.5 * u : u;
    const double add = upper ? ln2 : 0.0;
    const double y = (v - 1.0) / (v + 1.0);  // |y| <= 0.1716
    const double y2 = y * y;
    double p = 1.0 / 21.0;
    p = p * y2 + 1.0 / 19.0;
    p = p * y2 + 1.0 / 17.0;
    p = p * y2 + 1.0 / 15.0;
    p = p * y2 + 1.0 / 13.0;
    p = p * y2 + 1.0 / 11.0;
    p = p * y2 + 1.0 / 9.0;
    p = p * y2 + 1.0 / 7.0;
    p = p * y2 + 1.0 / 5.0;
    p = p * y2 + 1.0 / 3.0;
    p = p * y2 + 1.0;
    return 2.0 * y * p + add;
}

// log1p(z) for z in [0, 1]
inline double fast_log1p01(double z) { return fast_log_1to2(1.0 + z); }

// sigmoid via one exp; t = exp(-|x|)
inline double fast_sigmoid(double x) {
    const double t = fast_exp(-std::abs(x));
    return x >= 0 ? 1.0 / (1.0 + t) : t / (1.0 + t);
}

}  // namespace embattr::detail
