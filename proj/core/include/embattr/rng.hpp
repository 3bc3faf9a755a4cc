#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace embattr {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Seeded generator with explicitly specified uniform/normal transforms so
// that results do not depend on libstdc++ distribution internals. Streams
// derived from the same base seed are independent and order-insensitive.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller (cosine branch only, keeps state simple)
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        constexpr double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    // [0, n), unbiased
    std::int64_t uniform_int(std::int64_t n) {
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = ~0ull - (~0ull % un);
        std::uint64_t v = gen_();
        while (v >= limit) v = gen_();
        return static_cast<std::int64_t>(v % un);
    }

    // Derived stream: deterministic function of (base seed, id), independent
    // of how much this generator has been consumed.
    Rng stream(std::uint64_t id) const { return Rng(splitmix64(seed_ ^ splitmix64(id + 1))); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
            const std::int64_t j = uniform_int(i + 1);
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
};

}  // namespace embattr
