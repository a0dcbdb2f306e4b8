#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace etta {

// Seed mixing for derived streams (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic RNG: mt19937_64 core (bit-exact per the standard) with
// hand-rolled distributions, so sequences reproduce across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) (Lemire's multiply-with-rejection).
    std::size_t uniform_index(std::size_t n) {
        if (n == 0) throw std::invalid_argument("Rng::uniform_index: n must be positive");
        std::uint64_t range = static_cast<std::uint64_t>(n);
        std::uint64_t x = next_u64();
        __uint128_t m = static_cast<__uint128_t>(x) * range;
        auto lo = static_cast<std::uint64_t>(m);
        if (lo < range) {
            std::uint64_t t = (-range) % range;
            while (lo < t) {
                x = next_u64();
                m = static_cast<__uint128_t>(x) * range;
                lo = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::size_t>(m >> 64);
    }

    // Standard normal via Box-Muller (spare cached).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = static_cast<std::size_t>(std::distance(first, last));
        for (std::size_t i = n; i > 1; --i) {
            std::swap(first[i - 1], first[uniform_index(i)]);
        }
    }

    // k distinct indices from [0, n), partial Fisher-Yates; order is random.
    std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k) {
        if (k > n) throw std::invalid_argument("Rng::sample_indices: k exceeds n");
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        for (std::size_t i = 0; i < k; ++i) {
            std::size_t j = i + uniform_index(n - i);
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        return pool;
    }

    // Independent child stream; depends only on the construction seed, never
    // on how much of this stream has been consumed.
    Rng derive(std::uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace etta
