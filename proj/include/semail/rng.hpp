#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace semail {

// Deterministic random source. All distribution transforms are implemented
// here rather than with std::*_distribution so that draw sequences depend
// only on the seed, not on the standard library build.
class RandomSource {
public:
    explicit RandomSource(std::uint64_t seed = 0) : state_(splitmix(seed ^ 0x9e3779b97f4a7c15ull)) {
        // decorrelate nearby seeds
        for (int i = 0; i < 4; ++i) next_u64();
    }

    std::uint64_t next_u64() {
        // xorshift64* on a splitmix-initialized state
        std::uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545f4914f6cdd1dull;
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t uniform_index(std::uint64_t n) {
        // rejection-free Lemire reduction is overkill at these sizes
        return next_u64() % (n == 0 ? 1 : n);
    }

    // standard normal via Box-Muller (one value per call, cache the pair)
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <class T>
    void fill_normal(std::vector<T>& out) {
        for (auto& v : out) v = static_cast<T>(normal());
    }

    template <class T>
    void fill_uniform(std::vector<T>& out, T lo, T hi) {
        for (auto& v : out) v = static_cast<T>(uniform(lo, hi));
    }

    // independent child stream; tag keeps sibling streams apart
    RandomSource child(std::uint64_t tag) {
        RandomSource r(0);
        r.state_ = splitmix(next_u64() ^ splitmix(tag + 0x632be59bd9b4e019ull));
        return r;
    }

    std::uint64_t state() const { return state_; }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace semail
