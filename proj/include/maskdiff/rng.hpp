#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace maskdiff {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Seeded random stream. The engine (mt19937_64) is fully specified by the
// standard and all variate mappings are hand-rolled, so a given seed yields
// the same stream on every platform. Never share one stream between
// concurrent callers; derive substreams instead.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(splitmix64(seed)), seed_(seed) {}

    // Independent stream derived from (this stream's seed, key).
    Rng substream(uint64_t key) const {
        return Rng(splitmix64(seed_ ^ splitmix64(key + 0x51ed2701)));
    }

    uint64_t next_u64() { return engine_(); }

    // Uniform on [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Uniform on (0, 1].
    double uniform_pos() { return static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53; }

    bool bernoulli(double p) { return uniform() < p; }

    // Uniform integer in [0, n).
    int uniform_int(int n) {
        // Rejection sampling keeps the mapping exact.
        const uint64_t nn = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % nn;
        uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return static_cast<int>(v % nn);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u = uniform_pos();
        const double v = uniform();
        const double r = std::sqrt(-2.0 * std::log(u));
        spare_ = r * std::sin(2.0 * M_PI * v);
        have_spare_ = true;
        return r * std::cos(2.0 * M_PI * v);
    }

    // Index draw from unnormalized nonnegative weights.
    int categorical(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double u = uniform() * total;
        for (size_t i = 0; i < weights.size(); ++i) {
            u -= weights[i];
            if (u < 0.0) return static_cast<int>(i);
        }
        return static_cast<int>(weights.size()) - 1;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    uint64_t seed() const { return seed_; }

  private:
    std::mt19937_64 engine_;
    uint64_t seed_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace maskdiff
