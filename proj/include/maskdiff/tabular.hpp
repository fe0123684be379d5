#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "maskdiff/errors.hpp"
#include "maskdiff/losses.hpp"
#include "maskdiff/oracle.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/score_field.hpp"

namespace maskdiff {

// Exactly-representable score model for enumerable spaces: one positive
// value per (state, time bucket, cell, candidate), stored in the log domain
// so gradient steps preserve positivity. Unbacked keys evaluate to 1.
class TabularScore {
  public:
    TabularScore(const Vocab& vocab, int levels, int length, int time_buckets = 32)
        : vocab_(vocab), levels_(levels), length_(length), buckets_(time_buckets) {
        if (levels < 1 || length < 1 || time_buckets < 1)
            throw std::domain_error("TabularScore: dimensions must be >= 1");
        const double clean_states =
            std::pow(static_cast<double>(vocab.n_real), double(levels) * length);
        if (clean_states > kEnumerationCap)
            throw CapacityError("TabularScore: state space exceeds the enumeration cap");
    }

    int time_bucket(double t) const {
        int b = static_cast<int>(t * buckets_);
        return std::min(b, buckets_ - 1);
    }

    ScoreField eval(const TokenGrid& grid, double t) const {
        check_shape(grid);
        ScoreField out(levels_, length_, vocab_.n_real, 1.0);
        auto it = table_.find(key_of(grid, t));
        if (it == table_.end()) return out;
        for (size_t i = 0; i < out.values.size(); ++i) out.values[i] = std::exp(it->second[i]);
        return out;
    }

    // Log-domain cell accessor, creating the entry on first touch.
    std::vector<double>& log_entry(const TokenGrid& grid, double t) {
        check_shape(grid);
        auto [it, fresh] = table_.try_emplace(
            key_of(grid, t),
            std::vector<double>(size_t(levels_) * length_ * vocab_.n_real, 0.0));
        (void)fresh;
        return it->second;
    }

    size_t backed_keys() const { return table_.size(); }
    const Vocab& vocab() const { return vocab_; }
    int levels() const { return levels_; }
    int length() const { return length_; }

    // Stochastic fit on draws (x0 ~ p0, t ~ U, x_t ~ forward): each visit
    // accumulates the sufficient statistics of the per-key stationarity
    // condition E[sigma(t) * (s - c)] = 0 of the score-entropy objective,
    // and stores s as the running weighted mean. Converges to the exact
    // concrete score at the CLT rate.
    void fit(const ToyDistribution& p0, const NoiseSchedule& sched, long iterations,
             uint64_t seed) {
        p0.validate();
        if (p0.levels != levels_ || p0.length != length_ ||
            p0.vocab.n_real != vocab_.n_real)
            throw std::domain_error("TabularScore::fit: distribution shape mismatch");
        const int per_key = levels_ * length_ * vocab_.n_real;
        std::unordered_map<uint64_t, std::vector<double>> sum_wc;
        std::unordered_map<uint64_t, std::vector<double>> sum_w;  // per cell
        Rng rng(seed);
        for (long it = 0; it < iterations; ++it) {
            const size_t i = rng.categorical(p0.probs);
            const TokenGrid& x0 = p0.support[i];
            const double t = 1e-3 + (1.0 - 1e-3) * rng.uniform();
            TokenGrid xt = forward_sample(x0, sched, t, p0.vocab, rng);
            if (xt.count_mask(p0.vocab) == 0) continue;
            const double sb = sched.sigma_bar(t);
            const double keep = std::exp(-sb);
            const double r = keep / (1.0 - keep);
            const double sig = sched.sigma(t);
            const uint64_t key = key_of(xt, t);
            auto& wc = sum_wc.try_emplace(key, std::vector<double>(per_key, 0.0)).first->second;
            auto& w = sum_w.try_emplace(key, std::vector<double>(size_t(levels_) * length_, 0.0))
                          .first->second;
            auto& theta = log_entry(xt, t);
            for (int l = 0; l < levels_; ++l)
                for (int pos = 0; pos < length_; ++pos) {
                    if (xt.at(l, pos) != vocab_.mask_id()) continue;
                    const size_t cell = size_t(l) * length_ + pos;
                    w[cell] += sig;
                    wc[cell * vocab_.n_real + x0.at(l, pos)] += sig * r;
                    for (int y = 0; y < vocab_.n_real; ++y) {
                        const double mean = wc[cell * vocab_.n_real + y] / w[cell];
                        theta[cell * vocab_.n_real + y] =
                            std::clamp(std::log(std::max(mean, 1e-300)), -30.0, 30.0);
                    }
                }
        }
    }

  private:
    void check_shape(const TokenGrid& g) const {
        if (g.levels != levels_ || g.length != length_)
            throw std::domain_error("TabularScore: grid shape mismatch");
        g.check_ids(vocab_);
    }
    uint64_t key_of(const TokenGrid& g, double t) const {
        return encode_grid(g, vocab_) * static_cast<uint64_t>(buckets_) +
               static_cast<uint64_t>(time_bucket(t));
    }

    Vocab vocab_;
    int levels_, length_, buckets_;
    std::unordered_map<uint64_t, std::vector<double>> table_;
};

inline ScoreField tabular_score_eval(const TabularScore& table, const TokenGrid& grid, double t) {
    return table.eval(grid, t);
}

inline void fit_tabular_score(TabularScore& table, const ToyDistribution& p0,
                              const NoiseSchedule& sched, long iterations, uint64_t seed) {
    table.fit(p0, sched, iterations, seed);
}

}  // namespace maskdiff
