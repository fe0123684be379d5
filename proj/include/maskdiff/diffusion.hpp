#pragma once

#include <cmath>
#include <vector>

#include "maskdiff/rng.hpp"
#include "maskdiff/schedule.hpp"
#include "maskdiff/token_grid.hpp"

namespace maskdiff {

// Per-token absorbing rate matrix Q, indexed Q[source][target]. Every real
// token flows into the mask state at unit rate; the mask row is zero, so
// the all-mask grid is the stationary state. Rows sum to zero.
inline std::vector<std::vector<double>> transition_rate_matrix(const Vocab& vocab) {
    const int n = vocab.n_states();
    std::vector<std::vector<double>> q(n, std::vector<double>(n, 0.0));
    for (int i = 0; i < vocab.n_real; ++i) {
        q[i][i] = -1.0;
        q[i][vocab.mask_id()] = 1.0;
    }
    return q;
}

// Marginal of one cell at time t given its clean token. Two-point law:
// stays at x0 with prob exp(-sigma_bar), else sits at mask.
struct CellMarginal {
    double keep;  // P(x_t = x0)
    double mask;  // P(x_t = mask)
};

inline CellMarginal forward_marginal(const NoiseSchedule& sched, double t) {
    const double sb = sched.sigma_bar(t);
    const double keep = std::exp(-sb);
    return {keep, 1.0 - keep};
}

// Probability the forward process moves a cell with clean token x0 to token
// x at time t. Zero for any real token other than x0.
inline double forward_cell_prob(const NoiseSchedule& sched, double t, int32_t x0, int32_t x,
                                const Vocab& vocab) {
    const CellMarginal m = forward_marginal(sched, t);
    if (x == vocab.mask_id()) return m.mask;
    if (x == x0) return m.keep;
    return 0.0;
}

// Draw x_t ~ P(.|x0) by masking each cell independently. The input must be
// a clean grid (no mask tokens).
inline TokenGrid forward_sample(const TokenGrid& x0, const NoiseSchedule& sched, double t,
                                const Vocab& vocab, Rng& rng) {
    x0.check_ids(vocab);
    if (x0.contains_mask(vocab))
        throw std::domain_error("forward_sample: input grid already contains mask tokens");
    const double p = sched.mask_prob(t);
    TokenGrid xt = x0;
    for (auto& c : xt.cells)
        if (rng.bernoulli(p)) c = vocab.mask_id();
    return xt;
}

}  // namespace maskdiff
