#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "maskdiff/score_field.hpp"

namespace maskdiff {

// Guidance scales: w0 for the joint score, w1..w3 for the identity, emotion
// and text single-condition scores.
struct GuidanceWeights {
    double w0 = 1.9;
    double w1 = 1.0;
    double w2 = 1.0;
    double w3 = 1.6;

    void validate() const {
        for (double w : {w0, w1, w2, w3})
            if (!std::isfinite(w)) throw std::domain_error("GuidanceWeights: non-finite weight");
    }
};

namespace detail {
inline void check_compose_inputs(const ScoreField& s_u, const std::vector<ScoreField>& s_cond,
                                 const ScoreField& s_joint) {
    if (s_cond.size() != 3)
        throw std::domain_error("epfg_compose: expected one field per condition slot");
    for (const ScoreField* f : {&s_joint, &s_cond[0], &s_cond[1], &s_cond[2]})
        if (!f->same_shape(s_u)) throw std::domain_error("epfg_compose: shape mismatch");
    auto check_pos = [](const ScoreField& f) {
        for (double v : f.values)
            if (!(v > 0.0) || !std::isfinite(v))
                throw std::domain_error("epfg_compose: entries must be finite and > 0");
    };
    check_pos(s_u);
    check_pos(s_joint);
    for (const ScoreField& f : s_cond) check_pos(f);
}
}  // namespace detail

// Modulated score, elementwise in the log domain:
//   log s_hat = 2 log s_u + w0 (log s_joint - log s_u)
//             + sum_k w_k (log s_k - log s_u)
// A condition slot that is absent should pass s_u, zeroing its term. Note
// the intercept: with every input equal to s, the output is s^2; this is
// the composition rule taken verbatim, with no renormalization.
inline ScoreField epfg_compose(const ScoreField& s_u, const std::vector<ScoreField>& s_cond,
                               const ScoreField& s_joint, const GuidanceWeights& w) {
    w.validate();
    detail::check_compose_inputs(s_u, s_cond, s_joint);
    const double wk[3] = {w.w1, w.w2, w.w3};
    ScoreField out(s_u.levels, s_u.length, s_u.n_real);
    for (size_t i = 0; i < out.values.size(); ++i) {
        const double lu = std::log(s_u.values[i]);
        double acc = 2.0 * lu + w.w0 * (std::log(s_joint.values[i]) - lu);
        for (int k = 0; k < 3; ++k) acc += wk[k] * (std::log(s_cond[k].values[i]) - lu);
        out.values[i] = std::exp(acc);
    }
    return out;
}

// Product-of-ratios compositional score (no joint term):
//   s_u * prod_k (s_k / s_u)^{w_k}
inline ScoreField compositional_score(const ScoreField& s_u,
                                      const std::vector<ScoreField>& s_cond,
                                      const GuidanceWeights& w) {
    w.validate();
    if (s_cond.size() != 3)
        throw std::domain_error("compositional_score: expected one field per condition slot");
    const double wk[3] = {w.w1, w.w2, w.w3};
    ScoreField out(s_u.levels, s_u.length, s_u.n_real);
    for (size_t i = 0; i < out.values.size(); ++i) {
        const double lu = std::log(s_u.values[i]);
        double acc = lu;
        for (int k = 0; k < 3; ++k) acc += wk[k] * (std::log(s_cond[k].values[i]) - lu);
        out.values[i] = std::exp(acc);
    }
    return out;
}

// Reverse transition rate for one candidate entry: the concrete score times
// the rate at which the forward process maps the candidate into the current
// state. Real (unmasked) sources take q_entry 0 and yield 0.
inline double conditional_rate(double score, double q_entry, double sigma_t = 1.0) {
    return score * sigma_t * q_entry;
}

}  // namespace maskdiff
