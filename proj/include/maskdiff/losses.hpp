#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "maskdiff/condition.hpp"
#include "maskdiff/diffusion.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/schedule.hpp"
#include "maskdiff/score_field.hpp"
#include "maskdiff/token_grid.hpp"

namespace maskdiff {

struct DseResult {
    double value = 0.0;
    ScoreField grad;  // d value / d scores, zero at unmasked cells
};

// Denoising score entropy for the absorbing process, summed over levels
// 0..max_level-1 and all positions. For a masked cell whose clean token is
// y*, the target concrete score is the one-hot c_y = delta(y,y*) * r with
// r = e^{-sb}/(1-e^{-sb}); the cell contributes
//   sigma(t) * sum_y [ s_y - c_y log s_y + (c_y log c_y - c_y) ]
// which is zero exactly at s = c. Unmasked cells contribute nothing.
inline DseResult dse_loss(const ScoreField& scores, const TokenGrid& x0, const TokenGrid& xt,
                          double t, int max_level, const NoiseSchedule& sched,
                          const Vocab& vocab) {
    if (x0.levels != xt.levels || x0.length != xt.length)
        throw std::domain_error("dse_loss: grid shapes differ");
    if (scores.levels != xt.levels || scores.length != xt.length || scores.n_real != vocab.n_real)
        throw std::domain_error("dse_loss: score field shape mismatch");
    if (max_level < 1 || max_level > xt.levels)
        throw std::domain_error("dse_loss: max_level out of range");

    const double sb = sched.sigma_bar(t);
    const double sig = sched.sigma(t);
    const double keep = std::exp(-sb);
    const double r = keep / (1.0 - keep);  // target score mass on the clean token

    DseResult out;
    out.grad = ScoreField(scores.levels, scores.length, scores.n_real, 0.0);
    for (int l = 0; l < max_level; ++l) {
        for (int p = 0; p < xt.length; ++p) {
            const int32_t cur = xt.at(l, p);
            const int32_t clean = x0.at(l, p);
            if (cur != vocab.mask_id()) {
                if (cur != clean)
                    throw std::domain_error("dse_loss: x_t differs from x0 at an unmasked cell");
                continue;
            }
            if (!vocab.is_real(clean))
                throw std::domain_error("dse_loss: x0 must be mask-free");
            for (int y = 0; y < vocab.n_real; ++y) {
                const double s = scores.at(l, p, y);
                if (!(s >= 0.0) || !std::isfinite(s))
                    throw std::domain_error("dse_loss: scores must be finite and >= 0");
                const double c = (y == clean) ? r : 0.0;
                if (c > 0.0 && s == 0.0)
                    throw std::domain_error("dse_loss: zero score where the target is positive");
                double cell = s;
                if (c > 0.0) cell += -c * std::log(s) + (c * std::log(c) - c);
                out.value += sig * cell;
                out.grad.at(l, p, y) = sig * (c > 0.0 ? 1.0 - c / s : 1.0);
            }
        }
    }
    return out;
}

// Level count active at a given epoch: one level to start, one more every
// epochs_per_level, capped at max_levels.
inline int curriculum_level(long epoch, int max_levels, int epochs_per_level = 3) {
    if (epoch < 0) throw std::domain_error("curriculum_level: epoch must be >= 0");
    if (max_levels < 1 || epochs_per_level < 1)
        throw std::domain_error("curriculum_level: bad configuration");
    const long l = 1 + epoch / epochs_per_level;
    return static_cast<int>(std::min<long>(max_levels, l));
}

struct CurriculumState {
    long epoch = 0;
    int epochs_per_level = 3;
    int max_levels = 1;

    int current_max_level() const { return curriculum_level(epoch, max_levels, epochs_per_level); }
};

// Two-stage null masking: one coin drops everything, otherwise each slot is
// dropped independently. Per-slot null marginal is p_all + (1-p_all)*p_each.
inline ConditionSet condition_dropout(const ConditionSet& cond, Rng& rng, double p_all = 0.1,
                                      double p_each = 0.1) {
    if (p_all < 0 || p_all > 1 || p_each < 0 || p_each > 1)
        throw std::domain_error("condition_dropout: probabilities must be in [0,1]");
    if (rng.bernoulli(p_all)) return ConditionSet::all_null();
    ConditionSet out = cond;
    if (rng.bernoulli(p_each)) out.identity.reset();
    if (rng.bernoulli(p_each)) out.emotion.reset();
    if (rng.bernoulli(p_each)) out.text.reset();
    return out;
}

struct AlignResult {
    double value = 0.0;
    std::vector<double> grad_a;
};

// 1 - cos(a,b) + |a-b|_1 + |a-b|_2, with the last term the plain Euclidean
// norm. Exactly zero when a == b.
inline AlignResult align_loss(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty())
        throw std::domain_error("align_loss: dimension mismatch");
    double aa = 0, bb = 0, ab = 0, l1 = 0, d2 = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        aa += a[i] * a[i];
        bb += b[i] * b[i];
        ab += a[i] * b[i];
        const double d = a[i] - b[i];
        l1 += std::abs(d);
        d2 += d * d;
    }
    if (aa == 0.0 || bb == 0.0)
        throw std::domain_error("align_loss: zero-norm vector in cosine term");
    const double denom = std::sqrt(aa * bb);
    const double cosv = ab / denom;
    const double l2 = std::sqrt(d2);

    AlignResult out;
    out.value = (1.0 - cosv) + l1 + l2;
    out.grad_a.resize(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        const double dcos = b[i] / denom - cosv * a[i] / aa;
        const double d = a[i] - b[i];
        const double dl1 = (d > 0) - (d < 0);
        const double dl2 = (l2 > 0) ? d / l2 : 0.0;
        out.grad_a[i] = -dcos + dl1 + dl2;
    }
    return out;
}

}  // namespace maskdiff
