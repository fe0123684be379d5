#include "maskdiff/sampler.hpp"

#include <cmath>
#include <stdexcept>

#include "maskdiff/errors.hpp"
#include "maskdiff/score_net.hpp"

namespace maskdiff {

void SamplerConfig::validate() const {
    if (n_steps < 1) throw ConfigError("SamplerConfig: n_steps must be >= 1");
}

TokenGrid euler_step(const TokenGrid& grid, double t, double dt, const ScoreField& scores,
                     const Vocab& vocab, const NoiseSchedule& sched, Rng& rng) {
    if (!(dt > 0.0) || dt > t) throw std::domain_error("euler_step: need 0 < dt <= t");
    if (scores.levels != grid.levels || scores.length != grid.length ||
        scores.n_real != vocab.n_real)
        throw std::domain_error("euler_step: score field shape mismatch");
    const double sig = sched.sigma(t);
    TokenGrid out = grid;
    std::vector<double> p(static_cast<size_t>(vocab.n_real) + 1);
    for (int l = 0; l < grid.levels; ++l)
        for (int pos = 0; pos < grid.length; ++pos) {
            if (grid.at(l, pos) != vocab.mask_id()) continue;
            // p[y] for unmasking, p[n_real] for staying masked; the stay
            // entry carries the first-order diagonal 1 + diag * dt.
            double total_rate = 0.0;
            for (int y = 0; y < vocab.n_real; ++y) {
                const double s = scores.at(l, pos, y);
                if (!(s >= 0.0) || !std::isfinite(s))
                    throw std::domain_error("euler_step: scores must be finite and >= 0");
                p[y] = conditional_rate(s, 1.0, sig) * dt;
                total_rate += p[y];
            }
            p[vocab.n_real] = 1.0 - total_rate;  // 1 + diag * dt
            double norm = 0.0;
            for (double& v : p) {
                if (v < 0.0) v = 0.0;
                norm += v;
            }
            if (norm <= 0.0)
                throw NumericError("euler_step: clamped step distribution is all zero");
            for (double& v : p) v /= norm;
            const size_t pick = rng.categorical(p);
            if (pick < static_cast<size_t>(vocab.n_real))
                out.at(l, pos) = static_cast<int32_t>(pick);
        }
    return out;
}

namespace {

ScoreField composed_scores(const ScoreSource& source, const TokenGrid& grid, double t,
                           const ConditionSet& cond, const GuidanceWeights& w) {
    ScoreField s_u = source(grid, t, ConditionSet::all_null());
    if (cond.is_all_null()) return s_u;
    ScoreField s_joint = source(grid, t, cond);
    std::vector<ScoreField> singles;
    singles.reserve(3);
    for (int k = 0; k < 3; ++k) {
        ConditionSet single = cond.only(k);
        singles.push_back(single.is_all_null() ? s_u : source(grid, t, single));
    }
    return epfg_compose(s_u, singles, s_joint, w);
}

}  // namespace

TokenGrid sample(const ScoreSource& source, const ConditionSet& cond, int length, int levels,
                 const GuidanceWeights& w, const SamplerConfig& cfg, const Vocab& vocab,
                 const NoiseSchedule& sched) {
    cfg.validate();
    w.validate();
    if (length < 1 || levels < 1) throw std::domain_error("sample: bad grid shape");
    Rng rng(cfg.seed);
    TokenGrid grid(levels, length, vocab.mask_id());
    const double dt = 1.0 / cfg.n_steps;
    ScoreField last;
    for (int step = 0; step < cfg.n_steps; ++step) {
        const double t = 1.0 - step * dt;
        last = composed_scores(source, grid, t, cond, w);
        grid = euler_step(grid, t, dt, last, vocab, sched, rng);
        if (grid.count_mask(vocab) == 0) return grid;
    }
    // Residual masks resolve to the argmax of the final composed scores.
    for (int l = 0; l < levels; ++l)
        for (int pos = 0; pos < length; ++pos) {
            if (grid.at(l, pos) != vocab.mask_id()) continue;
            int best = 0;
            for (int y = 1; y < vocab.n_real; ++y)
                if (last.at(l, pos, y) > last.at(l, pos, best)) best = y;
            grid.at(l, pos) = static_cast<int32_t>(best);
        }
    return grid;
}

TokenGrid sample(const MMDiT& model, const ConditionSet& cond, int length, int levels,
                 const GuidanceWeights& w, const SamplerConfig& cfg) {
    ScoreSource source = [&model](const TokenGrid& g, double t, const ConditionSet& c) {
        return model.eval(g, t, c);
    };
    return sample(source, cond, length, levels, w, cfg, Vocab(model.config().n_real),
                  model.schedule());
}

std::vector<TokenGrid> sample_many(const ScoreSource& source, const ConditionSet& cond,
                                   int length, int levels, const GuidanceWeights& w,
                                   const SamplerConfig& cfg, const Vocab& vocab,
                                   const NoiseSchedule& sched, int n_chains) {
    Rng master(cfg.seed);
    std::vector<TokenGrid> out;
    out.reserve(n_chains);
    for (int chain = 0; chain < n_chains; ++chain) {
        SamplerConfig chain_cfg = cfg;
        chain_cfg.seed = master.substream(static_cast<uint64_t>(chain)).seed();
        out.push_back(sample(source, cond, length, levels, w, chain_cfg, vocab, sched));
    }
    return out;
}

double DurationModel::duration(int sym) const {
    if (sym < 0 || sym >= n_symbols) throw std::domain_error("DurationModel: symbol out of range");
    const double x = theta[sym];
    return x > 30.0 ? x : std::log1p(std::exp(x));
}

int predict_length(const std::vector<int32_t>& text, const DurationModel& model) {
    if (text.empty()) throw std::domain_error("predict_length: empty symbol sequence");
    double total = 0.0;
    for (int32_t s : text) total += model.duration(s);
    const long len = std::lround(total);
    return static_cast<int>(std::max(1L, len));
}

void fit_duration_model(DurationModel& model,
                        const std::vector<std::pair<std::vector<int32_t>, double>>& pairs,
                        long iterations, double lr, uint64_t seed) {
    if (pairs.empty()) throw std::domain_error("fit_duration_model: no pairs");
    Rng rng(seed);
    for (long it = 0; it < iterations; ++it) {
        const auto& [text, target] = pairs[rng.uniform_int(pairs.size())];
        if (text.empty()) throw std::domain_error("fit_duration_model: empty symbol sequence");
        double total = 0.0;
        for (int32_t s : text) total += model.duration(s);
        const double err = total - target;
        for (int32_t s : text) {
            // d softplus / d theta = logistic(theta)
            const double g = 1.0 / (1.0 + std::exp(-model.theta[s]));
            model.theta[s] -= lr * err * g;
        }
    }
}

}  // namespace maskdiff
