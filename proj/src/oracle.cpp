#include "maskdiff/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <unordered_map>

#include "maskdiff/losses.hpp"
#include "maskdiff/rng.hpp"

namespace maskdiff {

namespace {

void check_capacity(const Vocab& vocab, int cells) {
    const double states = std::pow(static_cast<double>(vocab.n_states()), cells);
    if (states > kEnumerationCap)
        throw CapacityError("state space of " + std::to_string(states) +
                            " exceeds enumeration cap of " + std::to_string(kEnumerationCap));
}

}  // namespace

void ToyDistribution::validate() const {
    if (support.empty()) throw std::domain_error("ToyDistribution: empty support");
    if (support.size() != probs.size())
        throw std::domain_error("ToyDistribution: support/probs size mismatch");
    double sum = 0.0;
    std::map<std::vector<int32_t>, int> seen;
    for (size_t i = 0; i < support.size(); ++i) {
        const TokenGrid& g = support[i];
        if (g.levels != levels || g.length != length)
            throw std::domain_error("ToyDistribution: support grid shape mismatch");
        g.check_ids(vocab);
        if (g.contains_mask(vocab))
            throw std::domain_error("ToyDistribution: support grids must be mask-free");
        if (!(probs[i] > 0.0))
            throw std::domain_error("ToyDistribution: weights must be positive");
        if (++seen[g.cells] > 1)
            throw std::domain_error("ToyDistribution: duplicate support entry");
        sum += probs[i];
    }
    if (std::abs(sum - 1.0) > 1e-12)
        throw std::domain_error("ToyDistribution: weights must sum to 1");
}

double ToyDistribution::p0(const TokenGrid& x) const {
    for (size_t i = 0; i < support.size(); ++i)
        if (support[i] == x) return probs[i];
    return 0.0;
}

void ConditionFamily::validate() const {
    if (components.empty() || components.size() != weights.size())
        throw std::domain_error("ConditionFamily: weights/components size mismatch");
    double sum = 0.0;
    for (size_t k = 0; k < components.size(); ++k) {
        components[k].validate();
        if (!(weights[k] > 0.0)) throw std::domain_error("ConditionFamily: weights must be positive");
        if (components[k].levels != components[0].levels ||
            components[k].length != components[0].length ||
            components[k].vocab.n_real != components[0].vocab.n_real)
            throw std::domain_error("ConditionFamily: component shapes differ");
        sum += weights[k];
    }
    if (std::abs(sum - 1.0) > 1e-12)
        throw std::domain_error("ConditionFamily: weights must sum to 1");
}

ToyDistribution ConditionFamily::mixture() const {
    validate();
    ToyDistribution out;
    out.vocab = components[0].vocab;
    out.levels = components[0].levels;
    out.length = components[0].length;
    std::map<std::vector<int32_t>, double> acc;
    for (size_t k = 0; k < components.size(); ++k)
        for (size_t i = 0; i < components[k].support.size(); ++i)
            acc[components[k].support[i].cells] += weights[k] * components[k].probs[i];
    for (auto& [cells, p] : acc) {
        TokenGrid g(out.levels, out.length);
        g.cells = cells;
        out.support.push_back(std::move(g));
        out.probs.push_back(p);
    }
    return out;
}

double exact_marginal(const ToyDistribution& p0, const TokenGrid& xt, const NoiseSchedule& sched,
                      double t) {
    if (xt.levels != p0.levels || xt.length != p0.length)
        throw std::domain_error("exact_marginal: grid shape mismatch");
    xt.check_ids(p0.vocab);
    const CellMarginal m = forward_marginal(sched, t);
    const int32_t mask = p0.vocab.mask_id();
    double total = 0.0;
    for (size_t i = 0; i < p0.support.size(); ++i) {
        double prod = p0.probs[i];
        const auto& x0 = p0.support[i].cells;
        for (size_t c = 0; c < xt.cells.size() && prod != 0.0; ++c) {
            if (xt.cells[c] == mask)
                prod *= m.mask;
            else if (xt.cells[c] == x0[c])
                prod *= m.keep;
            else
                prod = 0.0;
        }
        total += prod;
    }
    return total;
}

double exact_concrete_score(const ToyDistribution& p0, const TokenGrid& xt,
                            const NoiseSchedule& sched, double t, int level, int pos,
                            int candidate) {
    if (level < 0 || level >= xt.levels || pos < 0 || pos >= xt.length)
        throw std::domain_error("exact_concrete_score: cell out of range");
    if (xt.at(level, pos) != p0.vocab.mask_id())
        throw std::domain_error("exact_concrete_score: queried cell is not masked");
    if (!p0.vocab.is_real(candidate))
        throw std::domain_error("exact_concrete_score: candidate must be a real token");
    const double denom = exact_marginal(p0, xt, sched, t);
    if (!(denom > 0.0))
        throw std::domain_error("exact_concrete_score: state has zero marginal probability");
    TokenGrid sub = xt;
    sub.at(level, pos) = static_cast<int32_t>(candidate);
    return exact_marginal(p0, sub, sched, t) / denom;
}

ScoreField exact_score_field(const ToyDistribution& p0, const TokenGrid& xt,
                             const NoiseSchedule& sched, double t) {
    ScoreField out(xt.levels, xt.length, p0.vocab.n_real, 1.0);
    const double denom = exact_marginal(p0, xt, sched, t);
    if (!(denom > 0.0))
        throw std::domain_error("exact_score_field: state has zero marginal probability");
    TokenGrid sub = xt;
    for (int l = 0; l < xt.levels; ++l) {
        for (int p = 0; p < xt.length; ++p) {
            if (xt.at(l, p) != p0.vocab.mask_id()) continue;
            for (int y = 0; y < p0.vocab.n_real; ++y) {
                sub.at(l, p) = static_cast<int32_t>(y);
                out.at(l, p, y) = exact_marginal(p0, sub, sched, t) / denom;
            }
            sub.at(l, p) = xt.at(l, p);
        }
    }
    return out;
}

double exact_conditional_score(const ConditionFamily& family, std::optional<int> value,
                               const TokenGrid& xt, const NoiseSchedule& sched, double t,
                               int level, int pos, int candidate) {
    if (!value)
        return exact_concrete_score(family.mixture(), xt, sched, t, level, pos, candidate);
    if (*value < 0 || static_cast<size_t>(*value) >= family.components.size())
        throw std::domain_error("exact_conditional_score: unknown condition value");
    return exact_concrete_score(family.components[*value], xt, sched, t, level, pos, candidate);
}

double tv_distance(const std::vector<TokenGrid>& samples, const ToyDistribution& p0) {
    if (samples.empty()) throw std::domain_error("tv_distance: no samples");
    std::map<std::vector<int32_t>, long> counts;
    for (const TokenGrid& s : samples) {
        if (s.contains_mask(p0.vocab))
            throw std::domain_error("tv_distance: samples must be mask-free");
        ++counts[s.cells];
    }
    const double n = static_cast<double>(samples.size());
    double total = 0.0;
    for (size_t i = 0; i < p0.support.size(); ++i) {
        auto it = counts.find(p0.support[i].cells);
        const double emp = (it == counts.end()) ? 0.0 : it->second / n;
        total += std::abs(emp - p0.probs[i]);
        if (it != counts.end()) counts.erase(it);
    }
    for (const auto& [cells, cnt] : counts) total += cnt / n;
    return 0.5 * total;
}

MarginalTable build_marginal_table(const ToyDistribution& p0, const NoiseSchedule& sched,
                                   double t) {
    const int cells = p0.levels * p0.length;
    check_capacity(p0.vocab, cells);
    MarginalTable table;
    table.vocab = p0.vocab;
    table.levels = p0.levels;
    table.length = p0.length;
    table.t = t;
    const uint64_t base = static_cast<uint64_t>(p0.vocab.n_states());
    uint64_t n_states = 1;
    for (int c = 0; c < cells; ++c) n_states *= base;
    table.marg.assign(n_states, 0.0);

    const CellMarginal m = forward_marginal(sched, t);
    const uint64_t mask = static_cast<uint64_t>(p0.vocab.mask_id());
    // Each clean sequence reaches exactly 2^cells states (mask patterns).
    for (size_t i = 0; i < p0.support.size(); ++i) {
        const auto& x0 = p0.support[i].cells;
        const uint64_t patterns = uint64_t{1} << cells;
        for (uint64_t pat = 0; pat < patterns; ++pat) {
            uint64_t key = 0;
            double w = p0.probs[i];
            for (int c = 0; c < cells; ++c) {
                const bool masked = (pat >> c) & 1;
                key = key * base + (masked ? mask : static_cast<uint64_t>(x0[c]));
                w *= masked ? m.mask : m.keep;
            }
            table.marg[key] += w;
        }
    }
    return table;
}

CachedExactScore::CachedExactScore(ToyDistribution p0, NoiseSchedule sched)
    : p0_(std::make_shared<const ToyDistribution>(std::move(p0))),
      sched_(sched),
      cache_(std::make_shared<std::map<double, MarginalTable>>()) {
    p0_->validate();
}

ScoreField CachedExactScore::operator()(const TokenGrid& grid, double t,
                                        const ConditionSet&) const {
    auto it = cache_->find(t);
    if (it == cache_->end())
        it = cache_->emplace(t, build_marginal_table(*p0_, sched_, t)).first;
    const MarginalTable& table = it->second;

    const Vocab& v = p0_->vocab;
    ScoreField f(grid.levels, grid.length, v.n_real, 1.0);
    const double denom = table.at(grid);
    if (denom <= 0.0) return f;
    TokenGrid sub = grid;
    for (int l = 0; l < grid.levels; ++l)
        for (int pos = 0; pos < grid.length; ++pos) {
            if (grid.at(l, pos) != v.mask_id()) continue;
            for (int y = 0; y < v.n_real; ++y) {
                sub.at(l, pos) = y;
                f.at(l, pos, y) = table.at(sub) / denom;
            }
            sub.at(l, pos) = grid.at(l, pos);
        }
    return f;
}

double expected_dse(const ToyDistribution& p0, const NoiseSchedule& sched, double t,
                    const std::function<ScoreField(const TokenGrid&, double)>& score_fn) {
    const int cells = p0.levels * p0.length;
    if (cells > 30) throw CapacityError("expected_dse: too many cells to enumerate patterns");
    const CellMarginal m = forward_marginal(sched, t);
    double total = 0.0;
    for (size_t i = 0; i < p0.support.size(); ++i) {
        const TokenGrid& x0 = p0.support[i];
        const uint64_t patterns = uint64_t{1} << cells;
        for (uint64_t pat = 0; pat < patterns; ++pat) {
            TokenGrid xt = x0;
            double w = p0.probs[i];
            for (int c = 0; c < cells; ++c) {
                if ((pat >> c) & 1) {
                    xt.cells[c] = p0.vocab.mask_id();
                    w *= m.mask;
                } else {
                    w *= m.keep;
                }
            }
            if (w == 0.0) continue;
            const ScoreField s = score_fn(xt, t);
            total += w * dse_loss(s, x0, xt, t, xt.levels, sched, p0.vocab).value;
        }
    }
    return total;
}

namespace {

// Deterministic standard normal keyed by (seed, state, cell, candidate).
double hashed_normal(uint64_t seed, uint64_t state, int cell, int cand) {
    uint64_t h = splitmix64(seed ^ splitmix64(state + 0x9e37));
    h = splitmix64(h ^ (static_cast<uint64_t>(cell) << 32) ^ static_cast<uint64_t>(cand));
    const double u1 = ((h >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = (splitmix64(h) >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace

ProbeReport dse_optimality_probe(const ToyDistribution& p0, const NoiseSchedule& sched,
                                 int trials, double noise_scale, uint64_t seed) {
    return dse_optimality_probe(p0, sched, trials, noise_scale, seed,
                                [&](const TokenGrid& xt, double tt) {
                                    return exact_score_field(p0, xt, sched, tt);
                                });
}

ProbeReport dse_optimality_probe(
    const ToyDistribution& p0, const NoiseSchedule& sched, int trials, double noise_scale,
    uint64_t seed, const std::function<ScoreField(const TokenGrid&, double)>& base_fn) {
    p0.validate();
    ProbeReport report;
    report.trials = trials;
    report.min_gap = 0.0;
    Rng rng(seed);
    bool first = true;
    for (int trial = 0; trial < trials; ++trial) {
        const double t = 0.05 + 0.9 * rng.uniform();
        const uint64_t trial_seed = splitmix64(seed + 0x51ed * (trial + 1));

        // Score-field cache per state; the base field is reused by the
        // perturbed one so both paths see identical base values.
        std::unordered_map<uint64_t, ScoreField> cache;
        auto exact_fn = [&](const TokenGrid& xt, double tt) -> ScoreField {
            const uint64_t key = encode_grid(xt, p0.vocab);
            auto it = cache.find(key);
            if (it == cache.end()) it = cache.emplace(key, base_fn(xt, tt)).first;
            return it->second;
        };
        auto perturbed_fn = [&](const TokenGrid& xt, double tt) -> ScoreField {
            ScoreField s = exact_fn(xt, tt);
            const uint64_t key = encode_grid(xt, p0.vocab);
            for (int l = 0; l < s.levels; ++l)
                for (int p = 0; p < s.length; ++p) {
                    if (xt.at(l, p) != p0.vocab.mask_id()) continue;
                    for (int y = 0; y < s.n_real; ++y) {
                        const int cell = l * s.length + p;
                        const double z = hashed_normal(trial_seed, key, cell, y);
                        s.at(l, p, y) *= std::exp(noise_scale * z);
                    }
                }
            return s;
        };

        ProbeTrial pt;
        pt.t = t;
        pt.exact_loss = expected_dse(p0, sched, t, exact_fn);
        pt.perturbed_loss = expected_dse(p0, sched, t, perturbed_fn);
        pt.violation = pt.perturbed_loss < pt.exact_loss - 1e-12;
        const double gap = pt.perturbed_loss - pt.exact_loss;
        if (first || gap < report.min_gap) report.min_gap = gap;
        first = false;
        if (pt.violation) ++report.violations;
        report.detail.push_back(pt);
    }
    return report;
}

double dse_stationarity_max_grad(const ToyDistribution& p0, const NoiseSchedule& sched,
                                 const std::vector<double>& times) {
    const CachedExactScore exact(p0, sched);
    return dse_stationarity_max_grad(
        p0, sched, times,
        [&exact](const TokenGrid& xt, double tt) { return exact(xt, tt, ConditionSet{}); });
}

double dse_stationarity_max_grad(
    const ToyDistribution& p0, const NoiseSchedule& sched, const std::vector<double>& times,
    const std::function<ScoreField(const TokenGrid&, double)>& score_fn) {
    p0.validate();
    const int cells = p0.levels * p0.length;
    check_capacity(p0.vocab, cells);
    if (cells > 30) throw CapacityError("dse_stationarity_max_grad: pattern space too large");
    const uint64_t base = static_cast<uint64_t>(p0.vocab.n_states());
    const int n_real = p0.vocab.n_real;
    const uint64_t mask = static_cast<uint64_t>(p0.vocab.mask_id());

    uint64_t n_states = 1;
    for (int c = 0; c < cells; ++c) n_states *= base;
    // Place values of base^(cells-1-c) for cell c in the packed key.
    std::vector<uint64_t> place(cells);
    place[cells - 1] = 1;
    for (int c = cells - 2; c >= 0; --c) place[c] = place[c + 1] * base;

    double max_abs = 0.0;
    std::vector<double> grad(n_states * cells * n_real);
    for (double t : times) {
        const MarginalTable table = build_marginal_table(p0, sched, t);
        const CellMarginal m = forward_marginal(sched, t);
        const double sig = sched.sigma(t);
        const double r = m.keep / m.mask;  // one-hot target magnitude
        std::fill(grad.begin(), grad.end(), 0.0);
        std::unordered_map<uint64_t, ScoreField> fields;
        auto field_at = [&](uint64_t key) -> const ScoreField& {
            auto it = fields.find(key);
            if (it == fields.end()) {
                ScoreField f = score_fn(decode_grid(key, p0.vocab, p0.levels, p0.length), t);
                if (f.levels != p0.levels || f.length != p0.length || f.n_real != n_real)
                    throw std::domain_error("dse_stationarity_max_grad: field shape mismatch");
                it = fields.emplace(key, std::move(f)).first;
            }
            return it->second;
        };

        // Accumulate per-clean-sequence gradient terms of the expectation.
        // The one-hot targets c are computed independently of the score
        // assignment under test.
        for (size_t i = 0; i < p0.support.size(); ++i) {
            const auto& x0 = p0.support[i].cells;
            const uint64_t patterns = uint64_t{1} << cells;
            for (uint64_t pat = 0; pat < patterns; ++pat) {
                if (pat == 0) continue;  // no masked cells, no gradient entries
                uint64_t key = 0;
                double w = p0.probs[i];
                for (int c = 0; c < cells; ++c) {
                    const bool masked = (pat >> c) & 1;
                    key = key * base + (masked ? mask : static_cast<uint64_t>(x0[c]));
                    w *= masked ? m.mask : m.keep;
                }
                const ScoreField& f = field_at(key);
                for (int c = 0; c < cells; ++c) {
                    if (!((pat >> c) & 1)) continue;
                    for (int y = 0; y < n_real; ++y) {
                        const uint64_t sub_key =
                            key + place[c] * (static_cast<uint64_t>(y) - mask);
                        if (!(table.marg[sub_key] > 0.0)) continue;  // boundary, excluded
                        const double s = f.at(c / p0.length, c % p0.length, y);
                        if (!(s > 0.0) || !std::isfinite(s))
                            throw std::domain_error(
                                "dse_stationarity_max_grad: scores must be finite and > 0");
                        const double cy = (x0[c] == y) ? r : 0.0;
                        grad[(key * cells + c) * n_real + y] += w * sig * (1.0 - cy / s);
                    }
                }
            }
        }
        for (double g : grad) max_abs = std::max(max_abs, std::abs(g));
    }
    return max_abs;
}

}  // namespace maskdiff
