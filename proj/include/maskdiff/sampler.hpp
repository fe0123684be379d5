#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "maskdiff/condition.hpp"
#include "maskdiff/guidance.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/schedule.hpp"
#include "maskdiff/score_field.hpp"
#include "maskdiff/token_grid.hpp"

namespace maskdiff {

class MMDiT;

enum class ClampPolicy { ZeroAndRenormalize };
enum class UnmaskPolicy { ArgmaxScore };

struct SamplerConfig {
    int n_steps = 96;
    ClampPolicy clamp = ClampPolicy::ZeroAndRenormalize;
    UnmaskPolicy final_unmask = UnmaskPolicy::ArgmaxScore;
    uint64_t seed = 0;

    void validate() const;
};

// Any score estimator usable by the reverse sampler: the network, the
// tabular model, or the exact oracle.
using ScoreSource =
    std::function<ScoreField(const TokenGrid& grid, double t, const ConditionSet& cond)>;

// One first-order reverse step of size dt from time t. Each MASK cell draws
// from {stay, unmask to y} with P(y) = sigma(t) * s_y * dt, negatives from
// the truncation clamped to zero and the categorical renormalized. Unmasked
// cells never move.
TokenGrid euler_step(const TokenGrid& grid, double t, double dt, const ScoreField& scores,
                     const Vocab& vocab, const NoiseSchedule& sched, Rng& rng);

// Full reverse pass from the all-MASK grid at t=1 over a uniform time grid.
// With any non-null condition the score is the EPFG composition of the
// unconditional, per-condition and joint evaluations; an all-null condition
// samples from the unconditional score alone. Cells still masked after the
// last step take their argmax-score token.
TokenGrid sample(const ScoreSource& source, const ConditionSet& cond, int length, int levels,
                 const GuidanceWeights& w, const SamplerConfig& cfg, const Vocab& vocab,
                 const NoiseSchedule& sched);

TokenGrid sample(const MMDiT& model, const ConditionSet& cond, int length, int levels,
                 const GuidanceWeights& w, const SamplerConfig& cfg);

// Independent chains with per-chain substreams of cfg.seed.
std::vector<TokenGrid> sample_many(const ScoreSource& source, const ConditionSet& cond,
                                   int length, int levels, const GuidanceWeights& w,
                                   const SamplerConfig& cfg, const Vocab& vocab,
                                   const NoiseSchedule& sched, int n_chains);

// Per-symbol duration regressor; positive durations via softplus.
struct DurationModel {
    int n_symbols = 0;
    std::vector<double> theta;

    explicit DurationModel(int n_symbols_ = 0)
        : n_symbols(n_symbols_), theta(static_cast<size_t>(n_symbols_), 1.0) {}
    double duration(int sym) const;
};

// Sum of per-symbol durations, rounded to the nearest integer, floored at 1.
int predict_length(const std::vector<int32_t>& text, const DurationModel& model);

// Least-squares fit of total durations on (symbol sequence, length) pairs.
void fit_duration_model(DurationModel& model,
                        const std::vector<std::pair<std::vector<int32_t>, double>>& pairs,
                        long iterations, double lr, uint64_t seed);

}  // namespace maskdiff
