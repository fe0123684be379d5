#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "maskdiff/condition.hpp"
#include "maskdiff/diffusion.hpp"
#include "maskdiff/errors.hpp"
#include "maskdiff/score_field.hpp"
#include "maskdiff/token_grid.hpp"

namespace maskdiff {

// Hard cap on enumerable state spaces (n_states^cells).
constexpr double kEnumerationCap = 1e6;

// Explicit finite distribution over clean grids.
struct ToyDistribution {
    Vocab vocab;
    int levels = 0;
    int length = 0;
    std::vector<TokenGrid> support;
    std::vector<double> probs;

    void validate() const;
    // Exact probability of a clean grid; 0 off support.
    double p0(const TokenGrid& x) const;
    size_t size() const { return support.size(); }
};

// Condition-indexed family of distributions: components[k] = p0(.|value k)
// with prior weights p(k). The unconditional law is the weighted mixture.
struct ConditionFamily {
    std::vector<double> weights;
    std::vector<ToyDistribution> components;

    void validate() const;
    ToyDistribution mixture() const;
};

// P(x_t) = sum_{x0} p0(x0) * prod_cells P(cell transition). Exact up to
// rounding; cost O(|support| * cells) per query.
double exact_marginal(const ToyDistribution& p0, const TokenGrid& xt, const NoiseSchedule& sched,
                      double t);

// exact_marginal(xt with cell := candidate) / exact_marginal(xt). The cell
// must currently hold the mask token, the candidate must be real, and the
// denominator must be positive.
double exact_concrete_score(const ToyDistribution& p0, const TokenGrid& xt,
                            const NoiseSchedule& sched, double t, int level, int pos,
                            int candidate);

// Per-cell concrete scores for every masked cell; unmasked cells filled
// with the neutral value 1.
ScoreField exact_score_field(const ToyDistribution& p0, const TokenGrid& xt,
                             const NoiseSchedule& sched, double t);

// As exact_concrete_score with p0 replaced by the conditional component, or
// by the mixture when the condition is null.
double exact_conditional_score(const ConditionFamily& family, std::optional<int> value,
                               const TokenGrid& xt, const NoiseSchedule& sched, double t,
                               int level, int pos, int candidate);

// Empirical-vs-exact total variation: 0.5 * sum |emp(x) - p0(x)| over the
// union of supports.
double tv_distance(const std::vector<TokenGrid>& samples, const ToyDistribution& p0);

// Dense table P(x_t = state) for every packed grid state at one time.
// Memory n_states^cells doubles; guarded by the enumeration cap.
struct MarginalTable {
    Vocab vocab;
    int levels = 0;
    int length = 0;
    double t = 0.0;
    std::vector<double> marg;  // indexed by encode_grid

    double at(const TokenGrid& g) const { return marg[encode_grid(g, vocab)]; }
};

MarginalTable build_marginal_table(const ToyDistribution& p0, const NoiseSchedule& sched,
                                   double t);

// Exact score source backed by one marginal table per distinct query time.
// Grids off the forward support (reachable only through the sampler's
// parallel-cell update resolving two cells at once) get a uniform field,
// since the ratio is 0/0 there and any finite choice only shifts O(dt^2)
// trajectory mass.
class CachedExactScore {
  public:
    CachedExactScore(ToyDistribution p0, NoiseSchedule sched);
    ScoreField operator()(const TokenGrid& grid, double t, const ConditionSet& cond) const;

  private:
    std::shared_ptr<const ToyDistribution> p0_;
    NoiseSchedule sched_;
    std::shared_ptr<std::map<double, MarginalTable>> cache_;
};

// Expected DSE over x0 ~ p0 and the full mask-pattern law at time t, for an
// arbitrary score assignment. Exact enumeration, no sampling.
double expected_dse(const ToyDistribution& p0, const NoiseSchedule& sched, double t,
                    const std::function<ScoreField(const TokenGrid& xt, double t)>& score_fn);

struct ProbeTrial {
    double t = 0.0;
    double exact_loss = 0.0;
    double perturbed_loss = 0.0;
    bool violation = false;  // perturbed < exact - 1e-12
};

struct ProbeReport {
    int trials = 0;
    int violations = 0;
    double min_gap = 0.0;  // min over trials of perturbed - exact
    std::vector<ProbeTrial> detail;
};

// Multiplicative log-normal perturbations of the exact score; the expected
// DSE must never drop below its value at the exact score.
ProbeReport dse_optimality_probe(const ToyDistribution& p0, const NoiseSchedule& sched,
                                 int trials, double noise_scale, uint64_t seed);

// Same probe around an arbitrary base score. exact_loss then reports the
// base score's expected DSE; violations flag perturbations that beat it,
// which a non-exact base cannot rule out.
ProbeReport dse_optimality_probe(const ToyDistribution& p0, const NoiseSchedule& sched,
                                 int trials, double noise_scale, uint64_t seed,
                                 const std::function<ScoreField(const TokenGrid&, double)>& base_fn);

// Max |d E[DSE] / d s| over all reachable states, masked cells and
// candidates with positive exact score, evaluated at the exact score. The
// expectation path sums per-clean-sequence gradient terms, so this checks
// that the aggregated target really is the marginal ratio.
double dse_stationarity_max_grad(const ToyDistribution& p0, const NoiseSchedule& sched,
                                 const std::vector<double>& times);

// Same gradient evaluated at an arbitrary score assignment instead of the
// exact one; zero only when the assignment matches the marginal ratios.
// Entries whose exact score is zero sit on the domain boundary and stay
// excluded regardless of the assignment's value there.
double dse_stationarity_max_grad(const ToyDistribution& p0, const NoiseSchedule& sched,
                                 const std::vector<double>& times,
                                 const std::function<ScoreField(const TokenGrid&, double)>& score_fn);

}  // namespace maskdiff
