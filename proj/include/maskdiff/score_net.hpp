#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "maskdiff/condition.hpp"
#include "maskdiff/schedule.hpp"
#include "maskdiff/score_field.hpp"
#include "maskdiff/tensor.hpp"
#include "maskdiff/token_grid.hpp"

namespace maskdiff {

// Multimodal diffusion-transformer score network, desk scale by default.
struct MMDiTConfig {
    int n_blocks = 2;      // reference scale 12
    int hidden = 64;       // reference scale 768
    int n_heads = 4;       // reference scale 12
    int max_levels = 2;    // reference scale 12
    int n_real = 4;        // real-token alphabet per level
    int id_dim = 8;        // identity embedding input width
    int n_emotions = 4;
    int n_text_symbols = 4;
    double schedule_eps = 1e-3;

    void validate() const;
};

// Per-block modulation vectors regressed from the pooled condition: gates
// and scale/shift pairs for the two modulated sublayers.
struct AdaLNParams {
    Mat alpha1, gamma1, beta1;
    Mat alpha2, gamma2, beta2;
};

// Holds the score graph of one forward pass; required for backward.
struct ForwardTrace {
    ScoreField scores;
    std::vector<Mat> score_nodes;  // one exp node per level, length x n_real
};

class MMDiT {
  public:
    MMDiT(const MMDiTConfig& cfg, uint64_t seed);

    // Builds the full autodiff graph. Null condition slots route through
    // learned null embeddings, so one network serves conditional and
    // unconditional evaluation.
    ForwardTrace forward(const TokenGrid& grid, double t, const ConditionSet& cond) const;

    // Value-only convenience wrapper.
    ScoreField eval(const TokenGrid& grid, double t, const ConditionSet& cond) const;

    std::vector<std::pair<std::string, Mat>>& parameters() { return params_; }
    const std::vector<std::pair<std::string, Mat>>& parameters() const { return params_; }
    Mat param(const std::string& name) const;
    size_t param_count() const;
    void zero_grad();
    // Throws NumericError naming the first non-finite parameter.
    void check_finite() const;

    const MMDiTConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const { return sched_; }

  private:
    MMDiTConfig cfg_;
    NoiseSchedule sched_;
    std::vector<std::pair<std::string, Mat>> params_;

    Mat p(const std::string& name) const;  // lookup, throws on miss
};

ScoreField mmdit_forward(const MMDiT& model, const TokenGrid& grid, double t,
                         const ConditionSet& cond);

// Accumulates d(loss)/d(params) into parameter grads given d(loss)/d(scores).
// Throws NumericError naming the first parameter with a non-finite gradient.
void backward(MMDiT& model, ForwardTrace& trace, const ScoreField& upstream);

}  // namespace maskdiff
