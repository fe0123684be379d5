#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "maskdiff/errors.hpp"
#include "maskdiff/token_grid.hpp"

namespace maskdiff {

// Concrete-score table for one grid at one time: for every cell, a strictly
// positive value per real token, estimating p(grid with cell := y) / p(grid).
// Scores for real (unmasked) cells are carried but ignored by the sampler.
struct ScoreField {
    int levels = 0;
    int length = 0;
    int n_real = 0;
    std::vector<double> values;  // [level][position][token]

    ScoreField() = default;
    ScoreField(int levels_, int length_, int n_real_, double fill = 1.0)
        : levels(levels_), length(length_), n_real(n_real_),
          values(static_cast<size_t>(levels_) * length_ * n_real_, fill) {
        if (levels_ < 1 || length_ < 1 || n_real_ < 1)
            throw std::domain_error("ScoreField: dimensions must be >= 1");
    }

    size_t index(int level, int pos, int token) const {
        return (static_cast<size_t>(level) * length + pos) * n_real + token;
    }

    double& at(int level, int pos, int token) { return values[index(level, pos, token)]; }
    double at(int level, int pos, int token) const { return values[index(level, pos, token)]; }

    const double* cell(int level, int pos) const {
        return values.data() + (static_cast<size_t>(level) * length + pos) * n_real;
    }
    double* cell(int level, int pos) {
        return values.data() + (static_cast<size_t>(level) * length + pos) * n_real;
    }

    bool same_shape(const ScoreField& o) const {
        return levels == o.levels && length == o.length && n_real == o.n_real;
    }

    // Entries are produced by exponentials, so anything non-finite or
    // non-positive means the producer blew up numerically.
    void check_positive() const {
        for (double v : values)
            if (!(v > 0.0) || !std::isfinite(v))
                throw NumericError("ScoreField: scores must be finite and > 0");
    }
};

}  // namespace maskdiff
