#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "maskdiff/errors.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

// Adaptive-moment optimizer with decoupled weight decay. Moments are keyed
// by parameter name so they can round-trip through checkpoints.
struct AdamW {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    long step_count = 0;
    std::map<std::string, std::vector<double>> m, v;

    void step(std::vector<std::pair<std::string, Mat>>& params) {
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (auto& [name, mat] : params) {
            auto& mw = m[name];
            auto& vw = v[name];
            if (mw.empty()) mw.assign(mat.data().size(), 0.0);
            if (vw.empty()) vw.assign(mat.data().size(), 0.0);
            if (mw.size() != mat.data().size())
                throw ConfigError("AdamW: moment size mismatch for " + name);
            const auto& g = mat.grad();
            auto& w = mat.data();
            for (size_t i = 0; i < w.size(); ++i) {
                mw[i] = beta1 * mw[i] + (1.0 - beta1) * g[i];
                vw[i] = beta2 * vw[i] + (1.0 - beta2) * g[i] * g[i];
                const double mhat = mw[i] / bc1;
                const double vhat = vw[i] / bc2;
                w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w[i]);
            }
        }
    }
};

}  // namespace maskdiff
