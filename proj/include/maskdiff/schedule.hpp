#pragma once

#include <cmath>
#include <stdexcept>

namespace maskdiff {

// Log-linear noise schedule on t in [0,1]:
//   sigma_bar(t) = -log(1 - (1-eps) t)
// so the per-cell mask probability 1 - exp(-sigma_bar(t)) = (1-eps) t grows
// linearly in t and caps at 1-eps.
struct NoiseSchedule {
    double eps = 1e-3;

    NoiseSchedule() = default;
    explicit NoiseSchedule(double eps_) : eps(eps_) {
        if (!(eps > 0.0) || !(eps < 1.0))
            throw std::domain_error("NoiseSchedule: eps must be in (0,1)");
    }

    void check_t(double t) const {
        if (!(t >= 0.0) || !(t <= 1.0))
            throw std::domain_error("NoiseSchedule: t must be in [0,1]");
    }

    // Cumulative noise. sigma_bar(0)=0, sigma_bar(1)=-log(eps).
    double sigma_bar(double t) const {
        check_t(t);
        return -std::log1p(-(1.0 - eps) * t);
    }

    // Instantaneous rate, d/dt sigma_bar.
    double sigma(double t) const {
        check_t(t);
        return (1.0 - eps) / (1.0 - (1.0 - eps) * t);
    }

    // Probability a cell that started real is masked at time t.
    double mask_prob(double t) const {
        check_t(t);
        return (1.0 - eps) * t;
    }

    double keep_prob(double t) const { return 1.0 - mask_prob(t); }
};

}  // namespace maskdiff
