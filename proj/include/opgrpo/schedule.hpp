#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "opgrpo/error.hpp"

namespace opgrpo {

// Noise levels sigma_0 < sigma_1 < ... < sigma_T indexed by level k.
//
// Step t (1 <= t <= T) moves z_t (level t) to z_{t-1} (level t-1):
//   mean     = z_t + v(z_t, t, c) * delta(t),   delta(t) = sigma_t - sigma_{t-1}
//   variance = sigma_t^2 * delta(t)
// so the transition sharpens as sigma -> 0.
class NoiseSchedule {
public:
    NoiseSchedule() = default;

    // sigma_T = sigma_max, linear down to sigma_1 = sigma_min, sigma_0 = 0.
    static NoiseSchedule linear(int steps, double sigma_max = 1.0, double sigma_min = 0.01) {
        if (steps < 1) throw DomainError("NoiseSchedule: num_steps must be positive");
        if (!(sigma_max > 0.0) || !(sigma_min > 0.0) || sigma_min > sigma_max) {
            throw DomainError("NoiseSchedule: need 0 < sigma_min <= sigma_max");
        }
        std::vector<double> sigmas(static_cast<std::size_t>(steps) + 1, 0.0);
        if (steps == 1) {
            sigmas[1] = sigma_max;
        } else {
            for (int k = 1; k <= steps; ++k) {
                sigmas[static_cast<std::size_t>(k)] =
                    sigma_min + (sigma_max - sigma_min) * static_cast<double>(k - 1) / static_cast<double>(steps - 1);
            }
        }
        NoiseSchedule s = from_sigmas(std::move(sigmas));
        s.sigma_max_ = sigma_max;
        s.sigma_min_ = sigma_min;
        return s;
    }

    // sigmas[k] is the level of z_k; must be strictly increasing with sigmas[0] >= 0.
    static NoiseSchedule from_sigmas(std::vector<double> sigmas) {
        if (sigmas.size() < 2) throw DomainError("NoiseSchedule: need at least one step");
        if (!(sigmas[0] >= 0.0)) throw DomainError("NoiseSchedule: sigma_0 must be non-negative");
        for (std::size_t k = 1; k < sigmas.size(); ++k) {
            if (!(sigmas[k] > sigmas[k - 1])) {
                throw DomainError("NoiseSchedule: sigmas must be strictly decreasing toward t = 0");
            }
        }
        NoiseSchedule s;
        s.sigmas_ = std::move(sigmas);
        s.sigma_max_ = s.sigmas_.back();
        s.sigma_min_ = s.sigmas_[1];
        return s;
    }

    int num_steps() const noexcept { return static_cast<int>(sigmas_.size()) - 1; }
    const std::vector<double>& sigmas() const noexcept { return sigmas_; }
    double sigma_max() const noexcept { return sigma_max_; }
    double sigma_min() const noexcept { return sigma_min_; }

    double sigma(int level) const {
        if (level < 0 || level > num_steps()) throw StateError("NoiseSchedule: level " + std::to_string(level) + " out of range");
        return sigmas_[static_cast<std::size_t>(level)];
    }

    void check_step(int t) const {
        if (t < 1 || t > num_steps()) {
            throw StateError("NoiseSchedule: step " + std::to_string(t) + " outside [1, " + std::to_string(num_steps()) + "]");
        }
    }

    double delta(int t) const {
        check_step(t);
        return sigmas_[static_cast<std::size_t>(t)] - sigmas_[static_cast<std::size_t>(t - 1)];
    }

    double step_variance(int t) const {
        const double s = sigma(t);
        const double v = s * s * delta(t);
        if (!(v > 0.0)) throw DomainError("NoiseSchedule: non-positive variance at step " + std::to_string(t));
        return v;
    }

    double step_std(int t) const { return std::sqrt(step_variance(t)); }

private:
    std::vector<double> sigmas_;
    double sigma_max_ = 0.0;
    double sigma_min_ = 0.0;
};

}  // namespace opgrpo
