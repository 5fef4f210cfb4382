#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "opgrpo/error.hpp"
#include "opgrpo/flow_model.hpp"

namespace opgrpo {

enum class RewardKind { mode_proximity, multi_mode_coverage, ring_distance };

inline std::string to_string(RewardKind k) {
    switch (k) {
        case RewardKind::mode_proximity: return "mode_proximity";
        case RewardKind::multi_mode_coverage: return "multi_mode_coverage";
        case RewardKind::ring_distance: return "ring_distance";
    }
    return "?";
}

inline RewardKind reward_kind_from_string(const std::string& s) {
    if (s == "mode_proximity") return RewardKind::mode_proximity;
    if (s == "multi_mode_coverage") return RewardKind::multi_mode_coverage;
    if (s == "ring_distance") return RewardKind::ring_distance;
    throw ConfigError("reward.kind", "unknown reward kind '" + s + "'");
}

// Analytic rewards in [0, 1]. For mode_proximity the condition id indexes `centers`
// (modulo its length); multi_mode_coverage rewards the nearest center regardless of
// condition; ring_distance rewards |z| close to `radius`.
struct RewardSpec {
    RewardKind kind = RewardKind::mode_proximity;
    int dim = 2;
    std::vector<Latent> centers;
    double bandwidth = 0.5;
    double radius = 1.0;

    void validate() const {
        if (dim < 1) throw ConfigError("reward.dim", "must be positive");
        if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) throw ConfigError("reward.bandwidth", "must be positive");
        if (kind == RewardKind::ring_distance) {
            if (!(radius > 0.0) || !std::isfinite(radius)) throw ConfigError("reward.radius", "must be positive");
            return;
        }
        if (centers.empty()) throw ConfigError("reward.centers", "at least one center required");
        for (const auto& c : centers) {
            if (static_cast<int>(c.size()) != dim) throw ConfigError("reward.centers", "center dimension != reward.dim");
        }
    }

    // Evenly spaced modes on a circle in the first two coordinates.
    static std::vector<Latent> ring_of_centers(int count, double ring_radius, int dim = 2) {
        std::vector<Latent> out;
        for (int k = 0; k < count; ++k) {
            Latent c(static_cast<std::size_t>(dim), 0.0);
            const double a = 2.0 * std::numbers::pi * k / count;
            c[0] = ring_radius * std::cos(a);
            if (dim > 1) c[1] = ring_radius * std::sin(a);
            out.push_back(std::move(c));
        }
        return out;
    }
};

namespace detail {
inline double squared_distance(const Latent& a, const Latent& b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double d = a[j] - b[j];
        s += d * d;
    }
    return s;
}
}  // namespace detail

inline double reward(const Latent& z0, Condition c, const RewardSpec& spec) {
    if (static_cast<int>(z0.size()) != spec.dim) {
        throw ShapeError("reward: sample dimension " + std::to_string(z0.size()) + " != spec dimension " +
                         std::to_string(spec.dim));
    }
    const double bw2 = spec.bandwidth * spec.bandwidth;
    switch (spec.kind) {
        case RewardKind::mode_proximity: {
            const auto n = static_cast<int>(spec.centers.size());
            const Latent& center = spec.centers[static_cast<std::size_t>(((c.id % n) + n) % n)];
            return std::exp(-detail::squared_distance(z0, center) / bw2);
        }
        case RewardKind::multi_mode_coverage: {
            double best = 0.0;
            for (const auto& center : spec.centers) best = std::max(best, std::exp(-detail::squared_distance(z0, center) / bw2));
            return best;
        }
        case RewardKind::ring_distance: {
            const double r = std::sqrt(detail::squared_distance(z0, Latent(z0.size(), 0.0)));
            const double d = r - spec.radius;
            return std::exp(-d * d / bw2);
        }
    }
    return 0.0;
}

}  // namespace opgrpo
