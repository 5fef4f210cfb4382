#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "opgrpo/error.hpp"
#include "opgrpo/tensor.hpp"

namespace opgrpo {

struct AdamOptions {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
    long step = 0;

    static AdamState for_params(std::span<const Tensor> params) {
        AdamState s;
        for (const auto& p : params) {
            s.first_moment.emplace_back(p.size(), 0.0);
            s.second_moment.emplace_back(p.size(), 0.0);
        }
        return s;
    }
};

// Bias-corrected Adam update using each parameter's .grad (absent grad counts as zero).
inline void adam_step(std::span<Tensor> params, AdamState& state, const AdamOptions& opt) {
    if (state.first_moment.size() != params.size()) throw ShapeError("adam_step: state/parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.first_moment[i].size() != params[i].size()) throw ShapeError("adam_step: state/parameter shape mismatch");
        if (params[i].grad) {
            for (double g : *params[i].grad) {
                if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient");
            }
        }
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (!p.grad) continue;
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        const auto& g = *p.grad;
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * g[k];
            v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * g[k] * g[k];
            const double m_hat = m[k] / bc1;
            const double v_hat = v[k] / bc2;
            p.data[k] -= opt.learning_rate * m_hat / (std::sqrt(v_hat) + opt.epsilon);
        }
    }
}

}  // namespace opgrpo
