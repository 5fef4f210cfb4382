#pragma once

// Independent oracles used by the tests and the acceptance runs. They deliberately
// avoid the code paths they check: the buffer reference is a plain vector scan, the
// Gaussian density is written out longhand, and the importance-sampling check draws
// its own samples.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "opgrpo/error.hpp"
#include "opgrpo/flow_model.hpp"
#include "opgrpo/grpo_objective.hpp"
#include "opgrpo/replay_buffer.hpp"
#include "opgrpo/schedule.hpp"
#include "opgrpo/tensor.hpp"
#include "opgrpo/velocity_field.hpp"

namespace opgrpo::diagnostics {

// ---------------------------------------------------------------------------
// Brute-force replay buffer

struct BufferEvent {
    enum class Kind { offer, decay };
    Kind kind = Kind::offer;
    int condition = 0;
    std::vector<double> rewards;  // the group's rewards; the first maximum is the candidate
    int iteration = 0;

    static BufferEvent offer(int condition, std::vector<double> rewards, int iteration = 0) {
        return {Kind::offer, condition, std::move(rewards), iteration};
    }
    static BufferEvent decay() { return {Kind::decay, 0, {}, 0}; }
};

struct ReferenceEntry {
    int condition = 0;
    double reward = 0.0;
    double retention = 0.0;
    int insert_iteration = 0;
};

// Replays the events with linear scans. Entries are kept sorted by condition so the
// result can be compared field by field with ReplayBuffer::entries().
inline std::vector<ReferenceEntry> reference_buffer_replay(std::span<const BufferEvent> events, std::size_t capacity,
                                                           double decay_rate) {
    std::vector<ReferenceEntry> entries;
    for (const auto& ev : events) {
        if (ev.kind == BufferEvent::Kind::decay) {
            for (auto& e : entries) e.retention *= decay_rate;
            continue;
        }
        if (ev.rewards.empty()) continue;
        double best = ev.rewards[0];
        for (double r : ev.rewards) {
            if (r > best) best = r;
        }
        const ReferenceEntry fresh{ev.condition, best, best, ev.iteration};
        auto same = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.condition == ev.condition; });
        if (same != entries.end()) {
            if (best > same->retention) *same = fresh;
        } else if (entries.size() < capacity) {
            entries.push_back(fresh);
        } else {
            std::size_t victim = 0;
            for (std::size_t i = 1; i < entries.size(); ++i) {
                const auto& a = entries[i];
                const auto& b = entries[victim];
                if (a.retention < b.retention || (a.retention == b.retention && a.condition < b.condition)) victim = i;
            }
            if (best > entries[victim].retention) entries[victim] = fresh;
        }
    }
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.condition < b.condition; });
    return entries;
}

// A minimal trajectory carrying only what the buffer looks at.
inline Trajectory token_trajectory(int condition, double reward, int iteration = 0) {
    Trajectory tr;
    tr.condition = Condition{condition};
    tr.latents = {Latent{0.0}, Latent{0.0}};
    tr.step_logprobs = {0.0};
    tr.reward = reward;
    tr.birth_iteration = iteration;
    tr.truncation_step = 1;
    return tr;
}

// Applies the same events to a real ReplayBuffer.
inline void apply_events(ReplayBuffer& buffer, std::span<const BufferEvent> events) {
    for (const auto& ev : events) {
        if (ev.kind == BufferEvent::Kind::decay) {
            buffer.decay();
            continue;
        }
        std::vector<Trajectory> group;
        group.reserve(ev.rewards.size());
        for (double r : ev.rewards) group.push_back(token_trajectory(ev.condition, r, ev.iteration));
        buffer.offer(group, ev.iteration);
    }
}

// Empty string when equal, otherwise a description of the first difference.
inline std::string compare_buffer(const ReplayBuffer& buffer, const std::vector<ReferenceEntry>& reference) {
    if (buffer.size() != reference.size()) {
        return "size " + std::to_string(buffer.size()) + " vs reference " + std::to_string(reference.size());
    }
    std::size_t i = 0;
    for (const auto& [id, e] : buffer.entries()) {
        const auto& r = reference[i++];
        if (id != r.condition) return "condition " + std::to_string(id) + " vs " + std::to_string(r.condition);
        if (e.trajectory.reward != r.reward) return "reward mismatch at condition " + std::to_string(id);
        if (e.retention_score != r.retention) return "retention mismatch at condition " + std::to_string(id);
        if (e.insert_iteration != r.insert_iteration) return "insert iteration mismatch at condition " + std::to_string(id);
    }
    return {};
}

// ---------------------------------------------------------------------------
// Gaussian density

inline double reference_gaussian_logpdf(double x, double mean, double stddev) {
    if (!(stddev > 0.0)) throw DomainError("reference_gaussian_logpdf: std must be positive");
    const double u = (x - mean) / stddev;
    return -0.5 * u * u - std::log(stddev) - 0.5 * std::log(2.0 * std::numbers::pi);
}

// Isotropic multivariate version: sum of the per-coordinate densities.
inline double reference_gaussian_logpdf(std::span<const double> x, std::span<const double> mean, double stddev) {
    if (x.size() != mean.size()) throw ShapeError("reference_gaussian_logpdf: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += reference_gaussian_logpdf(x[i], mean[i], stddev);
    return s;
}

// ---------------------------------------------------------------------------
// Importance-sampling unbiasedness on a one-step, one-dimensional setup

struct UnbiasednessReport {
    std::size_t samples = 0;
    double on_policy_mean = 0.0;       // E_old[g] by direct sampling
    double reweighted_mean = 0.0;      // E_off[w g]
    double on_policy_stderr = 0.0;
    double reweighted_stderr = 0.0;
    double combined_stderr = 0.0;
    double abs_difference = 0.0;
    bool within_three_sigma = false;
    double max_log_weight_error = 0.0;  // vs correction_weight, over the checked samples
    std::size_t weights_checked = 0;
    bool all_weights_one = false;       // only meaningful when p_off == p_old
};

struct UnbiasednessSetup {
    double old_mean = 0.0;
    double off_mean = 0.5;
    double stddev = 1.0;
    std::uint64_t seed = 12345;
    std::size_t pointwise_checks = 1000;
};

// A field whose velocity is the constant `bias` everywhere: all weights zero, so the
// output is the final bias. With schedule sigmas {0, 1} the single step has mean
// z_1 + bias and unit variance.
inline VelocityField constant_velocity_field(double bias) {
    FieldShape shape;
    shape.latent_dim = 1;
    shape.num_conditions = 1;
    shape.time_embed_dim = 1;
    shape.cond_embed_dim = 1;
    shape.hidden = {2};
    VelocityField vf(shape, NoiseSchedule::from_sigmas({0.0, 1.0}), 0);
    for (auto& p : vf.parameters()) std::fill(p.data.begin(), p.data.end(), 0.0);
    vf.parameters().back().data[0] = bias;
    return vf;
}

// g(x) = 1[x > 0]. (a) averages g over draws from p_old; (b) averages w g over draws
// from p_off with w = p_old / p_off. The first `pointwise_checks` draws of (b) are also
// pushed through correction_weight and compared in log space.
inline UnbiasednessReport is_unbiasedness_check(std::size_t num_samples, const UnbiasednessSetup& setup = {}) {
    if (num_samples < 2) throw DomainError("is_unbiasedness_check: need at least two samples");
    if (setup.stddev != 1.0) throw DomainError("is_unbiasedness_check: the one-step field has unit step variance");
    UnbiasednessReport rep;
    rep.samples = num_samples;
    std::mt19937_64 rng(setup.seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    const double n = static_cast<double>(num_samples);

    double sum_a = 0.0;
    for (std::size_t i = 0; i < num_samples; ++i) {
        const double x = setup.old_mean + setup.stddev * unit(rng);
        sum_a += x > 0.0 ? 1.0 : 0.0;
    }
    rep.on_policy_mean = sum_a / n;
    rep.on_policy_stderr = std::sqrt(rep.on_policy_mean * (1.0 - rep.on_policy_mean) / n);

    const VelocityField vf_old = constant_velocity_field(setup.old_mean);
    const CorrectionBounds wide{-1e300, 1e300};
    double sum_b = 0.0, sum_b2 = 0.0;
    bool ones = true;
    for (std::size_t i = 0; i < num_samples; ++i) {
        const double x = setup.off_mean + setup.stddev * unit(rng);
        const double log_w = reference_gaussian_logpdf(x, setup.old_mean, setup.stddev) -
                             reference_gaussian_logpdf(x, setup.off_mean, setup.stddev);
        const double w = std::exp(log_w);
        const double wg = x > 0.0 ? w : 0.0;
        sum_b += wg;
        sum_b2 += wg * wg;
        ones = ones && w == 1.0;
        if (i < setup.pointwise_checks) {
            Trajectory tr;
            tr.condition = Condition{0};
            tr.latents = {Latent{x}, Latent{0.0}};
            tr.step_logprobs = {reference_gaussian_logpdf(x, setup.off_mean, setup.stddev)};
            tr.total_logprob = tr.step_logprobs[0];
            tr.truncation_step = 0;
            tr.origin = Origin::buffer;
            const CorrectionWeight cw = correction_weight(tr, vf_old, wide);
            rep.max_log_weight_error = std::max(rep.max_log_weight_error, std::abs(cw.log_value - log_w));
            ++rep.weights_checked;
        }
    }
    rep.reweighted_mean = sum_b / n;
    const double var_b = std::max(0.0, sum_b2 / n - rep.reweighted_mean * rep.reweighted_mean);
    rep.reweighted_stderr = std::sqrt(var_b / n);
    rep.combined_stderr = std::hypot(rep.on_policy_stderr, rep.reweighted_stderr);
    rep.abs_difference = std::abs(rep.on_policy_mean - rep.reweighted_mean);
    rep.within_three_sigma = rep.abs_difference < 3.0 * rep.combined_stderr;
    rep.all_weights_one = ones;
    return rep;
}

// ---------------------------------------------------------------------------
// Finite differences

struct GradientCheckReport {
    std::size_t checked = 0;
    double max_relative_error = 0.0;
    double max_absolute_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
};

// Compares `analytic` (one vector per parameter tensor) with central differences of
// `loss`, which must evaluate the loss from the current contents of `params`. The
// relative error is |a - n| / max(|a|, |n|, abs_floor).
inline GradientCheckReport finite_difference_check(const std::function<double()>& loss, std::span<Tensor> params,
                                                   const std::vector<std::vector<double>>& analytic, double h = 1e-5,
                                                   double abs_floor = 1e-6) {
    if (analytic.size() != params.size()) throw ShapeError("finite_difference_check: gradient count mismatch");
    GradientCheckReport rep;
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (analytic[p].size() != params[p].size()) throw ShapeError("finite_difference_check: gradient shape mismatch");
        for (std::size_t k = 0; k < params[p].size(); ++k) {
            double& x = params[p].data[k];
            const double saved = x;
            x = saved + h;
            const double up = loss();
            x = saved - h;
            const double down = loss();
            x = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[p][k];
            const double abs_err = std::abs(a - numeric);
            const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), abs_floor});
            ++rep.checked;
            rep.max_absolute_error = std::max(rep.max_absolute_error, abs_err);
            if (rel > rep.max_relative_error) {
                rep.max_relative_error = rel;
                rep.worst_param = p;
                rep.worst_index = k;
            }
        }
    }
    return rep;
}

}  // namespace opgrpo::diagnostics
