#pragma once

// Euler/SDE samplers over a VelocityField and exact Gaussian transition log-probs.
//
// Latent indexing: trajectory.latents[k] = z_k for k = 0..T (z_T is the initial noise,
// z_0 the sample). step_logprobs[t - 1] = log p(z_{t-1} | z_t, c) for t = 1..T.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "opgrpo/error.hpp"
#include "opgrpo/rng.hpp"
#include "opgrpo/tensor.hpp"
#include "opgrpo/velocity_field.hpp"

namespace opgrpo {

inline constexpr double kLogProbClamp = 1e6;

// Number of step log-probs that hit the +-kLogProbClamp bound since process start.
inline std::atomic<std::uint64_t>& logprob_clamp_events() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

struct Condition {
    int id = 0;
    friend bool operator==(const Condition&, const Condition&) = default;
};

enum class Origin { on_policy, buffer };

inline const char* to_string(Origin o) { return o == Origin::on_policy ? "on_policy" : "buffer"; }

struct Trajectory {
    Condition condition;
    std::vector<Latent> latents;
    std::vector<double> step_logprobs;
    double total_logprob = 0.0;
    double reward = 0.0;
    Origin origin = Origin::on_policy;
    int birth_iteration = 0;
    // Steps t > truncation_step were copied from an off-policy prefix; on-policy
    // trajectories carry truncation_step == T (no off-policy steps).
    int truncation_step = 0;

    int num_steps() const noexcept { return static_cast<int>(step_logprobs.size()); }
    int off_policy_steps() const noexcept { return num_steps() - truncation_step; }
    bool is_off_policy_step(int t) const noexcept { return t > truncation_step; }
    const Latent& sample() const { return latents.front(); }
    const Latent& latent(int level) const { return latents.at(static_cast<std::size_t>(level)); }

    double sum_logprobs() const { return std::accumulate(step_logprobs.begin(), step_logprobs.end(), 0.0); }

    void validate() const {
        if (latents.size() != step_logprobs.size() + 1) {
            throw ShapeError("Trajectory: expected T+1 latents for T step log-probs");
        }
        for (double lp : step_logprobs) {
            if (!std::isfinite(lp)) throw NumericError("Trajectory: non-finite step log-prob");
        }
        if (std::abs(total_logprob - sum_logprobs()) > 1e-9 * std::max(1.0, std::abs(total_logprob))) {
            throw StateError("Trajectory: total_logprob disagrees with the sum of step log-probs");
        }
        if (truncation_step < 0 || truncation_step > num_steps()) {
            throw StateError("Trajectory: truncation_step out of range");
        }
    }
};

// A batch of transitions z_t -> z_{t-1}; rows are independent.
struct TransitionBatch {
    Tensor from;  // z_t, [N x D]
    Tensor to;    // z_{t-1}, [N x D]
    std::vector<std::size_t> steps;
    std::vector<std::size_t> conds;

    std::size_t size() const noexcept { return steps.size(); }

    void append(const Latent& z, const Latent& z_next, int t, Condition c) {
        from.data.insert(from.data.end(), z.begin(), z.end());
        to.data.insert(to.data.end(), z_next.begin(), z_next.end());
        steps.push_back(static_cast<std::size_t>(t));
        conds.push_back(static_cast<std::size_t>(c.id));
        from.shape = {steps.size(), z.size()};
        to.shape = from.shape;
    }

    void append_trajectory(const Trajectory& traj) {
        for (int t = traj.num_steps(); t >= 1; --t) append(traj.latent(t), traj.latent(t - 1), t, traj.condition);
    }
};

namespace detail {

// log N(to; mean, std_t^2 I) per row, clamped to +-kLogProbClamp.
inline Var gaussian_step_logprob(Tape& tape, Var mean, const Tensor& to, std::span<const std::size_t> steps,
                                 const NoiseSchedule& schedule) {
    const std::size_t n = steps.size();
    const double dim = static_cast<double>(to.cols());
    Tensor half_precision = Tensor::zeros(n, 1);
    Tensor normalizer = Tensor::zeros(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        const int t = static_cast<int>(steps[i]);
        const double var = schedule.step_variance(t);
        half_precision.data[i] = 0.5 / var;
        normalizer.data[i] = dim * std::log(std::sqrt(var)) + 0.5 * dim * std::log(2.0 * std::numbers::pi);
    }
    Var residual = sub(tape.constant_ref(to), mean);
    Var quad = row_sum(square(residual));
    Var lp = sub(mul(neg(quad), tape.constant(std::move(half_precision))), tape.constant(std::move(normalizer)));
    for (double v : lp.value().data) {
        if (std::abs(v) > kLogProbClamp) logprob_clamp_events().fetch_add(1, std::memory_order_relaxed);
    }
    return clamp(lp, -kLogProbClamp, kLogProbClamp);
}

template <class Field>
Var transition_mean(Tape& tape, Field& vf, Var from, std::span<const std::size_t> steps,
                    std::span<const std::size_t> conds) {
    const std::size_t n = steps.size();
    const std::size_t d = from.cols();
    Tensor dsig = Tensor::zeros(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double ds = vf.schedule().delta(static_cast<int>(steps[i]));
        for (std::size_t j = 0; j < d; ++j) dsig.data[i * d + j] = ds;
    }
    Var v = vf.forward(tape, from, steps, conds);
    return add(from, mul(v, tape.constant(std::move(dsig))));
}

}  // namespace detail

// Per-row log p(to | from) as an [N x 1] Var; differentiable w.r.t. the field's
// parameters when `vf` is non-const and its parameters require grad.
template <class Field>
Var transition_logprobs(Tape& tape, Field& vf, const TransitionBatch& batch) {
    if (batch.size() == 0) throw ShapeError("transition_logprobs: empty batch");
    Var from = tape.constant_ref(batch.from);
    Var mean = detail::transition_mean(tape, vf, from, batch.steps, batch.conds);
    return detail::gaussian_step_logprob(tape, mean, batch.to, batch.steps, vf.schedule());
}

inline std::vector<double> transition_logprobs(const VelocityField& vf, const TransitionBatch& batch) {
    Tape tape(false);
    return transition_logprobs(tape, vf, batch).value().data;
}

// z' = z + delta(t) * v(z, t, c)
inline Latent euler_step(const Latent& z, int t, const VelocityField& vf, Condition c) {
    vf.check_latent(z);
    const double ds = vf.schedule().delta(t);
    Latent v = vf.predict(z, t, c.id);
    Latent out(z.size());
    for (std::size_t j = 0; j < z.size(); ++j) out[j] = z[j] + ds * v[j];
    return out;
}

// Deterministic ODE sample from z_T.
inline Latent sample_ode(Latent z, const VelocityField& vf, Condition c) {
    for (int t = vf.num_steps(); t >= 1; --t) z = euler_step(z, t, vf, c);
    return z;
}

struct StepSample {
    Latent next;
    double logprob = 0.0;
};

// One stochastic transition with caller-supplied standard-normal noise.
inline StepSample sde_step_with_noise(const Latent& z, int t, const VelocityField& vf, Condition c,
                                      std::span<const double> noise) {
    vf.check_latent(z);
    if (noise.size() != z.size()) throw ShapeError("sde_step: noise dimension mismatch");
    const double std_t = vf.schedule().step_std(t);
    Tape tape(false);
    const std::size_t step[] = {static_cast<std::size_t>(t)};
    const std::size_t cid[] = {static_cast<std::size_t>(c.id)};
    Var mean = detail::transition_mean(tape, vf, tape.constant(Tensor::row(z)), step, cid);
    Tensor next = Tensor::row(Latent(z.size()));
    for (std::size_t j = 0; j < z.size(); ++j) next.data[j] = mean.value().data[j] + std_t * noise[j];
    const double lp = detail::gaussian_step_logprob(tape, mean, next, step, vf.schedule()).item();
    return {next.data, lp};
}

inline StepSample sde_step(const Latent& z, int t, const VelocityField& vf, Condition c, RandomStream& rng) {
    Latent noise(z.size());
    for (double& e : noise) e = rng.normal();
    return sde_step_with_noise(z, t, vf, c, noise);
}

inline double transition_logprob(const Latent& z_next, const Latent& z, int t, const VelocityField& vf, Condition c) {
    vf.check_latent(z);
    vf.check_latent(z_next);
    TransitionBatch batch;
    batch.append(z, z_next, t, c);
    return transition_logprobs(vf, batch).front();
}

// Runs the SDE sampler from level `from_level` down to 0 for every trajectory in
// `trajs` (whose latents[from_level] must be set), one random stream per row.
inline void simulate_batch(const VelocityField& vf, std::span<Trajectory*> trajs, int from_level,
                           std::span<RandomStream*> rngs) {
    const std::size_t n = trajs.size();
    if (n == 0) return;
    if (rngs.size() != n) throw ShapeError("simulate_batch: one random stream per trajectory required");
    const auto d = static_cast<std::size_t>(vf.latent_dim());
    std::vector<std::size_t> conds(n);
    for (std::size_t i = 0; i < n; ++i) conds[i] = static_cast<std::size_t>(trajs[i]->condition.id);
    for (int t = from_level; t >= 1; --t) {
        const double std_t = vf.schedule().step_std(t);
        Tensor from = Tensor::zeros(n, d);
        for (std::size_t i = 0; i < n; ++i) {
            const Latent& z = trajs[i]->latent(t);
            std::copy(z.begin(), z.end(), from.data.begin() + static_cast<std::ptrdiff_t>(i * d));
        }
        Tape tape(false);
        const std::vector<std::size_t> steps(n, static_cast<std::size_t>(t));
        Var mean = detail::transition_mean(tape, vf, tape.constant_ref(from), steps, conds);
        Tensor next = Tensor::zeros(n, d);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                next.data[i * d + j] = mean.value().data[i * d + j] + std_t * rngs[i]->normal();
            }
        }
        Var lp = detail::gaussian_step_logprob(tape, mean, next, steps, vf.schedule());
        for (std::size_t i = 0; i < n; ++i) {
            Trajectory& tr = *trajs[i];
            tr.latents[static_cast<std::size_t>(t - 1)] =
                Latent(next.data.begin() + static_cast<std::ptrdiff_t>(i * d),
                       next.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
            tr.step_logprobs[static_cast<std::size_t>(t - 1)] = lp.value().data[i];
        }
    }
    for (Trajectory* tr : trajs) tr->total_logprob = tr->sum_logprobs();
}

inline Trajectory empty_trajectory(const VelocityField& vf, Condition c) {
    Trajectory tr;
    tr.condition = c;
    tr.latents.assign(static_cast<std::size_t>(vf.num_steps()) + 1, Latent(static_cast<std::size_t>(vf.latent_dim())));
    tr.step_logprobs.assign(static_cast<std::size_t>(vf.num_steps()), 0.0);
    tr.truncation_step = vf.num_steps();
    return tr;
}

inline void draw_initial_noise(Trajectory& tr, RandomStream& rng) {
    for (double& v : tr.latents.back()) v = rng.normal();
}

// Checks that `prefix` can seed a mixed trajectory truncated at t_off.
inline void check_prefix(const Trajectory& prefix, const VelocityField& vf, int t_off) {
    const int T = vf.num_steps();
    if (t_off < 0 || t_off > T) {
        throw StateError("truncation step " + std::to_string(t_off) + " outside [0, " + std::to_string(T) + "]");
    }
    if (prefix.num_steps() != T || static_cast<int>(prefix.latents.size()) != T + 1) {
        throw ShapeError("prefix trajectory has " + std::to_string(prefix.num_steps()) + " steps, schedule has " +
                         std::to_string(T));
    }
    if (prefix.condition.id < 0 || prefix.condition.id >= vf.num_conditions()) {
        throw ShapeError("prefix trajectory condition out of range");
    }
    for (int t = T; t > t_off; --t) {
        if (!std::isfinite(prefix.step_logprobs[static_cast<std::size_t>(t - 1)])) {
            throw StateError("prefix trajectory lacks a finite log-prob record for step " + std::to_string(t));
        }
    }
}

// Samples a full trajectory. With a prefix, steps T..t_off+1 (latents z_T..z_{t_off}
// and their log-probs) are copied and steps t_off..1 are sampled from `vf`.
// t_off == T ignores the prefix entirely.
inline Trajectory rollout_trajectory(const VelocityField& vf, Condition c, RandomStream& rng,
                                     std::optional<int> t_off = std::nullopt, const Trajectory* prefix = nullptr) {
    const int T = vf.num_steps();
    if (prefix != nullptr) {
        const int cut = t_off.value_or(T);
        check_prefix(*prefix, vf, cut);
        if (cut < T) {
            Trajectory tr = *prefix;
            tr.truncation_step = cut;
            for (int k = cut - 1; k >= 0; --k) tr.latents[static_cast<std::size_t>(k)].assign(tr.latents[0].size(), 0.0);
            for (int t = cut; t >= 1; --t) tr.step_logprobs[static_cast<std::size_t>(t - 1)] = 0.0;
            Trajectory* rows[] = {&tr};
            RandomStream* streams[] = {&rng};
            simulate_batch(vf, rows, cut, streams);
            return tr;
        }
        c = prefix->condition;
    } else if (t_off && (*t_off < 0 || *t_off > T)) {
        throw StateError("truncation step out of range");
    }
    Trajectory tr = empty_trajectory(vf, c);
    draw_initial_noise(tr, rng);
    Trajectory* rows[] = {&tr};
    RandomStream* streams[] = {&rng};
    simulate_batch(vf, rows, T, streams);
    return tr;
}

// log p(z_{t-1} | z_t, c) under `vf` for t = 1..T, returned in step order (index t-1).
inline std::vector<double> score_trajectory(const Trajectory& traj, const VelocityField& vf) {
    if (traj.num_steps() != vf.num_steps()) throw ShapeError("score_trajectory: step count mismatch");
    TransitionBatch batch;
    batch.append_trajectory(traj);
    std::vector<double> rows = transition_logprobs(vf, batch);
    // append_trajectory emits t = T..1; flip to step order.
    return std::vector<double>(rows.rbegin(), rows.rend());
}

}  // namespace opgrpo
