#pragma once

// Clipped group-relative surrogate with a sequence-level importance correction for
// replayed trajectories.
//
// Per-step ratios always compare p_theta against the iteration snapshot p_old, so the
// clip keeps bounding the update relative to p_old. A replayed member additionally
// carries a constant outer weight prod_{off-policy steps} p_old / p_off.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "opgrpo/error.hpp"
#include "opgrpo/flow_model.hpp"
#include "opgrpo/tensor.hpp"
#include "opgrpo/velocity_field.hpp"

namespace opgrpo {

enum class ObjectiveMode { sequence_corrected, naive_substitution, uncorrected };

inline std::string to_string(ObjectiveMode m) {
    switch (m) {
        case ObjectiveMode::sequence_corrected: return "sequence_corrected";
        case ObjectiveMode::naive_substitution: return "naive_substitution";
        case ObjectiveMode::uncorrected: return "uncorrected";
    }
    return "?";
}

struct CorrectionWeight {
    double value = 1.0;
    double log_value = 0.0;  // before clamping
    bool clamped = false;
};

struct GroupBatch {
    Condition condition;
    std::vector<Trajectory> members;
    std::vector<double> advantages;
    std::vector<CorrectionWeight> correction_weights;
    bool contains_buffer_member = false;
    bool degenerate = false;

    std::size_t size() const noexcept { return members.size(); }
};

struct CorrectionBounds {
    double log_min = -5.0;
    double log_max = 5.0;
};

// Weight from precomputed p_old scores (index t-1). Fully on-policy members get exactly 1.
inline CorrectionWeight correction_weight_from_scores(const Trajectory& member, std::span<const double> old_scores,
                                                      CorrectionBounds bounds = {}) {
    CorrectionWeight w;
    if (member.off_policy_steps() == 0) return w;
    if (static_cast<int>(old_scores.size()) != member.num_steps()) {
        throw ShapeError("correction_weight: score count mismatch");
    }
    double log_w = 0.0;
    for (int t = member.num_steps(); t > member.truncation_step; --t) {
        const double off = member.step_logprobs[static_cast<std::size_t>(t - 1)];
        if (!std::isfinite(off)) {
            throw StateError("correction_weight: missing p_off record for step " + std::to_string(t));
        }
        log_w += old_scores[static_cast<std::size_t>(t - 1)] - off;
    }
    if (!std::isfinite(log_w)) throw NumericError("correction_weight: non-finite log weight");
    w.log_value = log_w;
    w.clamped = log_w < bounds.log_min || log_w > bounds.log_max;
    w.value = std::exp(std::clamp(log_w, bounds.log_min, bounds.log_max));
    return w;
}

// prod over off-policy steps (t > member.truncation_step) of p_old / p_off, in log space.
inline CorrectionWeight correction_weight(const Trajectory& member, const VelocityField& vf_old,
                                          CorrectionBounds bounds = {}) {
    if (member.off_policy_steps() == 0) return {};
    return correction_weight_from_scores(member, score_trajectory(member, vf_old), bounds);
}

struct StepRatioRecord {
    int step = 0;
    double log_ratio = 0.0;
    double ratio = 1.0;
    bool clipped = false;
    bool off_policy_step = false;
};

inline bool clip_binds(double ratio, double advantage, double epsilon) {
    return (advantage > 0.0 && ratio > 1.0 + epsilon) || (advantage < 0.0 && ratio < 1.0 - epsilon);
}

// Per-step ratios p_theta / p_old (naive_substitution: p_theta / p_off on off-policy steps),
// in step order.
inline std::vector<StepRatioRecord> step_ratios(const Trajectory& member, const VelocityField& vf_theta,
                                                const VelocityField& vf_old, double advantage = 0.0,
                                                double epsilon = 0.2,
                                                ObjectiveMode mode = ObjectiveMode::sequence_corrected) {
    const std::vector<double> theta = score_trajectory(member, vf_theta);
    const std::vector<double> old = score_trajectory(member, vf_old);
    std::vector<StepRatioRecord> out;
    out.reserve(theta.size());
    for (int t = 1; t <= member.num_steps(); ++t) {
        const auto k = static_cast<std::size_t>(t - 1);
        StepRatioRecord r;
        r.step = t;
        r.off_policy_step = member.is_off_policy_step(t);
        const double denom =
            (mode == ObjectiveMode::naive_substitution && r.off_policy_step) ? member.step_logprobs[k] : old[k];
        r.log_ratio = theta[k] - denom;
        if (!std::isfinite(r.log_ratio)) throw NumericError("step_ratios: non-finite score");
        r.ratio = std::exp(r.log_ratio);
        r.clipped = clip_binds(r.ratio, advantage, epsilon);
        out.push_back(r);
    }
    return out;
}

struct ClipRecord {
    std::uint32_t group = 0;
    std::uint32_t member = 0;
    int step = 0;
    Origin origin = Origin::on_policy;
    bool off_policy_step = false;
    bool clipped = false;
};

enum class ClipFilter { all, on_policy_steps, off_policy_steps, buffer_members };

struct ClipStats {
    std::vector<ClipRecord> records;

    static bool selected(const ClipRecord& r, ClipFilter f) {
        switch (f) {
            case ClipFilter::all: return true;
            case ClipFilter::on_policy_steps: return !r.off_policy_step;
            case ClipFilter::off_policy_steps: return r.off_policy_step;
            case ClipFilter::buffer_members: return r.origin == Origin::buffer;
        }
        return false;
    }

    std::size_t count(ClipFilter f) const {
        return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [f](const auto& r) { return selected(r, f); }));
    }

    std::size_t clipped(ClipFilter f) const {
        return static_cast<std::size_t>(
            std::count_if(records.begin(), records.end(), [f](const auto& r) { return r.clipped && selected(r, f); }));
    }

    void append(const ClipStats& other) { records.insert(records.end(), other.records.begin(), other.records.end()); }
};

inline double clip_fraction(const ClipStats& stats, ClipFilter filter = ClipFilter::all) {
    const std::size_t n = stats.count(filter);
    if (n == 0) throw StateError("clip_fraction: no member-steps match the filter");
    return static_cast<double>(stats.clipped(filter)) / static_cast<double>(n);
}

struct ObjectiveOptions {
    ObjectiveMode mode = ObjectiveMode::sequence_corrected;
    double clip_epsilon = 0.2;
    // Optional per-step Gaussian KL(p_theta || p_ref) penalty; off when beta == 0.
    double kl_beta = 0.0;
    const VelocityField* kl_reference = nullptr;
};

struct SurrogateEvaluation {
    Var loss;
    ClipStats stats;
    std::vector<double> old_scores;  // p_old per batch row, for diagnostics
};

namespace detail {

struct LossRows {
    TransitionBatch batch;
    std::vector<double> advantage;
    std::vector<double> scale;  // per-row 1 / (T * G * groups)
    std::vector<ClipRecord> meta;
};

inline LossRows loss_rows(std::span<const GroupBatch> groups) {
    if (groups.empty()) throw StateError("surrogate_loss: no groups");
    LossRows rows;
    const double n_groups = static_cast<double>(groups.size());
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const GroupBatch& grp = groups[g];
        if (grp.members.empty()) throw StateError("surrogate_loss: empty group");
        if (grp.advantages.size() != grp.members.size()) throw StateError("surrogate_loss: advantages not populated");
        const double G = static_cast<double>(grp.members.size());
        for (std::size_t i = 0; i < grp.members.size(); ++i) {
            const Trajectory& m = grp.members[i];
            const double T = static_cast<double>(m.num_steps());
            const double scale = 1.0 / (T * G * n_groups);
            for (int t = m.num_steps(); t >= 1; --t) {
                rows.batch.append(m.latent(t), m.latent(t - 1), t, m.condition);
                rows.advantage.push_back(grp.advantages[i]);
                rows.scale.push_back(scale);
                rows.meta.push_back({static_cast<std::uint32_t>(g), static_cast<std::uint32_t>(i), t, m.origin,
                                     m.is_off_policy_step(t), false});
            }
        }
    }
    return rows;
}

inline Var kl_penalty(Tape& tape, VelocityField& theta, const VelocityField& reference, const TransitionBatch& batch,
                      double beta) {
    Var from = tape.constant_ref(batch.from);
    Var mu_theta = transition_mean(tape, theta, from, batch.steps, batch.conds);
    Var mu_ref = transition_mean(tape, reference, from, batch.steps, batch.conds);
    Tensor half_precision = Tensor::zeros(batch.size(), 1);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        half_precision.data[i] = 0.5 / theta.schedule().step_variance(static_cast<int>(batch.steps[i]));
    }
    Var kl = mul(row_sum(square(sub(mu_theta, mu_ref))), tape.constant(std::move(half_precision)));
    return mul_scalar(mean(kl), beta);
}

}  // namespace detail

// Loss (to minimise) = -mean_groups mean_members w_i * (1/T) sum_t min(r A, clip(r) A).
inline SurrogateEvaluation surrogate_loss(Tape& tape, std::span<const GroupBatch> groups, VelocityField& vf_theta,
                                          const VelocityField& vf_old, const ObjectiveOptions& opts) {
    detail::LossRows rows = detail::loss_rows(groups);
    const std::size_t n = rows.batch.size();
    const double eps = opts.clip_epsilon;

    std::vector<double> old = transition_logprobs(vf_old, rows.batch);
    Tensor denom = Tensor::zeros(n, 1);
    Tensor adv = Tensor::zeros(n, 1);
    Tensor weight = Tensor::zeros(n, 1);
    for (std::size_t r = 0; r < n; ++r) {
        const ClipRecord& m = rows.meta[r];
        const GroupBatch& grp = groups[m.group];
        const Trajectory& member = grp.members[m.member];
        denom.data[r] = old[r];
        double w = 1.0;
        if (opts.mode == ObjectiveMode::naive_substitution && m.off_policy_step) {
            denom.data[r] = member.step_logprobs[static_cast<std::size_t>(m.step - 1)];
        } else if (opts.mode == ObjectiveMode::sequence_corrected) {
            if (grp.correction_weights.size() != grp.members.size()) {
                throw StateError("surrogate_loss: correction weights not populated");
            }
            w = grp.correction_weights[m.member].value;
        }
        adv.data[r] = rows.advantage[r];
        weight.data[r] = w * rows.scale[r];
    }

    Var lp = transition_logprobs(tape, vf_theta, rows.batch);
    Var ratio = exp(sub(lp, tape.constant(std::move(denom))));
    Var a = tape.constant(std::move(adv));
    Var objective = minimum(mul(ratio, a), mul(clamp(ratio, 1.0 - eps, 1.0 + eps), a));
    Var loss = neg(sum(mul(objective, tape.constant(std::move(weight)))));
    if (opts.kl_beta > 0.0 && opts.kl_reference != nullptr) {
        loss = add(loss, detail::kl_penalty(tape, vf_theta, *opts.kl_reference, rows.batch, opts.kl_beta));
    }

    SurrogateEvaluation out{loss, {}, std::move(old)};
    out.stats.records = std::move(rows.meta);
    const auto& r_values = ratio.value().data;
    for (std::size_t r = 0; r < n; ++r) {
        out.stats.records[r].clipped = clip_binds(r_values[r], rows.advantage[r], eps);
    }
    return out;
}

// Plain on-policy clipped GRPO loss: ratios against p_old, no outer weight.
inline Var on_policy_grpo_loss(Tape& tape, std::span<const GroupBatch> groups, VelocityField& vf_theta,
                               const VelocityField& vf_old, double epsilon, ClipStats* stats = nullptr) {
    detail::LossRows rows = detail::loss_rows(groups);
    std::vector<double> old = transition_logprobs(vf_old, rows.batch);
    Var lp = transition_logprobs(tape, vf_theta, rows.batch);
    Var ratio = exp(sub(lp, tape.constant(Tensor::column(std::move(old)))));
    Var a = tape.constant(Tensor::column(rows.advantage));
    Var objective = minimum(mul(ratio, a), mul(clamp(ratio, 1.0 - epsilon, 1.0 + epsilon), a));
    if (stats != nullptr) {
        const auto& r_values = ratio.value().data;
        for (std::size_t r = 0; r < rows.meta.size(); ++r) {
            rows.meta[r].clipped = clip_binds(r_values[r], rows.advantage[r], epsilon);
            stats->records.push_back(rows.meta[r]);
        }
    }
    return neg(sum(mul(objective, tape.constant(Tensor::column(rows.scale)))));
}

}  // namespace opgrpo
