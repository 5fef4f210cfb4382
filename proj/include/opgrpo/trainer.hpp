#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "opgrpo/adam.hpp"
#include "opgrpo/checkpoint.hpp"
#include "opgrpo/config.hpp"
#include "opgrpo/error.hpp"
#include "opgrpo/flow_model.hpp"
#include "opgrpo/grpo_objective.hpp"
#include "opgrpo/metrics.hpp"
#include "opgrpo/replay_buffer.hpp"
#include "opgrpo/rollout.hpp"
#include "opgrpo/schedule.hpp"
#include "opgrpo/velocity_field.hpp"

namespace opgrpo {

// A non-finite value during an iteration. `dump` holds the offending group when it
// could be isolated, otherwise a summary of every group.
class DivergenceError : public NumericError {
public:
    DivergenceError(const std::string& message, int iteration, nlohmann::json dump)
        : NumericError(message), iteration_(iteration), dump_(std::move(dump)) {}

    int iteration() const noexcept { return iteration_; }
    const nlohmann::json& dump() const noexcept { return dump_; }

private:
    int iteration_;
    nlohmann::json dump_;
};

// Which slots of an iteration replay a buffer entry, and the condition of each slot.
struct SlotPlan {
    std::vector<Condition> conditions;
    std::vector<bool> from_buffer;

    int buffer_slots() const { return static_cast<int>(std::count(from_buffer.begin(), from_buffer.end(), true)); }
};

inline nlohmann::json group_to_json(const GroupBatch& g) {
    nlohmann::json members = nlohmann::json::array();
    for (std::size_t i = 0; i < g.members.size(); ++i) {
        nlohmann::json m = trajectory_to_json(g.members[i]);
        m["advantage"] = i < g.advantages.size() ? g.advantages[i] : 0.0;
        if (i < g.correction_weights.size()) {
            m["log_weight"] = g.correction_weights[i].log_value;
            m["weight_clamped"] = g.correction_weights[i].clamped;
        }
        members.push_back(std::move(m));
    }
    return {{"condition", g.condition.id},
            {"degenerate", g.degenerate},
            {"contains_buffer_member", g.contains_buffer_member},
            {"members", members}};
}

class Trainer {
public:
    explicit Trainer(TrainerConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        field_ = VelocityField(cfg_.field_shape(), NoiseSchedule::linear(cfg_.num_steps, cfg_.sigma_max, cfg_.sigma_min),
                               cfg_.seed);
        reference_ = field_.frozen_copy();
        adam_ = AdamState::for_params(field_.parameters());
        buffer_.emplace(cfg_.resolved_capacity(), cfg_.buffer_decay);
    }

    const TrainerConfig& config() const noexcept { return cfg_; }
    TrainerConfig& mutable_config() noexcept { return cfg_; }
    int iteration() const noexcept { return iteration_; }
    bool finished() const noexcept { return iteration_ >= cfg_.iterations; }

    VelocityField& field() noexcept { return field_; }
    const VelocityField& field() const noexcept { return field_; }
    const VelocityField& reference_field() const noexcept { return reference_; }
    const ReplayBuffer& buffer() const { return *buffer_; }
    ReplayBuffer& buffer() { return *buffer_; }
    const AdamState& optimizer_state() const noexcept { return adam_; }
    const std::vector<IterationMetrics>& history() const noexcept { return history_; }

    GroupSettings group_settings() const {
        GroupSettings s;
        s.group_size = cfg_.group_size;
        s.truncation_step = cfg_.resolved_truncation_step();
        s.bounds = cfg_.correction_bounds();
        return s;
    }

    AdamOptions adam_options() const {
        return {cfg_.learning_rate, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_epsilon};
    }

    // Per-slot buffer/task decision and condition for `iteration`. The Bernoulli draws
    // happen for every mode so that a zero fraction reproduces the baseline plan.
    SlotPlan plan_slots(int iteration) const {
        const auto slots = static_cast<std::size_t>(cfg_.groups_per_iteration);
        const double fraction = buffer_->empty() ? 0.0 : cfg_.effective_off_policy_fraction();
        RandomStream plan(cfg_.seed, StreamKind::schedule, {static_cast<std::uint64_t>(iteration)});
        SlotPlan out;
        out.from_buffer.assign(slots, false);
        out.conditions.assign(slots, Condition{});
        std::size_t wanted = 0;
        for (std::size_t s = 0; s < slots; ++s) {
            if (plan.bernoulli(fraction) && wanted < buffer_->size()) {
                out.from_buffer[s] = true;
                ++wanted;
            }
        }
        const auto n_cond = static_cast<std::size_t>(cfg_.resolved_num_conditions());
        for (std::size_t s = 0; s < slots; ++s) {
            if (!out.from_buffer[s]) out.conditions[s] = Condition{static_cast<int>(plan.index(n_cond))};
        }
        if (wanted > 0) {
            RandomStream pick(cfg_.seed, StreamKind::buffer_sample, {static_cast<std::uint64_t>(iteration)});
            const auto chosen = buffer_->sample_conditions(wanted, pick);
            std::size_t k = 0;
            for (std::size_t s = 0; s < slots; ++s) {
                if (out.from_buffer[s]) out.conditions[s] = chosen[k++];
            }
        }
        return out;
    }

    // Rollout phase: builds every group of `iteration` against `snapshot`. Reads the
    // buffer, never mutates it.
    std::vector<GroupBatch> collect_groups(const VelocityField& snapshot, int iteration) const {
        const SlotPlan plan = plan_slots(iteration);
        const GroupSettings settings = group_settings();
        std::vector<GroupBatch> groups;
        groups.reserve(plan.conditions.size());
        for (std::size_t s = 0; s < plan.conditions.size(); ++s) {
            const RolloutKey key{cfg_.seed, iteration, s};
            groups.push_back(build_group(plan.conditions[s], snapshot, *buffer_, cfg_.reward, settings, key,
                                         plan.from_buffer[s]));
        }
        return groups;
    }

    // Offers each group's best fresh member, then decays once. Replayed members are
    // not candidates: they would re-enter with their old reward and never age out.
    int offer_groups(std::span<const GroupBatch> groups, int iteration) {
        int accepted = 0;
        for (const auto& g : groups) {
            std::vector<Trajectory> fresh;
            for (const auto& m : g.members) {
                if (m.origin == Origin::on_policy) fresh.push_back(m);
            }
            if (!fresh.empty() && buffer_->offer(fresh, iteration).accepted()) ++accepted;
        }
        buffer_->decay();
        return accepted;
    }

    ObjectiveOptions objective_options() const {
        ObjectiveOptions o;
        o.mode = objective_mode(cfg_.mode);
        o.clip_epsilon = cfg_.clip_epsilon;
        o.kl_beta = cfg_.kl_beta;
        o.kl_reference = cfg_.kl_beta > 0.0 ? &reference_ : nullptr;
        return o;
    }

    // One loss evaluation with gradients accumulated into the field's parameters.
    double loss_and_gradient(std::span<const GroupBatch> groups, const VelocityField& snapshot, ClipStats& stats) {
        field_.zero_grad();
        Tape tape;
        Var loss;
        if (cfg_.mode == TrainMode::on_policy_baseline) {
            loss = on_policy_grpo_loss(tape, groups, field_, snapshot, cfg_.clip_epsilon, &stats);
        } else {
            SurrogateEvaluation ev = surrogate_loss(tape, groups, field_, snapshot, objective_options());
            stats.append(ev.stats);
            loss = ev.loss;
        }
        const double value = loss.item();
        if (!std::isfinite(value)) throw NumericError("surrogate_loss: non-finite loss");
        tape.backward(loss);
        return value;
    }

    // Runs iteration iteration()+1 and returns its metrics.
    const IterationMetrics& step() {
        const auto start = std::chrono::steady_clock::now();
        const int it = iteration_ + 1;
        const std::uint64_t clamps_before = logprob_clamp_events().load();
        const VelocityField snapshot = field_.frozen_copy();
        const std::uint64_t hash_before = field_.parameter_hash();

        std::vector<GroupBatch> groups;
        try {
            groups = collect_groups(snapshot, it);
        } catch (const NumericError& e) {
            throw DivergenceError(std::string("rollout failed: ") + e.what(), it, nlohmann::json::object());
        }
        if (field_.parameter_hash() != hash_before) {
            throw StateError("parameters changed during the rollout phase");
        }

        IterationMetrics m;
        m.iteration = it;
        m.offers_accepted = offer_groups(groups, it);

        ClipStats stats;
        for (int epoch = 0; epoch < cfg_.inner_epochs; ++epoch) {
            try {
                const double loss = loss_and_gradient(groups, snapshot, stats);
                if (epoch == 0) m.loss = loss;
                adam_step(field_.parameters(), adam_, adam_options());
            } catch (const NumericError& e) {
                throw DivergenceError(std::string("iteration ") + std::to_string(it) + ": " + e.what(), it,
                                      isolate_offender(groups, snapshot));
            }
            if (!field_.parameters_finite()) {
                throw DivergenceError("iteration " + std::to_string(it) + ": non-finite parameters after update", it,
                                      isolate_offender(groups, snapshot));
            }
        }

        fill_metrics(m, groups, stats);
        m.logprob_clamps = logprob_clamp_events().load() - clamps_before;
        m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        iteration_ = it;
        history_.push_back(m);
        return history_.back();
    }

    // Runs until config().iterations; `on_iteration` sees each record as it is produced.
    void run(const std::function<void(const IterationMetrics&)>& on_iteration = {}) {
        while (!finished()) {
            const IterationMetrics& m = step();
            if (on_iteration) on_iteration(m);
        }
    }

    nlohmann::json checkpoint_json() const {
        nlohmann::json j;
        j["format"] = kCheckpointFormat;
        j["version"] = kCheckpointVersion;
        j["iteration"] = iteration_;
        j["config"] = config_to_json(cfg_);
        j["model"] = {{"latent_dim", field_.latent_dim()},
                      {"num_steps", field_.num_steps()},
                      {"num_conditions", field_.num_conditions()},
                      {"sigmas", field_.schedule().sigmas()},
                      {"parameters", parameters_to_json(field_)}};
        j["reference_parameters"] = parameters_to_json(reference_);
        j["optimizer"] = adam_to_json(adam_);
        j["buffer"] = buffer_to_json(*buffer_);
        // Every random stream is derived from (seed, iteration, ...), so the seed and the
        // iteration counter are the whole RNG state.
        j["rng"] = {{"seed", cfg_.seed}, {"next_iteration", iteration_ + 1}};
        return j;
    }

    void save_checkpoint(const std::filesystem::path& path) const { write_json_file(path, checkpoint_json()); }

    // Restores a trainer. `overrides` may change run-length and logging settings but must
    // describe the same model; a latent dimension or step count mismatch is rejected.
    static Trainer from_checkpoint_json(const nlohmann::json& j, std::optional<TrainerConfig> overrides = std::nullopt) {
        if (!j.is_object() || j.value("format", "") != kCheckpointFormat) {
            throw FormatError("not an opgrpo checkpoint");
        }
        if (j.value("version", 0) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
        TrainerConfig stored;
        try {
            stored = config_from_json(j.at("config"));
        } catch (const ConfigError& e) {
            throw FormatError(std::string("checkpoint config: ") + e.what());
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("checkpoint config: ") + e.what());
        }
        TrainerConfig cfg = overrides.value_or(stored);
        const auto& model = j.at("model");
        const int dim = detail::read_key<int>(model, "latent_dim");
        const int steps = detail::read_key<int>(model, "num_steps");
        if (cfg.latent_dim != dim) {
            throw FormatError("checkpoint latent_dim " + std::to_string(dim) + " does not match configured " +
                              std::to_string(cfg.latent_dim));
        }
        if (cfg.num_steps != steps) {
            throw FormatError("checkpoint num_steps " + std::to_string(steps) + " does not match configured " +
                              std::to_string(cfg.num_steps));
        }
        if (cfg.resolved_num_conditions() != detail::read_key<int>(model, "num_conditions")) {
            throw FormatError("checkpoint condition count does not match the configuration");
        }
        Trainer t(cfg);
        if (detail::read_key<std::vector<double>>(model, "sigmas") != t.field_.schedule().sigmas()) {
            throw FormatError("checkpoint noise schedule does not match the configuration");
        }
        parameters_from_json(t.field_, model.at("parameters"));
        parameters_from_json(t.reference_, j.at("reference_parameters"));
        t.adam_ = adam_from_json(j.at("optimizer"), t.field_);
        t.buffer_.emplace(buffer_from_json(j.at("buffer"), t.field_));
        t.iteration_ = detail::read_key<int>(j, "iteration");
        if (t.iteration_ < 0) throw FormatError("checkpoint: negative iteration");
        return t;
    }

    static Trainer load_checkpoint(const std::filesystem::path& path,
                                   std::optional<TrainerConfig> overrides = std::nullopt) {
        try {
            return from_checkpoint_json(read_json_file(path), std::move(overrides));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("'" + path.string() + "': " + e.what());
        }
    }

private:
    void fill_metrics(IterationMetrics& m, const std::vector<GroupBatch>& groups, const ClipStats& stats) const {
        const int T = field_.num_steps();
        double fresh_sum = 0.0, all_sum = 0.0;
        std::size_t fresh_n = 0, all_n = 0;
        m.max_reward = -std::numeric_limits<double>::infinity();
        std::vector<double> lp_abs(static_cast<std::size_t>(T), 0.0);
        double lw_sum = 0.0;
        std::size_t lw_n = 0;
        for (const auto& g : groups) {
            if (g.degenerate) ++m.degenerate_groups;
            if (g.contains_buffer_member) ++m.buffer_groups;
            for (std::size_t i = 0; i < g.members.size(); ++i) {
                const Trajectory& tr = g.members[i];
                all_sum += tr.reward;
                ++all_n;
                m.max_reward = std::max(m.max_reward, tr.reward);
                if (tr.origin == Origin::on_policy) {
                    fresh_sum += tr.reward;
                    ++fresh_n;
                }
                for (int t = 1; t <= T; ++t) lp_abs[static_cast<std::size_t>(t - 1)] += std::abs(tr.step_logprobs[static_cast<std::size_t>(t - 1)]);
                if (tr.off_policy_steps() > 0) {
                    const CorrectionWeight& w = g.correction_weights[i];
                    lw_sum += w.log_value;
                    ++lw_n;
                    ++m.off_policy_members;
                    m.log_weight_min = lw_n == 1 ? w.log_value : std::min(m.log_weight_min, w.log_value);
                    m.log_weight_max = lw_n == 1 ? w.log_value : std::max(m.log_weight_max, w.log_value);
                    if (w.clamped) ++m.weights_clamped;
                }
            }
        }
        m.mean_reward = fresh_n > 0 ? fresh_sum / static_cast<double>(fresh_n) : 0.0;
        m.mean_reward_all = all_n > 0 ? all_sum / static_cast<double>(all_n) : 0.0;
        if (lw_n > 0) m.log_weight_mean = lw_sum / static_cast<double>(lw_n);
        for (double& v : lp_abs) v /= static_cast<double>(std::max<std::size_t>(all_n, 1));
        m.logprob_abs = std::move(lp_abs);
        m.buffer_size = buffer_->size();
        m.buffer_mean_retention = buffer_->mean_retention();
        if (!stats.records.empty()) m.clip_fraction = clip_fraction(stats, ClipFilter::all);
        if (stats.count(ClipFilter::on_policy_steps) > 0) m.clip_fraction_on = clip_fraction(stats, ClipFilter::on_policy_steps);
        if (stats.count(ClipFilter::off_policy_steps) > 0) m.clip_fraction_off = clip_fraction(stats, ClipFilter::off_policy_steps);
    }

    // Re-evaluates each group alone to find the first one producing a non-finite loss.
    nlohmann::json isolate_offender(const std::vector<GroupBatch>& groups, const VelocityField& snapshot) const {
        VelocityField probe = field_.frozen_copy();
        for (std::size_t g = 0; g < groups.size(); ++g) {
            bool bad = false;
            try {
                Tape tape(false);
                std::span<const GroupBatch> one(&groups[g], 1);
                ObjectiveOptions o = objective_options();
                const double v = surrogate_loss(tape, one, probe, snapshot, o).loss.item();
                bad = !std::isfinite(v);
            } catch (const Error&) {
                bad = true;
            }
            if (bad) {
                nlohmann::json j = group_to_json(groups[g]);
                j["slot"] = g;
                return j;
            }
        }
        nlohmann::json all = nlohmann::json::array();
        for (const auto& g : groups) all.push_back({{"condition", g.condition.id}, {"degenerate", g.degenerate}});
        return {{"note", "no single group reproduces the failure"}, {"groups", all}};
    }

    TrainerConfig cfg_;
    VelocityField field_;
    VelocityField reference_;
    AdamState adam_;
    std::optional<ReplayBuffer> buffer_;
    int iteration_ = 0;
    std::vector<IterationMetrics> history_;
};

}  // namespace opgrpo
