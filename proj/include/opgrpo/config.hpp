#pragma once

// Run configuration: one flat JSON object. See README for the key list.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "opgrpo/error.hpp"
#include "opgrpo/grpo_objective.hpp"
#include "opgrpo/rewards.hpp"
#include "opgrpo/velocity_field.hpp"

namespace opgrpo {

enum class TrainMode { sequence_corrected, naive_substitution, uncorrected, on_policy_baseline };

inline std::string to_string(TrainMode m) {
    switch (m) {
        case TrainMode::sequence_corrected: return "sequence_corrected";
        case TrainMode::naive_substitution: return "naive_substitution";
        case TrainMode::uncorrected: return "uncorrected";
        case TrainMode::on_policy_baseline: return "on_policy_baseline";
    }
    return "?";
}

inline TrainMode train_mode_from_string(const std::string& s) {
    if (s == "sequence_corrected") return TrainMode::sequence_corrected;
    if (s == "naive_substitution") return TrainMode::naive_substitution;
    if (s == "uncorrected") return TrainMode::uncorrected;
    if (s == "on_policy_baseline") return TrainMode::on_policy_baseline;
    throw ConfigError("mode", "unknown mode '" + s + "'");
}

inline ObjectiveMode objective_mode(TrainMode m) {
    switch (m) {
        case TrainMode::naive_substitution: return ObjectiveMode::naive_substitution;
        case TrainMode::uncorrected: return ObjectiveMode::uncorrected;
        default: return ObjectiveMode::sequence_corrected;
    }
}

struct TrainerConfig {
    std::uint64_t seed = 0;
    int iterations = 600;
    TrainMode mode = TrainMode::sequence_corrected;

    int group_size = 8;
    int groups_per_iteration = 16;
    double off_policy_fraction = 0.15;
    double clip_epsilon = 0.2;
    std::optional<int> truncation_step;       // default ceil(0.2 * T)
    std::optional<int> buffer_capacity;       // default: number of conditions
    double buffer_decay = 0.98;
    double correction_log_min = -5.0;
    double correction_log_max = 5.0;

    double learning_rate = 3e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    int inner_epochs = 1;
    double kl_beta = 0.0;
    int checkpoint_every = 0;

    int num_steps = 10;
    double sigma_max = 1.0;
    double sigma_min = 0.01;
    int latent_dim = 2;
    std::optional<int> num_conditions;        // default: number of reward centers (8 for ring rewards)
    std::vector<int> hidden = {32, 32};
    int time_embed_dim = 4;
    int cond_embed_dim = 4;
    double output_init_scale = 0.1;

    RewardSpec reward = default_reward();

    static RewardSpec default_reward() {
        RewardSpec r;
        r.kind = RewardKind::mode_proximity;
        r.dim = 2;
        r.centers = RewardSpec::ring_of_centers(8, 2.0);
        r.bandwidth = 0.5;
        return r;
    }

    int resolved_truncation_step() const {
        return truncation_step.value_or(static_cast<int>(std::ceil(0.2 * static_cast<double>(num_steps))));
    }

    int resolved_num_conditions() const {
        if (num_conditions) return *num_conditions;
        if (reward.kind == RewardKind::ring_distance || reward.centers.empty()) return 8;
        return static_cast<int>(reward.centers.size());
    }

    std::size_t resolved_capacity() const {
        return static_cast<std::size_t>(buffer_capacity.value_or(resolved_num_conditions()));
    }

    double effective_off_policy_fraction() const {
        return mode == TrainMode::on_policy_baseline ? 0.0 : off_policy_fraction;
    }

    FieldShape field_shape() const {
        FieldShape s;
        s.latent_dim = latent_dim;
        s.num_conditions = resolved_num_conditions();
        s.time_embed_dim = time_embed_dim;
        s.cond_embed_dim = cond_embed_dim;
        s.hidden = hidden;
        s.output_init_scale = output_init_scale;
        return s;
    }

    CorrectionBounds correction_bounds() const { return {correction_log_min, correction_log_max}; }

    void validate() const {
        auto positive = [](const char* field, double v) {
            if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(field, "must be positive");
        };
        if (iterations < 0) throw ConfigError("iterations", "must be non-negative");
        if (group_size < 2) throw ConfigError("group_size", "must be at least 2");
        if (groups_per_iteration < 1) throw ConfigError("groups_per_iteration", "must be positive");
        if (!(off_policy_fraction >= 0.0 && off_policy_fraction <= 1.0)) {
            throw ConfigError("off_policy_fraction", "must lie in [0, 1]");
        }
        positive("clip_epsilon", clip_epsilon);
        if (clip_epsilon >= 1.0) throw ConfigError("clip_epsilon", "must be below 1");
        if (num_steps < 1) throw ConfigError("num_steps", "must be positive");
        const int t_off = resolved_truncation_step();
        if (t_off < 0 || t_off > num_steps) throw ConfigError("truncation_step", "must lie in [0, num_steps]");
        if (buffer_capacity && *buffer_capacity < 1) throw ConfigError("buffer_capacity", "must be positive");
        if (!(buffer_decay > 0.0 && buffer_decay <= 1.0)) throw ConfigError("buffer_decay", "must lie in (0, 1]");
        if (!(correction_log_min < correction_log_max)) {
            throw ConfigError("correction_log_min", "must be below correction_log_max");
        }
        positive("learning_rate", learning_rate);
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1", "must lie in [0, 1)");
        if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2", "must lie in [0, 1)");
        positive("adam_epsilon", adam_epsilon);
        if (inner_epochs < 1) throw ConfigError("inner_epochs", "must be positive");
        if (!(kl_beta >= 0.0)) throw ConfigError("kl_beta", "must be non-negative");
        if (checkpoint_every < 0) throw ConfigError("checkpoint_every", "must be non-negative");
        positive("sigma_max", sigma_max);
        positive("sigma_min", sigma_min);
        if (sigma_min > sigma_max) throw ConfigError("sigma_min", "must not exceed sigma_max");
        if (latent_dim < 1) throw ConfigError("latent_dim", "must be positive");
        if (resolved_num_conditions() < 1) throw ConfigError("num_conditions", "must be positive");
        if (hidden.empty()) throw ConfigError("hidden", "need at least one hidden layer");
        for (int h : hidden) {
            if (h < 1) throw ConfigError("hidden", "layer widths must be positive");
        }
        if (time_embed_dim < 0) throw ConfigError("time_embed_dim", "must be non-negative");
        if (cond_embed_dim < 0) throw ConfigError("cond_embed_dim", "must be non-negative");
        reward.validate();
        if (reward.dim != latent_dim) throw ConfigError("reward.dim", "must equal latent_dim");
    }
};

inline nlohmann::json reward_to_json(const RewardSpec& r) {
    nlohmann::json j;
    j["kind"] = to_string(r.kind);
    j["dim"] = r.dim;
    j["centers"] = r.centers;
    j["bandwidth"] = r.bandwidth;
    j["radius"] = r.radius;
    return j;
}

namespace detail {

template <class T>
T get_field(const nlohmann::json& j, const std::string& key, const std::string& path) {
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + key, std::string("invalid value: ") + e.what());
    }
}

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& path) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.contains(it.key())) throw ConfigError(path + it.key(), "unknown key");
    }
}

}  // namespace detail

inline RewardSpec reward_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("reward", "must be an object");
    detail::reject_unknown(j, {"kind", "dim", "centers", "ring_modes", "bandwidth", "radius"}, "reward.");
    RewardSpec r;
    r.centers.clear();
    if (j.contains("kind")) r.kind = reward_kind_from_string(detail::get_field<std::string>(j, "kind", "reward."));
    if (j.contains("dim")) r.dim = detail::get_field<int>(j, "dim", "reward.");
    if (j.contains("bandwidth")) r.bandwidth = detail::get_field<double>(j, "bandwidth", "reward.");
    if (j.contains("radius")) r.radius = detail::get_field<double>(j, "radius", "reward.");
    if (j.contains("centers")) r.centers = detail::get_field<std::vector<Latent>>(j, "centers", "reward.");
    if (j.contains("ring_modes")) {
        const auto& rm = j.at("ring_modes");
        const int count = detail::get_field<int>(rm, "count", "reward.ring_modes.");
        const double radius = detail::get_field<double>(rm, "radius", "reward.ring_modes.");
        if (count < 1) throw ConfigError("reward.ring_modes.count", "must be positive");
        r.centers = RewardSpec::ring_of_centers(count, radius, r.dim);
    }
    return r;
}

inline nlohmann::json config_to_json(const TrainerConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["iterations"] = c.iterations;
    j["mode"] = to_string(c.mode);
    j["group_size"] = c.group_size;
    j["groups_per_iteration"] = c.groups_per_iteration;
    j["off_policy_fraction"] = c.off_policy_fraction;
    j["clip_epsilon"] = c.clip_epsilon;
    j["truncation_step"] = c.resolved_truncation_step();
    j["buffer_capacity"] = c.resolved_capacity();
    j["buffer_decay"] = c.buffer_decay;
    j["correction_log_min"] = c.correction_log_min;
    j["correction_log_max"] = c.correction_log_max;
    j["learning_rate"] = c.learning_rate;
    j["adam_beta1"] = c.adam_beta1;
    j["adam_beta2"] = c.adam_beta2;
    j["adam_epsilon"] = c.adam_epsilon;
    j["inner_epochs"] = c.inner_epochs;
    j["kl_beta"] = c.kl_beta;
    j["checkpoint_every"] = c.checkpoint_every;
    j["num_steps"] = c.num_steps;
    j["sigma_max"] = c.sigma_max;
    j["sigma_min"] = c.sigma_min;
    j["latent_dim"] = c.latent_dim;
    j["num_conditions"] = c.resolved_num_conditions();
    j["hidden"] = c.hidden;
    j["time_embed_dim"] = c.time_embed_dim;
    j["cond_embed_dim"] = c.cond_embed_dim;
    j["output_init_scale"] = c.output_init_scale;
    j["reward"] = reward_to_json(c.reward);
    return j;
}

// Applies the keys present in `j` on top of `base`; unknown keys are rejected.
inline TrainerConfig config_from_json(const nlohmann::json& j, TrainerConfig base = {}) {
    if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
    static const std::set<std::string> known = {
        "seed", "iterations", "mode", "group_size", "groups_per_iteration", "off_policy_fraction", "clip_epsilon",
        "truncation_step", "buffer_capacity", "buffer_decay", "correction_log_min", "correction_log_max",
        "learning_rate", "adam_beta1", "adam_beta2", "adam_epsilon", "inner_epochs", "kl_beta", "checkpoint_every",
        "num_steps", "sigma_max", "sigma_min", "latent_dim", "num_conditions", "hidden", "time_embed_dim",
        "cond_embed_dim", "output_init_scale", "reward"};
    detail::reject_unknown(j, known, "");
    TrainerConfig c = std::move(base);
    using detail::get_field;
    auto set = [&](const char* key, auto& field) {
        if (j.contains(key)) field = get_field<std::decay_t<decltype(field)>>(j, key, "");
    };
    auto set_opt = [&](const char* key, std::optional<int>& field) {
        if (!j.contains(key)) return;
        if (j.at(key).is_null()) field.reset();
        else field = get_field<int>(j, key, "");
    };
    set("seed", c.seed);
    set("iterations", c.iterations);
    if (j.contains("mode")) c.mode = train_mode_from_string(get_field<std::string>(j, "mode", ""));
    set("group_size", c.group_size);
    set("groups_per_iteration", c.groups_per_iteration);
    set("off_policy_fraction", c.off_policy_fraction);
    set("clip_epsilon", c.clip_epsilon);
    set_opt("truncation_step", c.truncation_step);
    set_opt("buffer_capacity", c.buffer_capacity);
    set("buffer_decay", c.buffer_decay);
    set("correction_log_min", c.correction_log_min);
    set("correction_log_max", c.correction_log_max);
    set("learning_rate", c.learning_rate);
    set("adam_beta1", c.adam_beta1);
    set("adam_beta2", c.adam_beta2);
    set("adam_epsilon", c.adam_epsilon);
    set("inner_epochs", c.inner_epochs);
    set("kl_beta", c.kl_beta);
    set("checkpoint_every", c.checkpoint_every);
    set("num_steps", c.num_steps);
    set("sigma_max", c.sigma_max);
    set("sigma_min", c.sigma_min);
    set("latent_dim", c.latent_dim);
    set_opt("num_conditions", c.num_conditions);
    set("hidden", c.hidden);
    set("time_embed_dim", c.time_embed_dim);
    set("cond_embed_dim", c.cond_embed_dim);
    set("output_init_scale", c.output_init_scale);
    if (j.contains("reward")) c.reward = reward_from_json(j.at("reward"));
    c.validate();
    return c;
}

inline TrainerConfig load_config(const std::string& path, TrainerConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot open config file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config", "'" + path + "' is not valid JSON: " + e.what());
    }
    return config_from_json(j, std::move(base));
}

// FNV-1a of the canonical (sorted-key) JSON dump.
inline std::uint64_t config_hash(const TrainerConfig& c) {
    const std::string s = config_to_json(c).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
}

}  // namespace opgrpo
