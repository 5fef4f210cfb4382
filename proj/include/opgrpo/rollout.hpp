#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "opgrpo/error.hpp"
#include "opgrpo/flow_model.hpp"
#include "opgrpo/grpo_objective.hpp"
#include "opgrpo/replay_buffer.hpp"
#include "opgrpo/rewards.hpp"
#include "opgrpo/rng.hpp"

namespace opgrpo {

inline constexpr double kAdvantageStdFloor = 1e-6;

struct Advantages {
    std::vector<double> values;
    bool degenerate = false;
};

// (R_i - mean) / std with the population std; groups whose std falls below the floor
// are flagged degenerate and get all-zero advantages.
inline Advantages compute_advantages(std::span<const double> rewards, double std_floor = kAdvantageStdFloor) {
    if (rewards.size() < 2) throw StateError("compute_advantages: group size must be at least 2");
    for (double r : rewards) {
        if (!std::isfinite(r)) throw NumericError("compute_advantages: non-finite reward");
    }
    const double n = static_cast<double>(rewards.size());
    const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    const double sd = std::sqrt(var / n);
    Advantages out;
    out.values.assign(rewards.size(), 0.0);
    if (sd < std_floor) {
        out.degenerate = true;
        return out;
    }
    for (std::size_t i = 0; i < rewards.size(); ++i) out.values[i] = (rewards[i] - mean) / sd;
    return out;
}

// Keeps the prefix latents z_T..z_{t_off} and their p_off log-probs, resamples the
// remaining steps from `vf_current`. The result's truncation_step marks the split.
inline Trajectory truncate_and_regenerate(const Trajectory& prefix, int t_off, const VelocityField& vf_current,
                                          RandomStream& rng) {
    const int T = vf_current.num_steps();
    if (t_off < 0 || t_off > T) {
        throw StateError("truncate_and_regenerate: t_off " + std::to_string(t_off) + " outside [0, " +
                         std::to_string(T) + "]");
    }
    Trajectory out = rollout_trajectory(vf_current, prefix.condition, rng, t_off, &prefix);
    out.truncation_step = t_off;
    out.origin = Origin::buffer;
    out.birth_iteration = prefix.birth_iteration;
    return out;
}

// Where a group sits in the run; keys the random streams of its members.
struct RolloutKey {
    std::uint64_t seed = 0;
    int iteration = 0;
    std::size_t slot = 0;
};

struct GroupSettings {
    int group_size = 8;
    int truncation_step = 2;
    CorrectionBounds bounds{};
    double std_floor = kAdvantageStdFloor;
};

inline void shuffle_members(GroupBatch& group, RandomStream& rng) {
    auto& m = group.members;
    for (std::size_t i = m.size(); i > 1; --i) {
        const std::size_t j = rng.index(i);
        std::swap(m[i - 1], m[j]);
    }
}

// Samples the on-policy members of a group in one batched rollout.
inline std::vector<Trajectory> sample_fresh_members(const VelocityField& vf_old, Condition c, int count,
                                                    const RolloutKey& key) {
    std::vector<Trajectory> out;
    std::vector<RandomStream> streams;
    out.reserve(static_cast<std::size_t>(count));
    streams.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        streams.emplace_back(key.seed, StreamKind::member,
                             std::initializer_list<std::uint64_t>{static_cast<std::uint64_t>(key.iteration), key.slot,
                                                                  static_cast<std::uint64_t>(c.id),
                                                                  static_cast<std::uint64_t>(i)});
        out.push_back(empty_trajectory(vf_old, c));
        draw_initial_noise(out.back(), streams.back());
        out.back().birth_iteration = key.iteration;
    }
    std::vector<Trajectory*> rows;
    std::vector<RandomStream*> rngs;
    for (int i = 0; i < count; ++i) {
        rows.push_back(&out[static_cast<std::size_t>(i)]);
        rngs.push_back(&streams[static_cast<std::size_t>(i)]);
    }
    simulate_batch(vf_old, rows, vf_old.num_steps(), rngs);
    return out;
}

// Fills rewards, advantages, correction weights and flags of an assembled group.
inline void finalize_group(GroupBatch& group, const VelocityField& vf_old, const RewardSpec& spec,
                           const GroupSettings& settings) {
    std::vector<double> rewards;
    rewards.reserve(group.members.size());
    for (auto& m : group.members) {
        m.reward = reward(m.sample(), m.condition, spec);
        rewards.push_back(m.reward);
    }
    Advantages adv = compute_advantages(rewards, settings.std_floor);
    group.advantages = std::move(adv.values);
    group.degenerate = adv.degenerate;
    group.correction_weights.clear();
    group.contains_buffer_member = false;
    for (const auto& m : group.members) {
        group.correction_weights.push_back(correction_weight(m, vf_old, settings.bounds));
        group.contains_buffer_member = group.contains_buffer_member || m.origin == Origin::buffer;
    }
}

// G fresh members, or G-1 fresh members plus one replayed trajectory truncated at
// settings.truncation_step; shuffled, rewarded and normalised.
inline GroupBatch build_group(Condition c, const VelocityField& vf_old, const ReplayBuffer& buffer,
                              const RewardSpec& spec, const GroupSettings& settings, const RolloutKey& key,
                              bool use_buffer) {
    if (settings.group_size < 2) throw ConfigError("group_size", "must be at least 2");
    if (use_buffer && !buffer.contains(c)) {
        throw StateError("build_group: condition " + std::to_string(c.id) + " not in buffer");
    }
    GroupBatch group;
    group.condition = c;
    const int fresh = use_buffer ? settings.group_size - 1 : settings.group_size;
    group.members = sample_fresh_members(vf_old, c, fresh, key);
    if (use_buffer) {
        RandomStream regen(key.seed, StreamKind::regenerate,
                           {static_cast<std::uint64_t>(key.iteration), key.slot, static_cast<std::uint64_t>(c.id)});
        group.members.push_back(truncate_and_regenerate(buffer.retrieve(c), settings.truncation_step, vf_old, regen));
    }
    RandomStream order(key.seed, StreamKind::shuffle, {static_cast<std::uint64_t>(key.iteration), key.slot});
    shuffle_members(group, order);
    finalize_group(group, vf_old, spec, settings);
    return group;
}

}  // namespace opgrpo
