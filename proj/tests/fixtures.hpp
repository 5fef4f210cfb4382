#pragma once

// Small shared builders for the unit and acceptance tests.

#include <cmath>
#include <vector>

#include "opgrpo.hpp"

namespace fixtures {

using namespace opgrpo;

inline VelocityField small_field(std::uint64_t seed, int dim, int steps, int conditions = 2, double out_scale = 1.0) {
    FieldShape shape;
    shape.latent_dim = dim;
    shape.num_conditions = conditions;
    shape.time_embed_dim = 2;
    shape.cond_embed_dim = 2;
    shape.hidden = {6, 6};
    shape.output_init_scale = out_scale;
    return VelocityField(shape, NoiseSchedule::linear(steps), seed);
}

inline void perturb(VelocityField& vf, double scale, std::uint64_t seed) {
    RandomStream rng(seed);
    for (auto& p : vf.parameters()) {
        for (auto& v : p.data) v += scale * rng.normal();
    }
}

inline RewardSpec ring_reward(int dim, int modes, double radius, double bandwidth) {
    RewardSpec s;
    s.kind = RewardKind::mode_proximity;
    s.dim = dim;
    s.centers = RewardSpec::ring_of_centers(modes, radius, dim);
    s.bandwidth = bandwidth;
    return s;
}

// One on-policy group and one hybrid group on the D=1, T=2, G=2 toy, with theta a
// perturbed copy of the rollout snapshot so ratios differ from one.
struct GradientInstance {
    VelocityField old_field;
    VelocityField theta;
    std::vector<GroupBatch> groups;
};

inline GradientInstance gradient_instance(std::uint64_t seed) {
    GradientInstance inst{small_field(seed, 1, 2), small_field(seed, 1, 2), {}};
    VelocityField behaviour = small_field(seed, 1, 2);
    perturb(behaviour, 0.05, seed + 1000);
    perturb(inst.theta, 1e-3, seed + 2000);
    inst.theta.set_requires_grad(true);

    const RewardSpec spec = ring_reward(1, 2, 1.0, 1.5);
    ReplayBuffer buffer(2, 0.98);
    RandomStream rng(seed, StreamKind::evaluation, {seed});
    Trajectory stored = rollout_trajectory(behaviour, Condition{1}, rng);
    stored.reward = reward(stored.sample(), stored.condition, spec);
    buffer.offer_candidate(stored, 0);

    GroupSettings settings;
    settings.group_size = 2;
    settings.truncation_step = 1;
    inst.groups.push_back(build_group(Condition{0}, inst.old_field, buffer, spec, settings, {seed, 1, 0}, false));
    inst.groups.push_back(build_group(Condition{1}, inst.old_field, buffer, spec, settings, {seed, 1, 1}, true));
    return inst;
}

// Analytic gradient of the surrogate for `mode`, one vector per parameter tensor.
inline std::vector<std::vector<double>> analytic_gradient(GradientInstance& inst, ObjectiveMode mode) {
    inst.theta.zero_grad();
    Tape tape;
    ObjectiveOptions opts;
    opts.mode = mode;
    auto ev = surrogate_loss(tape, inst.groups, inst.theta, inst.old_field, opts);
    tape.backward(ev.loss);
    std::vector<std::vector<double>> out;
    for (const auto& p : inst.theta.parameters()) out.push_back(*p.grad);
    return out;
}

inline double loss_value(GradientInstance& inst, ObjectiveMode mode) {
    Tape tape(false);
    ObjectiveOptions opts;
    opts.mode = mode;
    return surrogate_loss(tape, inst.groups, inst.theta, inst.old_field, opts).loss.item();
}

}  // namespace fixtures
