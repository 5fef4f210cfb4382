#include <catch_amalgamated.hpp>

#include <cmath>

#include "fixtures.hpp"

using namespace opgrpo;
using namespace fixtures;
using Catch::Matchers::WithinAbs;

namespace {

// D=1, one step of unit variance; velocity equals `bias` everywhere.
VelocityField unit_step_field(double bias) { return diagnostics::constant_velocity_field(bias); }

Trajectory one_step_member(double x_next, double p_off_logprob, int truncation_step) {
    Trajectory tr;
    tr.condition = Condition{0};
    tr.latents = {Latent{x_next}, Latent{0.0}};
    tr.step_logprobs = {p_off_logprob};
    tr.total_logprob = p_off_logprob;
    tr.truncation_step = truncation_step;
    tr.origin = truncation_step == 0 ? Origin::buffer : Origin::on_policy;
    return tr;
}

GroupBatch single_member_group(Trajectory m, double advantage) {
    GroupBatch g;
    g.condition = m.condition;
    g.members = {std::move(m)};
    g.advantages = {advantage};
    g.correction_weights = {CorrectionWeight{}};
    return g;
}

}  // namespace

TEST_CASE("identical policies give unit ratios", "[objective]") {
    const auto vf = small_field(1, 2, 10);
    RandomStream rng(1);
    const auto tr = rollout_trajectory(vf, Condition{1}, rng);
    for (const auto& r : step_ratios(tr, vf, vf.frozen_copy(), 1.0)) {
        CHECK(r.ratio == 1.0);
        CHECK_FALSE(r.clipped);
    }
}

TEST_CASE("single-step ratio of 1.3", "[objective]") {
    // Old mean 0, theta mean m with -(1-m)^2/2 + 1/2 = log 1.3 at x = 1.
    const double m = 1.0 - std::sqrt(1.0 - 2.0 * std::log(1.3));
    const auto old = unit_step_field(0.0);
    const auto theta = unit_step_field(m);
    const auto tr = one_step_member(1.0, 0.0, 1);
    const auto r = step_ratios(tr, theta, old, 1.0, 0.2);
    REQUIRE(r.size() == 1);
    CHECK_THAT(r[0].ratio, WithinAbs(1.3, 1e-12));
    CHECK(r[0].clipped);
    CHECK_FALSE(step_ratios(tr, theta, old, -1.0, 0.2)[0].clipped);
}

TEST_CASE("naive substitution cancels p_old", "[objective]") {
    RandomStream rng(3);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const auto old = unit_step_field(rng.normal());
        const auto theta = unit_step_field(rng.normal());
        const double x = 2.0 * rng.normal();
        const double p_off = -0.9189385 - 0.5 * rng.uniform() * 4.0;
        const auto tr = one_step_member(x, p_off, 0);
        const double s_theta = score_trajectory(tr, theta)[0];
        const double s_old = score_trajectory(tr, old)[0];
        const auto naive = step_ratios(tr, theta, old, 1.0, 0.2, ObjectiveMode::naive_substitution)[0];
        const auto standard = step_ratios(tr, theta, old, 1.0, 0.2, ObjectiveMode::sequence_corrected)[0];
        worst = std::max(worst, std::abs(naive.log_ratio - (s_theta - p_off)));
        worst = std::max(worst, std::abs(naive.log_ratio + (p_off - s_old) - standard.log_ratio));
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("correction weight examples", "[objective]") {
    const auto vf = small_field(4, 2, 10);
    RandomStream rng(4);
    const auto fresh = rollout_trajectory(vf, Condition{0}, rng);
    const auto w_on = correction_weight(fresh, vf);
    CHECK(w_on.value == 1.0);
    CHECK(w_on.log_value == 0.0);

    auto replay = fresh;
    replay.truncation_step = 2;
    CHECK_THAT(correction_weight(replay, vf.frozen_copy()).log_value, WithinAbs(0.0, 1e-9));

    const auto synthetic = one_step_member(0.0, -1.5, 0);
    const double old_scores[] = {-1.0};
    const auto w = correction_weight_from_scores(synthetic, old_scores);
    CHECK_THAT(w.value, WithinAbs(std::exp(0.5), 1e-12));
    CHECK_THAT(w.value, WithinAbs(1.6487, 1e-4));

    const double far[] = {9.0};
    const auto clamped = correction_weight_from_scores(synthetic, far);
    CHECK(clamped.clamped);
    CHECK(clamped.log_value == 10.5);
    CHECK_THAT(clamped.value, WithinAbs(std::exp(5.0), 1e-9));

    auto missing = synthetic;
    missing.step_logprobs[0] = std::nan("");
    CHECK_THROWS_AS(correction_weight_from_scores(missing, old_scores), StateError);
}

TEST_CASE("correction weight ignores theta", "[objective]") {
    auto inst = gradient_instance(5);
    const auto& g = inst.groups[1];
    for (std::size_t i = 0; i < g.members.size(); ++i) {
        const auto before = correction_weight(g.members[i], inst.old_field);
        perturb(inst.theta, 0.3, 99);
        const auto after = correction_weight(g.members[i], inst.old_field);
        CHECK(before.log_value == after.log_value);
    }
    // Replacing the weights by detached plain numbers leaves the gradient unchanged.
    auto with_weights = analytic_gradient(inst, ObjectiveMode::sequence_corrected);
    for (auto& grp : inst.groups) {
        for (auto& w : grp.correction_weights) w = CorrectionWeight{w.value, 0.0, false};
    }
    CHECK(analytic_gradient(inst, ObjectiveMode::sequence_corrected) == with_weights);
}

TEST_CASE("loss at theta == old is minus the weighted mean advantage", "[objective]") {
    auto inst = gradient_instance(6);
    VelocityField theta = inst.old_field.frozen_copy();
    for (auto mode : {ObjectiveMode::sequence_corrected, ObjectiveMode::naive_substitution, ObjectiveMode::uncorrected}) {
        Tape tape(false);
        ObjectiveOptions opts;
        opts.mode = mode;
        auto ev = surrogate_loss(tape, inst.groups, theta, inst.old_field, opts);
        double expected = 0.0;
        for (const auto& g : inst.groups) {
            for (std::size_t i = 0; i < g.members.size(); ++i) {
                const double w = mode == ObjectiveMode::sequence_corrected ? g.correction_weights[i].value : 1.0;
                if (mode == ObjectiveMode::naive_substitution) continue;
                expected -= g.advantages[i] * w / static_cast<double>(g.members.size() * inst.groups.size());
            }
        }
        if (mode != ObjectiveMode::naive_substitution) {
            CHECK_THAT(ev.loss.item(), WithinAbs(expected, 1e-12));
            CHECK(ev.stats.clipped(ClipFilter::all) == 0);
        }
    }
    // Fully on-policy group alone: -mean(A) = 0.
    Tape tape(false);
    auto ev = surrogate_loss(tape, std::span(inst.groups).first(1), theta, inst.old_field, {});
    CHECK_THAT(ev.loss.item(), WithinAbs(0.0, 1e-12));
}

TEST_CASE("degenerate groups contribute nothing", "[objective]") {
    auto inst = gradient_instance(7);
    for (auto& g : inst.groups) {
        std::fill(g.advantages.begin(), g.advantages.end(), 0.0);
        g.degenerate = true;
    }
    CHECK(loss_value(inst, ObjectiveMode::sequence_corrected) == 0.0);
    for (const auto& grad : analytic_gradient(inst, ObjectiveMode::sequence_corrected)) {
        for (double v : grad) CHECK(v == 0.0);
    }
}

TEST_CASE("clip arithmetic on one member and one step", "[objective]") {
    const double m = 1.0 - std::sqrt(1.0 - 2.0 * std::log(1.5));
    const auto old = unit_step_field(0.0);
    auto theta = unit_step_field(m);
    theta.set_requires_grad(true);
    theta.zero_grad();
    const std::vector<GroupBatch> groups = {single_member_group(one_step_member(1.0, 0.0, 1), 1.0)};
    Tape tape;
    auto ev = surrogate_loss(tape, groups, theta, old, {});
    CHECK_THAT(ev.loss.item(), WithinAbs(-1.2, 1e-12));
    REQUIRE(ev.stats.records.size() == 1);
    CHECK(ev.stats.records[0].clipped);
    // The clipped branch is constant in theta.
    tape.backward(ev.loss);
    for (const auto& p : theta.parameters()) {
        for (double g : *p.grad) CHECK(g == 0.0);
    }
}

TEST_CASE("clipped steps have zero finite-difference slope", "[objective]") {
    const double m = 1.0 - std::sqrt(1.0 - 2.0 * std::log(1.5));
    const auto old = unit_step_field(0.0);
    auto theta = unit_step_field(m);
    const std::vector<GroupBatch> groups = {single_member_group(one_step_member(1.0, 0.0, 1), 1.0)};
    auto loss_at = [&](double bias) {
        theta.parameters().back().data[0] = bias;
        Tape tape(false);
        return surrogate_loss(tape, groups, theta, old, {}).loss.item();
    };
    CHECK((loss_at(m + 1e-5) - loss_at(m - 1e-5)) / 2e-5 == 0.0);
    // Unclipped point: ratio 1, slope -A * d ratio / d bias = -(x - m) at m = 0.
    CHECK_THAT((loss_at(1e-5) - loss_at(-1e-5)) / 2e-5, WithinAbs(-1.0, 1e-6));
}

TEST_CASE("corrected loss equals the plain on-policy loss without replay", "[objective]") {
    auto inst = gradient_instance(8);
    const std::vector<GroupBatch> on_policy = {inst.groups[0]};
    Tape a(false), b(false);
    const double corrected = surrogate_loss(a, on_policy, inst.theta, inst.old_field, {}).loss.item();
    const double plain = on_policy_grpo_loss(b, on_policy, inst.theta, inst.old_field, 0.2).item();
    CHECK(corrected == plain);
}

TEST_CASE("a descent step raises the log-prob of a positive-advantage member", "[objective]") {
    auto inst = gradient_instance(9);
    GroupBatch g = inst.groups[0];
    g.advantages = {1.0, 0.0};
    const std::vector<GroupBatch> groups = {g};
    const double before = score_trajectory(g.members[0], inst.theta)[0] + score_trajectory(g.members[0], inst.theta)[1];
    inst.theta.zero_grad();
    Tape tape;
    auto ev = surrogate_loss(tape, groups, inst.theta, inst.old_field, {});
    tape.backward(ev.loss);
    for (auto& p : inst.theta.parameters()) {
        for (std::size_t i = 0; i < p.size(); ++i) p.data[i] -= 1e-6 * (*p.grad)[i];
    }
    const double after = score_trajectory(g.members[0], inst.theta)[0] + score_trajectory(g.members[0], inst.theta)[1];
    CHECK(after > before);
}

TEST_CASE("surrogate gradient matches central differences", "[objective][fd]") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        for (auto mode : {ObjectiveMode::sequence_corrected, ObjectiveMode::naive_substitution, ObjectiveMode::uncorrected}) {
            auto inst = gradient_instance(seed);
            const auto analytic = analytic_gradient(inst, mode);
            const auto rep = diagnostics::finite_difference_check([&] { return loss_value(inst, mode); },
                                                                  inst.theta.parameters(), analytic);
            INFO("seed " << seed << " mode " << to_string(mode));
            CHECK(rep.max_relative_error < 1e-4);
        }
    }
}

TEST_CASE("clip fraction accounting", "[objective]") {
    ClipStats none;
    none.records = {{0, 0, 1, Origin::on_policy, false, false}, {0, 1, 2, Origin::buffer, true, false}};
    CHECK(clip_fraction(none) == 0.0);
    ClipStats all = none;
    for (auto& r : all.records) r.clipped = true;
    CHECK(clip_fraction(all) == 1.0);
    CHECK(clip_fraction(all, ClipFilter::off_policy_steps) == 1.0);
    ClipStats on_only;
    on_only.records = {{0, 0, 1, Origin::on_policy, false, true}};
    CHECK_THROWS_AS(clip_fraction(on_only, ClipFilter::off_policy_steps), StateError);
    CHECK_THROWS_AS(clip_fraction(ClipStats{}), StateError);
}
