#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "opgrpo/diagnostics.hpp"
#include "opgrpo/flow_model.hpp"
#include "opgrpo/velocity_field.hpp"

using namespace opgrpo;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// Velocity `k` everywhere in `dim` dimensions, over the given levels.
VelocityField constant_field(std::vector<double> k, std::vector<double> sigmas) {
    FieldShape shape;
    shape.latent_dim = static_cast<int>(k.size());
    shape.num_conditions = 2;
    shape.hidden = {3};
    VelocityField vf(shape, NoiseSchedule::from_sigmas(std::move(sigmas)), 0);
    for (auto& p : vf.parameters()) std::fill(p.data.begin(), p.data.end(), 0.0);
    vf.parameters().back().data = k;
    return vf;
}

VelocityField random_field(std::uint64_t seed, int steps = 10, int dim = 2) {
    FieldShape shape;
    shape.latent_dim = dim;
    shape.num_conditions = 4;
    shape.output_init_scale = 1.0;
    return VelocityField(shape, NoiseSchedule::linear(steps), seed);
}

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

}  // namespace

TEST_CASE("linear schedule levels and variances", "[flow]") {
    const auto s = NoiseSchedule::linear(10, 1.0, 0.01);
    CHECK(s.num_steps() == 10);
    CHECK(s.sigma(10) == 1.0);
    CHECK_THAT(s.sigma(1), WithinAbs(0.01, 1e-15));
    CHECK(s.sigma(0) == 0.0);
    for (int t = 1; t <= 10; ++t) {
        CHECK(s.step_variance(t) > 0.0);
        CHECK_THAT(s.step_variance(t), WithinRel(s.sigma(t) * s.sigma(t) * (s.sigma(t) - s.sigma(t - 1)), 1e-12));
        if (t > 1) CHECK(s.step_std(t) > s.step_std(t - 1));
    }
    CHECK_THROWS_AS(NoiseSchedule::from_sigmas({0.0, 0.5, 0.5}), DomainError);
    CHECK_THROWS_AS(NoiseSchedule::from_sigmas({-0.1, 0.5}), DomainError);
    CHECK_THROWS_AS(NoiseSchedule::linear(0), DomainError);
}

TEST_CASE("velocity field output matches the latent shape", "[flow]") {
    const auto vf = random_field(3);
    CHECK(vf.predict({0.1, -0.2}, 5, 1).size() == 2);
    CHECK(vf.param_count() > 0);
    CHECK_THROWS_AS(vf.predict({0.1}, 5, 1), ShapeError);
    CHECK_THROWS_AS(vf.predict({0.1, 0.2}, 5, 9), ShapeError);
    CHECK_THROWS_AS(vf.predict({0.1, 0.2}, 11, 0), StateError);
}

TEST_CASE("euler step", "[flow]") {
    const auto zero = constant_field({0.0, 0.0}, {0.0, 0.9, 1.0});
    CHECK(euler_step({0.3, -0.7}, 2, zero, Condition{0}) == Latent{0.3, -0.7});

    const auto k = constant_field({2.0, -4.0}, {0.0, 0.9, 1.0});
    const Latent out = euler_step({0.3, -0.7}, 2, k, Condition{1});
    CHECK_THAT(out[0], WithinAbs(0.3 + 0.1 * 2.0, 1e-12));
    CHECK_THAT(out[1], WithinAbs(-0.7 - 0.1 * 4.0, 1e-12));

    const auto vf = random_field(11);
    CHECK(euler_step({0.5, 0.5}, 7, vf, Condition{2}) == euler_step({0.5, 0.5}, 7, vf, Condition{2}));
}

TEST_CASE("sde step log-density at known points", "[flow]") {
    const auto vf2 = random_field(5);
    const Latent zero_noise = {0.0, 0.0};
    for (int t = 1; t <= 10; ++t) {
        const auto s = sde_step_with_noise({0.4, -0.1}, t, vf2, Condition{0}, zero_noise);
        CHECK_THAT(s.logprob, WithinAbs(-2.0 * (std::log(vf2.schedule().step_std(t)) + kHalfLog2Pi), 1e-12));
    }

    // Unit variance at mean zero.
    const auto unit = constant_field({0.0}, {0.0, 1.0});
    const double zn[] = {0.0};
    const auto a = sde_step_with_noise({0.0}, 1, unit, Condition{0}, zn);
    CHECK(a.next == Latent{0.0});
    CHECK_THAT(a.logprob, WithinAbs(-0.9189385, 1e-7));
    CHECK_THAT(a.logprob, WithinAbs(diagnostics::reference_gaussian_logpdf(0.0, 0.0, 1.0), 1e-12));

    // Standard deviation 0.1: sigma^2 (sigma - sigma_prev) = 1 * 0.01.
    const auto narrow = constant_field({0.0}, {0.99, 1.0});
    CHECK_THAT(narrow.schedule().step_std(1), WithinAbs(0.1, 1e-12));
    const auto b = sde_step_with_noise({0.0}, 1, narrow, Condition{0}, zn);
    CHECK_THAT(b.logprob, WithinAbs(-0.9189385 + std::log(10.0), 1e-7));
    CHECK_THAT(b.logprob, WithinAbs(1.3836, 1e-4));
}

TEST_CASE("transition log-prob of a displaced point in two dimensions", "[flow]") {
    // Mean (0,0), std 0.5 (levels 0.75 -> 1), next point (0.5, 0):
    // -0.25/(2*0.25) - 2 log 0.5 - log 2pi.
    const auto vf = constant_field({0.0, 0.0}, {0.75, 1.0});
    CHECK_THAT(vf.schedule().step_std(1), WithinAbs(0.5, 1e-12));
    const double lp = transition_logprob({0.5, 0.0}, {0.0, 0.0}, 1, vf, Condition{0});
    const double x[] = {0.5, 0.0}, mu[] = {0.0, 0.0};
    CHECK_THAT(lp, WithinAbs(diagnostics::reference_gaussian_logpdf(x, mu, 0.5), 1e-12));
    CHECK_THAT(lp, WithinAbs(-0.5 + 2.0 * std::log(2.0) - std::log(2.0 * std::numbers::pi), 1e-12));
}

TEST_CASE("transition log-prob is maximal at the mean", "[flow]") {
    const auto vf = random_field(8);
    RandomStream rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const int t = 1 + static_cast<int>(rng.index(10));
        const Latent z = {rng.normal(), rng.normal()};
        const Latent mu = euler_step(z, t, vf, Condition{1});
        const Latent other = {mu[0] + 0.01 * rng.normal(), mu[1] + 0.01 * rng.normal()};
        CHECK(transition_logprob(other, z, t, vf, Condition{1}) <= transition_logprob(mu, z, t, vf, Condition{1}));
    }
}

TEST_CASE("sde step is reproduced by transition log-prob", "[flow]") {
    const auto vf = random_field(9);
    RandomStream rng(99);
    Latent z = {rng.normal(), rng.normal()};
    for (int t = 10; t >= 1; --t) {
        const auto s = sde_step(z, t, vf, Condition{3}, rng);
        CHECK_THAT(transition_logprob(s.next, z, t, vf, Condition{3}), WithinAbs(s.logprob, 1e-12));
        z = s.next;
    }
}

TEST_CASE("rollout bookkeeping and prefix degenerate cases", "[flow]") {
    const auto vf = random_field(13);
    RandomStream rng(1);
    const Trajectory tr = rollout_trajectory(vf, Condition{2}, rng);
    CHECK(tr.latents.size() == 11);
    CHECK(tr.step_logprobs.size() == 10);
    CHECK_THAT(tr.total_logprob, WithinAbs(tr.sum_logprobs(), 1e-12));
    CHECK(tr.truncation_step == 10);
    CHECK(tr.off_policy_steps() == 0);
    CHECK_NOTHROW(tr.validate());

    RandomStream other(2);
    const Trajectory same = rollout_trajectory(vf, Condition{2}, other, 0, &tr);
    CHECK(same.latents == tr.latents);
    CHECK(same.step_logprobs == tr.step_logprobs);
    CHECK(same.off_policy_steps() == 10);

    RandomStream a(3), b(3);
    const Trajectory ignored = rollout_trajectory(vf, Condition{2}, a, 10, &tr);
    const Trajectory fresh = rollout_trajectory(vf, Condition{2}, b);
    CHECK(ignored.latents == fresh.latents);
    CHECK(ignored.off_policy_steps() == 0);

    RandomStream c(4);
    const Trajectory mixed = rollout_trajectory(vf, Condition{2}, c, 4, &tr);
    for (int k = 10; k >= 4; --k) CHECK(mixed.latent(k) == tr.latent(k));
    CHECK(mixed.latent(3) != tr.latent(3));
    for (int t = 10; t > 4; --t) CHECK(mixed.step_logprobs[static_cast<std::size_t>(t - 1)] == tr.step_logprobs[static_cast<std::size_t>(t - 1)]);
    CHECK(mixed.off_policy_steps() == 6);
    CHECK_THAT(mixed.total_logprob, WithinAbs(mixed.sum_logprobs(), 1e-12));

    RandomStream d(5);
    CHECK_THROWS_AS(rollout_trajectory(vf, Condition{2}, d, 11, &tr), StateError);
    Trajectory short_prefix = tr;
    short_prefix.latents.pop_back();
    short_prefix.step_logprobs.pop_back();
    CHECK_THROWS_AS(rollout_trajectory(vf, Condition{2}, d, 4, &short_prefix), ShapeError);
}

TEST_CASE("self-scoring reproduces stored log-probs", "[flow]") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto vf = random_field(seed);
        RandomStream rng(seed, StreamKind::member, {seed});
        const Trajectory tr = rollout_trajectory(vf, Condition{static_cast<int>(seed % 4)}, rng);
        const auto scores = score_trajectory(tr, vf);
        for (std::size_t t = 0; t < scores.size(); ++t) CHECK_THAT(scores[t], WithinAbs(tr.step_logprobs[t], 1e-9));
        CHECK(score_trajectory(tr, vf.frozen_copy()) == scores);
    }
}

TEST_CASE("tiny parameter perturbations keep per-step ratios near one", "[flow]") {
    const auto vf = random_field(21);
    RandomStream rng(21);
    const Trajectory tr = rollout_trajectory(vf, Condition{0}, rng);
    const auto base = score_trajectory(tr, vf);
    // Bisect for the largest perturbation scale whose ratios stay inside [0.8, 1.2].
    auto max_dev = [&](double scale) {
        VelocityField p = vf.frozen_copy();
        RandomStream noise(77);
        for (auto& t : p.parameters()) {
            for (auto& v : t.data) v += scale * noise.normal();
        }
        const auto s = score_trajectory(tr, p);
        double dev = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) dev = std::max(dev, std::abs(std::exp(s[i] - base[i]) - 1.0));
        return dev;
    };
    double lo = 0.0, hi = 1.0;
    for (int i = 0; i < 40; ++i) {
        const double mid = 0.5 * (lo + hi);
        (max_dev(mid) <= 0.2 ? lo : hi) = mid;
    }
    REQUIRE(lo > 0.0);
    CHECK(max_dev(0.5 * lo) <= 0.2);
    CHECK(max_dev(1e-9) < 1e-3);
}

TEST_CASE("late steps carry larger log-prob magnitudes", "[flow]") {
    const auto vf = random_field(30);
    std::vector<double> mean_abs(10, 0.0);
    for (std::uint64_t i = 0; i < 200; ++i) {
        RandomStream rng(30, StreamKind::member, {i});
        const auto tr = rollout_trajectory(vf, Condition{1}, rng);
        for (std::size_t t = 0; t < 10; ++t) mean_abs[t] += std::abs(tr.step_logprobs[t]) / 200.0;
    }
    std::vector<double> early(mean_abs.begin() + 2, mean_abs.end());
    std::sort(early.begin(), early.end());
    const double median = 0.5 * (early[3] + early[4]);
    CHECK(mean_abs[0] >= 5.0 * median);
}

TEST_CASE("sde sampling is bit-deterministic", "[flow]") {
    const auto vf = random_field(40);
    RandomStream a(5), b(5);
    const auto x = rollout_trajectory(vf, Condition{1}, a);
    const auto y = rollout_trajectory(vf, Condition{1}, b);
    CHECK(x.latents == y.latents);
    CHECK(x.step_logprobs == y.step_logprobs);
}

TEST_CASE("trajectory validation", "[flow]") {
    const auto vf = random_field(41);
    RandomStream rng(1);
    Trajectory tr = rollout_trajectory(vf, Condition{0}, rng);
    Trajectory bad = tr;
    bad.total_logprob += 1.0;
    CHECK_THROWS_AS(bad.validate(), StateError);
    bad = tr;
    bad.step_logprobs[3] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(bad.validate(), NumericError);
    bad = tr;
    bad.latents.pop_back();
    CHECK_THROWS_AS(bad.validate(), ShapeError);
}
