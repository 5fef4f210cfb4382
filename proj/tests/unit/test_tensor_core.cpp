#include <catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <random>

#include "opgrpo/tensor.hpp"

using namespace opgrpo;
using Catch::Matchers::WithinAbs;

namespace {

Tensor random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t = Tensor::zeros(r, c);
    for (auto& v : t.data) v = u(rng);
    t.requires_grad = true;
    return t;
}

// Builds a scalar loss from the leaves and checks its gradient against central differences.
double max_fd_error(std::vector<Tensor*> leaves, const std::function<Var(Tape&, std::vector<Var>&)>& build) {
    for (auto* p : leaves) p->zero_grad();
    {
        Tape tape;
        std::vector<Var> vars;
        for (auto* p : leaves) vars.push_back(tape.leaf(*p));
        tape.backward(build(tape, vars));
    }
    auto eval = [&] {
        Tape tape(false);
        std::vector<Var> vars;
        for (auto* p : leaves) vars.push_back(tape.leaf(*p));
        return build(tape, vars).item();
    };
    const double h = 1e-5;
    double worst = 0.0;
    for (auto* p : leaves) {
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double saved = p->data[i];
            p->data[i] = saved + h;
            const double up = eval();
            p->data[i] = saved - h;
            const double down = eval();
            p->data[i] = saved;
            const double numeric = (up - down) / (2 * h);
            const double analytic = (*p->grad)[i];
            worst = std::max(worst, std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6}));
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("matmul products and shape errors", "[tensor]") {
    Tape tape;
    auto id = tape.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
    auto col = tape.constant(Tensor::matrix(2, 1, {3, 4}));
    const auto out = matmul(id, col).value();
    CHECK(out.shape == std::vector<std::size_t>{2, 1});
    CHECK(out.data == std::vector<double>{3, 4});

    auto row = tape.constant(Tensor::matrix(1, 2, {1, 2}));
    CHECK(matmul(row, col).item() == 11.0);

    auto a = tape.constant(Tensor::zeros(2, 3));
    auto b = tape.constant(Tensor::zeros(4, 2));
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("elementwise values and domain errors", "[tensor]") {
    Tape tape;
    CHECK(exp(tape.constant(Tensor::row({0.0}))).item() == 1.0);
    CHECK(log(tape.constant(Tensor::row({1.0}))).item() == 0.0);
    CHECK(clamp(tape.constant(Tensor::row({1.5})), 0.8, 1.2).item() == 1.2);
    CHECK(clamp(tape.constant(Tensor::row({0.1})), 0.8, 1.2).item() == 0.8);
    CHECK_THROWS_AS(log(tape.constant(Tensor::row({0.0}))), DomainError);
    CHECK_THROWS_AS(log(tape.constant(Tensor::row({-2.0}))), DomainError);
    CHECK_THROWS_AS(div(tape.constant(Tensor::row({1.0})), tape.constant(Tensor::row({0.0}))), DomainError);
    CHECK_THROWS_AS(add(tape.constant(Tensor::zeros(2, 3)), tape.constant(Tensor::zeros(3, 2))), ShapeError);
}

TEST_CASE("tensor shape must match data length", "[tensor]") {
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
    Tensor t({2, 3}, std::vector<double>(6, 0.0));
    CHECK(t.size() == 6);
    t.zero_grad();
    CHECK(t.grad->size() == 6);
}

TEST_CASE("backward on simple losses", "[tensor]") {
    Tensor w({1}, {3.0}, true);
    {
        Tape tape;
        tape.backward(sum(square(tape.leaf(w))));
    }
    CHECK(w.grad->at(0) == 6.0);

    Tensor w2({1}, {2.0}, true);
    {
        Tape tape;
        auto x = tape.constant(Tensor({1}, {5.0}));
        tape.backward(sum(mul(tape.leaf(w2), x)));
    }
    CHECK(w2.grad->at(0) == 5.0);
}

TEST_CASE("backward preconditions", "[tensor]") {
    Tensor w = Tensor::filled(1, 2, 1.0);
    w.requires_grad = true;
    Tape tape;
    auto v = tape.leaf(w);
    CHECK_THROWS_AS(tape.backward(square(v)), ShapeError);

    Tape tape2;
    auto loss = sum(square(tape2.leaf(w)));
    tape2.backward(loss);
    CHECK_THROWS_AS(tape2.backward(loss), StateError);
    CHECK_THROWS_AS(tape2.leaf(w), StateError);
}

TEST_CASE("backward visits nodes in reverse forward order", "[tensor]") {
    Tensor w = Tensor::filled(1, 1, 0.5);
    w.requires_grad = true;
    Tape tape;
    auto x = tape.leaf(w);
    auto y = tanh(x);
    auto z = mul(y, x);
    auto loss = sum(z);
    tape.backward(loss);
    const auto& order = tape.backward_order();
    REQUIRE(order.size() == 4);
    for (std::size_t i = 1; i < order.size(); ++i) CHECK(order[i] < order[i - 1]);
    CHECK(order.front() == loss.id());
    CHECK(order.back() == x.id());
}

TEST_CASE("non-finite forward values are hard errors", "[tensor]") {
    Tape tape;
    auto big = tape.constant(Tensor::row({1000.0}));
    CHECK_THROWS_AS(exp(big), NumericError);
}

TEST_CASE("clamp gradient is one inside the interval and zero outside", "[tensor]") {
    Tensor x({1, 3}, {0.5, 1.0, 1.5}, true);
    x.zero_grad();
    Tape tape;
    tape.backward(sum(clamp(tape.leaf(x), 0.8, 1.2)));
    CHECK(*x.grad == std::vector<double>{0.0, 1.0, 0.0});
}

TEST_CASE("every primitive matches central differences over 100 seeds", "[tensor][fd]") {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(seed);
        Tensor a = random_matrix(rng, 3, 4);
        Tensor b = random_matrix(rng, 3, 4);
        Tensor pos = random_matrix(rng, 3, 4, 0.5, 2.0);
        Tensor m = random_matrix(rng, 4, 2);
        Tensor row = random_matrix(rng, 1, 4);
        Tensor s = random_matrix(rng, 1, 1);

        worst = std::max(worst, max_fd_error({&a, &b}, [](Tape&, auto& v) { return sum(mul(add(v[0], v[1]), v[1])); }));
        worst = std::max(worst, max_fd_error({&a, &b}, [](Tape&, auto& v) { return sum(square(sub(v[0], v[1]))); }));
        worst = std::max(worst, max_fd_error({&a, &pos}, [](Tape&, auto& v) { return sum(div(v[0], v[1])); }));
        worst = std::max(worst, max_fd_error({&pos}, [](Tape&, auto& v) { return sum(log(v[0])); }));
        worst = std::max(worst, max_fd_error({&a}, [](Tape&, auto& v) { return sum(exp(v[0])); }));
        worst = std::max(worst, max_fd_error({&a}, [](Tape&, auto& v) { return sum(tanh(v[0])); }));
        worst = std::max(worst, max_fd_error({&a, &m}, [](Tape&, auto& v) { return sum(square(matmul(v[0], v[1]))); }));
        worst = std::max(worst, max_fd_error({&a, &row}, [](Tape&, auto& v) { return sum(mul(v[0], add(v[0], v[1]))); }));
        worst = std::max(worst, max_fd_error({&a, &s}, [](Tape&, auto& v) { return sum(square(mul(v[0], v[1]))); }));
        worst = std::max(worst, max_fd_error({&a, &b}, [](Tape&, auto& v) { return sum(minimum(v[0], v[1])); }));
        worst = std::max(worst, max_fd_error({&a}, [](Tape&, auto& v) { return mean(mul_scalar(add_scalar(v[0], 0.3), 2.5)); }));
        worst = std::max(worst, max_fd_error({&a}, [](Tape&, auto& v) { return sum(square(row_sum(v[0]))); }));
        worst = std::max(worst, max_fd_error({&a}, [](Tape&, auto& v) { return sum(mul(clamp(v[0], -0.5, 0.5), v[0])); }));
        worst = std::max(worst, max_fd_error({&a, &b}, [](Tape&, auto& v) {
            return sum(square(concat_cols({v[0], tanh(v[1])})));
        }));
        worst = std::max(worst, max_fd_error({&a}, [](Tape&, auto& v) { return sum(square(gather_rows(v[0], {2, 0, 2}))); }));
    }
    INFO("worst relative error " << worst);
    CHECK(worst < 1e-4);
}

TEST_CASE("two-layer MLP gradient matches central differences", "[tensor][fd]") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(1000 + seed);
        Tensor x = random_matrix(rng, 5, 3);
        x.requires_grad = false;
        Tensor w0 = random_matrix(rng, 3, 8), b0 = random_matrix(rng, 1, 8);
        Tensor w1 = random_matrix(rng, 8, 2), b1 = random_matrix(rng, 1, 2);
        const double err = max_fd_error({&w0, &b0, &w1, &b1}, [&x](Tape& t, auto& v) {
            auto h = tanh(add(matmul(t.constant_ref(x), v[0]), v[1]));
            return mean(square(add(matmul(h, v[2]), v[3])));
        });
        CHECK(err < 1e-4);
    }
}

TEST_CASE("forward passes are bit-deterministic", "[tensor]") {
    auto run = [] {
        std::mt19937_64 rng(7);
        Tensor a = random_matrix(rng, 4, 4), m = random_matrix(rng, 4, 3);
        Tape tape(false);
        return tanh(matmul(tape.leaf(a), tape.leaf(m))).value().data;
    };
    CHECK(run() == run());
}
