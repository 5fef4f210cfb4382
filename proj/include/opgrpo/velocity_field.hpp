#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "opgrpo/error.hpp"
#include "opgrpo/rng.hpp"
#include "opgrpo/schedule.hpp"
#include "opgrpo/tensor.hpp"

namespace opgrpo {

using Latent = std::vector<double>;

struct FieldShape {
    int latent_dim = 2;
    int num_conditions = 8;
    int time_embed_dim = 4;
    int cond_embed_dim = 4;
    std::vector<int> hidden = {32, 32};
    double output_init_scale = 0.1;
};

// MLP velocity field v(z, t, c). The step index t and the condition id select rows
// of two learned embedding tables that are concatenated to z; tanh hidden layers.
// The noise schedule travels with the field so that a checkpoint is self-contained.
class VelocityField {
public:
    VelocityField() = default;

    VelocityField(FieldShape shape, NoiseSchedule schedule, std::uint64_t seed)
        : shape_(std::move(shape)), schedule_(std::move(schedule)) {
        if (shape_.latent_dim < 1) throw ShapeError("VelocityField: latent_dim must be positive");
        if (shape_.num_conditions < 1) throw ShapeError("VelocityField: need at least one condition");
        if (shape_.hidden.empty()) throw ShapeError("VelocityField: need at least one hidden layer");
        RandomStream rng(seed, StreamKind::init, {});
        const auto T = static_cast<std::size_t>(schedule_.num_steps());
        add_param("time_embedding", T, static_cast<std::size_t>(shape_.time_embed_dim), 0.5, rng);
        add_param("cond_embedding", static_cast<std::size_t>(shape_.num_conditions),
                  static_cast<std::size_t>(shape_.cond_embed_dim), 0.5, rng);
        std::size_t fan_in = static_cast<std::size_t>(shape_.latent_dim + shape_.time_embed_dim + shape_.cond_embed_dim);
        for (std::size_t l = 0; l < shape_.hidden.size(); ++l) {
            const auto width = static_cast<std::size_t>(shape_.hidden[l]);
            add_param("w" + std::to_string(l), fan_in, width, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
            add_param("b" + std::to_string(l), 1, width, 0.0, rng);
            fan_in = width;
        }
        const auto D = static_cast<std::size_t>(shape_.latent_dim);
        add_param("w_out", fan_in, D, shape_.output_init_scale / std::sqrt(static_cast<double>(fan_in)), rng);
        add_param("b_out", 1, D, 0.0, rng);
    }

    const FieldShape& shape() const noexcept { return shape_; }
    const NoiseSchedule& schedule() const noexcept { return schedule_; }
    int latent_dim() const noexcept { return shape_.latent_dim; }
    int num_steps() const noexcept { return schedule_.num_steps(); }
    int num_conditions() const noexcept { return shape_.num_conditions; }

    std::vector<Tensor>& parameters() noexcept { return params_; }
    const std::vector<Tensor>& parameters() const noexcept { return params_; }
    const std::vector<std::string>& parameter_names() const noexcept { return names_; }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.size();
        return n;
    }

    void set_requires_grad(bool on) {
        for (auto& p : params_) p.requires_grad = on;
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    // A copy that never accumulates gradients; used for the frozen rollout snapshot.
    VelocityField frozen_copy() const {
        VelocityField copy = *this;
        for (auto& p : copy.params_) {
            p.requires_grad = false;
            p.grad.reset();
        }
        return copy;
    }

    bool parameters_finite() const {
        for (const auto& p : params_) {
            if (!p.is_finite()) return false;
        }
        return true;
    }

    // FNV-1a over the raw parameter bytes.
    std::uint64_t parameter_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& p : params_) {
            for (double v : p.data) {
                std::uint64_t bits;
                std::memcpy(&bits, &v, sizeof bits);
                for (int i = 0; i < 8; ++i) {
                    h ^= (bits >> (8 * i)) & 0xffU;
                    h *= 0x100000001b3ULL;
                }
            }
        }
        return h;
    }

    // Batched forward: z is [N x D]; steps[i] in [1, T]; conds[i] in [0, C).
    // Binds parameters as leaves, so gradients flow when they require grad.
    Var forward(Tape& tape, Var z, std::span<const std::size_t> steps, std::span<const std::size_t> conds) {
        std::vector<Var> bound;
        bound.reserve(params_.size());
        for (auto& p : params_) bound.push_back(tape.leaf(p));
        return run(tape, bound, z, steps, conds);
    }

    // Same computation with parameters bound as constants.
    Var forward(Tape& tape, Var z, std::span<const std::size_t> steps, std::span<const std::size_t> conds) const {
        std::vector<Var> bound;
        bound.reserve(params_.size());
        for (const auto& p : params_) bound.push_back(tape.constant_ref(p));
        return run(tape, bound, z, steps, conds);
    }

    Latent predict(const Latent& z, int t, int cond) const {
        check_latent(z);
        Tape tape(false);
        const std::size_t step[] = {static_cast<std::size_t>(t)};
        const std::size_t cid[] = {static_cast<std::size_t>(cond)};
        Var out = forward(tape, tape.constant(Tensor::row(z)), step, cid);
        return out.value().data;
    }

    void check_latent(const Latent& z) const {
        if (static_cast<int>(z.size()) != shape_.latent_dim) {
            throw ShapeError("latent has dimension " + std::to_string(z.size()) + ", field expects " +
                             std::to_string(shape_.latent_dim));
        }
    }

private:
    Var run(Tape& /*tape*/, const std::vector<Var>& p, Var z, std::span<const std::size_t> steps,
            std::span<const std::size_t> conds) const {
        const std::size_t n = z.rows();
        if (steps.size() != n || conds.size() != n) throw ShapeError("VelocityField: index count != batch rows");
        if (static_cast<int>(z.cols()) != shape_.latent_dim) throw ShapeError("VelocityField: latent width mismatch");
        std::vector<std::size_t> step_rows(n), cond_rows(n);
        for (std::size_t i = 0; i < n; ++i) {
            schedule_.check_step(static_cast<int>(steps[i]));
            if (conds[i] >= static_cast<std::size_t>(shape_.num_conditions)) {
                throw ShapeError("VelocityField: condition id " + std::to_string(conds[i]) + " out of range");
            }
            step_rows[i] = steps[i] - 1;
            cond_rows[i] = conds[i];
        }
        Var h = concat_cols({z, gather_rows(p[0], std::move(step_rows)), gather_rows(p[1], std::move(cond_rows))});
        const std::size_t layers = shape_.hidden.size();
        for (std::size_t l = 0; l < layers; ++l) {
            h = tanh(add(matmul(h, p[2 + 2 * l]), p[3 + 2 * l]));
        }
        return add(matmul(h, p[2 + 2 * layers]), p[3 + 2 * layers]);
    }

    void add_param(std::string name, std::size_t rows, std::size_t cols, double scale, RandomStream& rng) {
        Tensor t = Tensor::zeros(rows, cols);
        if (scale != 0.0) {
            for (double& v : t.data) v = scale * rng.normal();
        }
        t.requires_grad = true;
        params_.push_back(std::move(t));
        names_.push_back(std::move(name));
    }

    FieldShape shape_;
    NoiseSchedule schedule_;
    std::vector<Tensor> params_;
    std::vector<std::string> names_;
};

}  // namespace opgrpo
