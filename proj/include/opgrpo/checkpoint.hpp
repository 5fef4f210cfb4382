#pragma once

// JSON forms of trajectories, parameters, optimizer state and the replay buffer.
// Doubles are written in shortest round-trip form, so a reload is bit-exact.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "opgrpo/adam.hpp"
#include "opgrpo/error.hpp"
#include "opgrpo/flow_model.hpp"
#include "opgrpo/replay_buffer.hpp"
#include "opgrpo/velocity_field.hpp"

namespace opgrpo {

inline constexpr const char* kCheckpointFormat = "opgrpo-checkpoint";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

template <class T>
T read_key(const nlohmann::json& j, const char* key) {
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: bad or missing '") + key + "': " + e.what());
    }
}

}  // namespace detail

inline nlohmann::json trajectory_to_json(const Trajectory& tr) {
    return {{"condition", tr.condition.id},
            {"latents", tr.latents},
            {"step_logprobs", tr.step_logprobs},
            {"total_logprob", tr.total_logprob},
            {"reward", tr.reward},
            {"origin", to_string(tr.origin)},
            {"birth_iteration", tr.birth_iteration},
            {"truncation_step", tr.truncation_step}};
}

inline Trajectory trajectory_from_json(const nlohmann::json& j) {
    using detail::read_key;
    Trajectory tr;
    tr.condition.id = read_key<int>(j, "condition");
    tr.latents = read_key<std::vector<Latent>>(j, "latents");
    tr.step_logprobs = read_key<std::vector<double>>(j, "step_logprobs");
    tr.total_logprob = read_key<double>(j, "total_logprob");
    tr.reward = read_key<double>(j, "reward");
    const auto origin = read_key<std::string>(j, "origin");
    if (origin != "on_policy" && origin != "buffer") throw FormatError("checkpoint: unknown origin '" + origin + "'");
    tr.origin = origin == "buffer" ? Origin::buffer : Origin::on_policy;
    tr.birth_iteration = read_key<int>(j, "birth_iteration");
    tr.truncation_step = read_key<int>(j, "truncation_step");
    try {
        tr.validate();
    } catch (const Error& e) {
        throw FormatError(std::string("checkpoint: invalid trajectory: ") + e.what());
    }
    return tr;
}

inline nlohmann::json parameters_to_json(const VelocityField& vf) {
    nlohmann::json arr = nlohmann::json::array();
    for (std::size_t i = 0; i < vf.parameters().size(); ++i) {
        const Tensor& p = vf.parameters()[i];
        arr.push_back({{"name", vf.parameter_names()[i]}, {"shape", p.shape}, {"data", p.data}});
    }
    return arr;
}

// Overwrites the parameters of an already-shaped field.
inline void parameters_from_json(VelocityField& vf, const nlohmann::json& arr) {
    if (!arr.is_array() || arr.size() != vf.parameters().size()) {
        throw FormatError("checkpoint: parameter count does not match the model");
    }
    for (std::size_t i = 0; i < arr.size(); ++i) {
        Tensor& p = vf.parameters()[i];
        const auto name = detail::read_key<std::string>(arr[i], "name");
        const auto shape = detail::read_key<std::vector<std::size_t>>(arr[i], "shape");
        auto data = detail::read_key<std::vector<double>>(arr[i], "data");
        if (name != vf.parameter_names()[i] || shape != p.shape || data.size() != p.size()) {
            throw FormatError("checkpoint: parameter '" + name + "' does not match the model layout");
        }
        p.data = std::move(data);
    }
    if (!vf.parameters_finite()) throw FormatError("checkpoint: non-finite parameters");
}

inline nlohmann::json adam_to_json(const AdamState& s) {
    return {{"step", s.step}, {"first_moment", s.first_moment}, {"second_moment", s.second_moment}};
}

inline AdamState adam_from_json(const nlohmann::json& j, const VelocityField& vf) {
    AdamState s;
    s.step = detail::read_key<long>(j, "step");
    s.first_moment = detail::read_key<std::vector<std::vector<double>>>(j, "first_moment");
    s.second_moment = detail::read_key<std::vector<std::vector<double>>>(j, "second_moment");
    const auto& params = vf.parameters();
    if (s.first_moment.size() != params.size() || s.second_moment.size() != params.size()) {
        throw FormatError("checkpoint: optimizer state does not match the model");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (s.first_moment[i].size() != params[i].size() || s.second_moment[i].size() != params[i].size()) {
            throw FormatError("checkpoint: optimizer state does not match the model");
        }
    }
    return s;
}

inline nlohmann::json buffer_to_json(const ReplayBuffer& b) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [id, e] : b.entries()) {
        entries.push_back({{"condition", id},
                           {"retention_score", e.retention_score},
                           {"insert_iteration", e.insert_iteration},
                           {"trajectory", trajectory_to_json(e.trajectory)}});
    }
    return {{"capacity", b.capacity()}, {"decay_rate", b.decay_rate()}, {"entries", entries}};
}

inline ReplayBuffer buffer_from_json(const nlohmann::json& j, const VelocityField& vf) {
    ReplayBuffer b(detail::read_key<std::size_t>(j, "capacity"), detail::read_key<double>(j, "decay_rate"));
    const auto& entries = j.at("entries");
    if (!entries.is_array()) throw FormatError("checkpoint: buffer entries must be an array");
    for (const auto& e : entries) {
        BufferEntry entry;
        const int id = detail::read_key<int>(e, "condition");
        entry.retention_score = detail::read_key<double>(e, "retention_score");
        entry.insert_iteration = detail::read_key<int>(e, "insert_iteration");
        entry.trajectory = trajectory_from_json(e.at("trajectory"));
        if (entry.trajectory.condition.id != id) throw FormatError("checkpoint: buffer entry keyed by the wrong condition");
        if (entry.trajectory.num_steps() != vf.num_steps()) {
            throw FormatError("checkpoint: buffered trajectory has the wrong number of steps");
        }
        for (const auto& z : entry.trajectory.latents) {
            if (static_cast<int>(z.size()) != vf.latent_dim()) {
                throw FormatError("checkpoint: buffered latent dimension does not match the model");
            }
        }
        b.restore(id, std::move(entry));
    }
    return b;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw Error("cannot write '" + tmp + "'");
        out << j.dump() << '\n';
        if (!out) throw Error("failed writing '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    try {
        nlohmann::json j;
        in >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path.string() + "' is not a readable container: " + e.what());
    }
}

}  // namespace opgrpo
