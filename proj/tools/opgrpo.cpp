// Command-line front end: train, ablation, logprob-profile, plot-data, inspect-buffer.
//
// Exit codes: 0 success, 1 divergence or runtime failure, 2 configuration or input error.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "opgrpo.hpp"

namespace fs = std::filesystem;
using namespace opgrpo;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

fs::path output_root() {
    const char* env = std::getenv("OPGRPO_OUTPUT_ROOT");
    return env != nullptr && *env != '\0' ? fs::path(env) : fs::path("runs");
}

// Flags shared by `train` and `ablation`; unset flags leave the config untouched.
struct ConfigFlags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> iterations;
    std::optional<std::string> mode;
    std::optional<double> learning_rate;
    std::optional<double> off_policy_fraction;
    std::optional<int> truncation_step;
    std::optional<int> group_size;
    std::optional<int> groups_per_iteration;
    std::optional<int> checkpoint_every;
    std::vector<std::string> set;  // key=json

    void add_to(CLI::App* cmd, bool with_mode) {
        cmd->add_option("-c,--config", config_path, "JSON config file (defaults apply to absent keys)");
        cmd->add_option("--seed", seed, "random seed");
        cmd->add_option("--iterations", iterations, "training iterations");
        if (with_mode) {
            cmd->add_option("--mode", mode, "sequence_corrected | naive_substitution | uncorrected | on_policy_baseline");
        }
        cmd->add_option("--learning-rate", learning_rate, "Adam learning rate");
        cmd->add_option("--off-policy-fraction", off_policy_fraction, "share of groups that replay a buffer trajectory");
        cmd->add_option("--truncation-step", truncation_step, "last replayed step index t_off");
        cmd->add_option("--group-size", group_size, "members per group");
        cmd->add_option("--groups-per-iteration", groups_per_iteration, "groups per iteration");
        cmd->add_option("--checkpoint-every", checkpoint_every, "checkpoint period in iterations (0 = final only)");
        cmd->add_option("--set", set, "extra override as key=json, e.g. --set 'hidden=[64,64]'");
    }

    nlohmann::json overrides() const {
        nlohmann::json j = nlohmann::json::object();
        if (seed) j["seed"] = *seed;
        if (iterations) j["iterations"] = *iterations;
        if (mode) j["mode"] = *mode;
        if (learning_rate) j["learning_rate"] = *learning_rate;
        if (off_policy_fraction) j["off_policy_fraction"] = *off_policy_fraction;
        if (truncation_step) j["truncation_step"] = *truncation_step;
        if (group_size) j["group_size"] = *group_size;
        if (groups_per_iteration) j["groups_per_iteration"] = *groups_per_iteration;
        if (checkpoint_every) j["checkpoint_every"] = *checkpoint_every;
        for (const auto& kv : set) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos || eq == 0) throw ConfigError("--set", "expected key=json, got '" + kv + "'");
            const std::string key = kv.substr(0, eq);
            try {
                j[key] = nlohmann::json::parse(kv.substr(eq + 1));
            } catch (const nlohmann::json::exception&) {
                j[key] = kv.substr(eq + 1);  // bare strings, e.g. --set mode=uncorrected
            }
        }
        return j;
    }

    TrainerConfig resolve(TrainerConfig base = {}) const {
        if (!config_path.empty()) base = load_config(config_path, std::move(base));
        return config_from_json(overrides(), std::move(base));
    }
};

int report_run(const RunResult& r, const fs::path& dir) {
    if (r.diverged) {
        std::cerr << "diverged: " << r.divergence_message << "\n  details in " << (dir / "divergence.json").string() << '\n';
        return kExitRuntime;
    }
    std::cout << "run " << dir.filename().string() << ": " << r.history.size() << " iterations, final mean reward "
              << final_reward(r.history) << "\n  outputs in " << dir.string() << '\n';
    return kExitOk;
}

int cmd_train(const ConfigFlags& flags, const std::string& resume, const std::string& output_dir, bool quiet) {
    std::optional<Trainer> trainer;
    if (!resume.empty()) {
        std::optional<TrainerConfig> overrides;
        if (!flags.config_path.empty() || !flags.overrides().empty()) {
            const TrainerConfig stored = config_from_json(read_json_file(resume).at("config"));
            overrides = flags.resolve(stored);
        }
        trainer.emplace(Trainer::load_checkpoint(resume, overrides));
    } else {
        trainer.emplace(flags.resolve());
    }
    const fs::path root = output_root();
    const fs::path dir = !output_dir.empty() ? fs::path(output_dir) : root / unique_run_id(root, trainer->config());
    const RunResult r = run_trainer(*trainer, to_string(trainer->config().mode), {dir, quiet});
    return report_run(r, dir);
}

std::vector<std::uint64_t> parse_seeds(const std::vector<std::string>& items) {
    std::vector<std::uint64_t> seeds;
    for (const auto& item : items) {
        std::stringstream ss(item);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (tok.empty()) continue;
            try {
                std::size_t used = 0;
                seeds.push_back(std::stoull(tok, &used));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw ConfigError("seeds", "'" + tok + "' is not a non-negative integer");
            }
        }
    }
    if (seeds.empty()) throw ConfigError("seeds", "at least one seed is required");
    return seeds;
}

int cmd_ablation(const ConfigFlags& flags, const std::string& preset_name, const std::vector<std::string>& seed_items,
                 const std::string& output_dir, double threshold_fraction, bool quiet) {
    const AblationPreset preset = ablation_preset_from_string(preset_name);
    const auto seeds = parse_seeds(seed_items);
    if (!(threshold_fraction > 0.0)) throw ConfigError("threshold-fraction", "must be positive");
    const TrainerConfig base = flags.resolve();
    const fs::path dir = !output_dir.empty() ? fs::path(output_dir)
                                             : output_root() / ("ablation-" + to_string(preset) + "-" +
                                                                hex64(config_hash(base)).substr(0, 8));
    fs::create_directories(dir);
    const AblationTable table = run_ablation(preset, base, seeds, dir, quiet, threshold_fraction);
    write_text_file(dir / "comparison.csv", ablation_csv(table));
    write_json_file(dir / "comparison.json", ablation_summary(table));
    std::cout << ablation_csv(table) << ablation_summary(table).dump(2) << "\n  outputs in " << dir.string() << '\n';
    return kExitOk;
}

int cmd_logprob_profile(const std::string& checkpoint, std::size_t num_trajectories, const std::string& behaviour,
                        std::uint64_t seed, const std::string& output) {
    const Trainer trainer = Trainer::load_checkpoint(checkpoint);
    std::vector<Trajectory> replays;
    if (!behaviour.empty()) {
        const Trainer old = Trainer::load_checkpoint(behaviour);
        replays = behaviour_rollouts(old.field(), num_trajectories, seed);
    } else {
        replays = buffer_trajectories(trainer.buffer());
        if (replays.empty()) std::cerr << "warning: checkpoint buffer is empty; writing the on-policy profile only\n";
    }
    const LogprobProfile profile = logprob_profile(trainer.field(), num_trajectories, replays, seed);
    if (output.empty()) {
        std::cout << profile.csv();
    } else {
        write_text_file(output, profile.csv());
        std::cerr << "on-policy cliff ratio " << profile.cliff_ratio(false);
        if (!replays.empty()) std::cerr << ", off-policy cliff ratio " << profile.cliff_ratio(true);
        std::cerr << "\n  written to " << output << '\n';
    }
    return kExitOk;
}

int cmd_plot_data(const std::vector<std::string>& inputs, const std::string& output) {
    std::vector<fs::path> paths(inputs.begin(), inputs.end());
    const std::string csv = plot_data(paths);
    if (output.empty()) std::cout << csv;
    else write_text_file(output, csv);
    return kExitOk;
}

int cmd_inspect_buffer(const std::string& checkpoint, const std::string& output) {
    const Trainer trainer = Trainer::load_checkpoint(checkpoint);
    nlohmann::json j = buffer_to_json(trainer.buffer());
    j["iteration"] = trainer.iteration();
    j["size"] = trainer.buffer().size();
    if (output.empty()) std::cout << j.dump(2) << '\n';
    else write_json_file(output, j);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Off-policy GRPO for a toy flow-matching model"};
    app.require_subcommand(1);
    app.fallthrough();
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "suppress progress output");

    ConfigFlags train_flags;
    std::string resume, train_out;
    auto* train = app.add_subcommand("train", "train one run; writes metrics, summary, checkpoints and a manifest");
    train_flags.add_to(train, true);
    train->add_option("--resume", resume, "continue from a checkpoint file");
    train->add_option("-o,--output-dir", train_out, "run directory (default: $OPGRPO_OUTPUT_ROOT/<run id>)");

    ConfigFlags ablation_flags;
    std::string preset, ablation_out;
    std::vector<std::string> seeds{"0,1,2,3,4"};
    double threshold_fraction = 0.95;
    auto* ablation = app.add_subcommand("ablation", "run a preset matrix over seeds and write a comparison table");
    ablation_flags.add_to(ablation, false);
    ablation->add_option("--preset", preset, "wo_corr | wo_trun | frac_sweep | baseline_vs_opgrpo")->required();
    ablation->add_option("--seeds", seeds, "seeds, comma or space separated")->capture_default_str();
    ablation->add_option("--threshold-fraction", threshold_fraction,
                         "iterations-to-threshold target as a share of the baseline's final reward")
        ->capture_default_str();
    ablation->add_option("-o,--output-dir", ablation_out, "matrix directory");

    std::string profile_ckpt, profile_behaviour, profile_out;
    std::size_t profile_n = 256;
    std::uint64_t profile_seed = 0;
    auto* profile = app.add_subcommand("logprob-profile", "per-step log-prob statistics, on- and off-policy");
    profile->add_option("checkpoint", profile_ckpt, "checkpoint file")->required();
    profile->add_option("-n,--num-trajectories", profile_n, "fresh rollouts to profile")->capture_default_str();
    profile->add_option("--behaviour", profile_behaviour,
                        "older checkpoint whose rollouts form the off-policy population (default: the buffer)");
    profile->add_option("--seed", profile_seed, "sampling seed")->capture_default_str();
    profile->add_option("-o,--output", profile_out, "CSV path (default: stdout)");

    std::vector<std::string> plot_inputs;
    std::string plot_out;
    auto* plot = app.add_subcommand("plot-data", "merge metrics CSVs into long format (run_id, iteration, metric, value)");
    plot->add_option("metrics", plot_inputs, "metrics CSV files");
    plot->add_option("-o,--output", plot_out, "CSV path (default: stdout)");

    std::string inspect_ckpt, inspect_out;
    auto* inspect = app.add_subcommand("inspect-buffer", "dump a checkpoint's replay buffer as JSON");
    inspect->add_option("checkpoint", inspect_ckpt, "checkpoint file")->required();
    inspect->add_option("-o,--output", inspect_out, "JSON path (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*train) return cmd_train(train_flags, resume, train_out, quiet);
        if (*ablation) return cmd_ablation(ablation_flags, preset, seeds, ablation_out, threshold_fraction, quiet);
        if (*profile) return cmd_logprob_profile(profile_ckpt, profile_n, profile_behaviour, profile_seed, profile_out);
        if (*plot) return cmd_plot_data(plot_inputs, plot_out);
        if (*inspect) return cmd_inspect_buffer(inspect_ckpt, inspect_out);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const FormatError& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "diverged: " << e.what() << '\n';
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitRuntime;
}
