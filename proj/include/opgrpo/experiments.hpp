#pragma once

// Run orchestration shared by the command-line tool and the acceptance suite:
// single runs with output directories, ablation matrices, the per-step log-prob
// profile, the frozen-batch clip experiment and long-format plot data.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "opgrpo/checkpoint.hpp"
#include "opgrpo/config.hpp"
#include "opgrpo/error.hpp"
#include "opgrpo/metrics.hpp"
#include "opgrpo/trainer.hpp"

#ifndef OPGRPO_VERSION
#define OPGRPO_VERSION "0.1.0"
#endif

namespace opgrpo {

inline constexpr const char* kCodeVersion = OPGRPO_VERSION;

inline std::string iso_timestamp(std::chrono::system_clock::time_point tp = std::chrono::system_clock::now()) {
    const std::time_t t = std::chrono::system_clock::to_time_t(tp);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// ---------------------------------------------------------------------------
// Single runs

struct RunResult {
    std::string label;
    TrainerConfig config;
    std::vector<IterationMetrics> history;
    bool diverged = false;
    std::string divergence_message;
    nlohmann::json divergence_dump;
    double wall_seconds = 0.0;
};

struct RunOptions {
    std::optional<std::filesystem::path> output_dir;  // metrics, checkpoints and manifest go here when set
    bool quiet = true;
};

struct RunManifest {
    std::string run_id;
    std::string config_hash;
    std::string code_version = kCodeVersion;
    std::string started;
    std::string finished;
    double wall_seconds = 0.0;
    std::map<std::string, std::string> outputs;

    nlohmann::json to_json() const {
        return {{"run_id", run_id},   {"config_hash", config_hash}, {"code_version", code_version},
                {"started", started}, {"finished", finished},       {"wall_seconds", wall_seconds},
                {"outputs", outputs}};
    }
};

// `<mode>-seed<seed>-<hash8>`, suffixed with -2, -3, ... until unused under `root`.
inline std::string unique_run_id(const std::filesystem::path& root, const TrainerConfig& cfg) {
    const std::string base = to_string(cfg.mode) + "-seed" + std::to_string(cfg.seed) + "-" +
                             hex64(config_hash(cfg)).substr(0, 8);
    std::string id = base;
    for (int k = 2; std::filesystem::exists(root / id); ++k) id = base + "-" + std::to_string(k);
    return id;
}

// Drives `trainer` to completion. With an output directory, writes metrics.csv,
// summary.json, periodic and final checkpoints, config.json and manifest.json there.
// Divergence is captured in the result (and divergence.json) rather than thrown.
inline RunResult run_trainer(Trainer& trainer, const std::string& label, const RunOptions& opts = {}) {
    RunResult res;
    res.label = label;
    res.config = trainer.config();
    const auto start = std::chrono::steady_clock::now();
    RunManifest manifest;
    manifest.started = iso_timestamp();
    manifest.config_hash = hex64(config_hash(trainer.config()));
    const int T = trainer.config().num_steps;

    std::optional<MetricsWriter> writer;
    if (opts.output_dir) {
        std::filesystem::create_directories(*opts.output_dir);
        manifest.run_id = opts.output_dir->filename().string();
        write_json_file(*opts.output_dir / "config.json", config_to_json(trainer.config()));
        writer.emplace((*opts.output_dir / "metrics.csv").string(), T, trainer.iteration() > 0);
        manifest.outputs["config"] = (*opts.output_dir / "config.json").string();
        manifest.outputs["metrics"] = (*opts.output_dir / "metrics.csv").string();
    }
    const int every = trainer.config().checkpoint_every;
    try {
        trainer.run([&](const IterationMetrics& m) {
            if (writer) writer->write(m);
            if (opts.output_dir && every > 0 && m.iteration % every == 0) {
                trainer.save_checkpoint(*opts.output_dir / "checkpoints" / ("iter_" + std::to_string(m.iteration) + ".json"));
            }
            if (!opts.quiet && (m.iteration % 50 == 0 || m.iteration == trainer.config().iterations)) {
                std::cerr << label << " iter " << m.iteration << " mean_reward " << m.mean_reward << '\n';
            }
        });
    } catch (const DivergenceError& e) {
        res.diverged = true;
        res.divergence_message = e.what();
        res.divergence_dump = e.dump();
    }
    res.history = trainer.history();
    res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    if (opts.output_dir) {
        nlohmann::json summary = summarize(res.history);
        summary["diverged"] = res.diverged;
        summary["config_hash"] = manifest.config_hash;
        if (res.diverged) {
            summary["divergence_message"] = res.divergence_message;
            write_json_file(*opts.output_dir / "divergence.json",
                            {{"message", res.divergence_message}, {"dump", res.divergence_dump}});
            manifest.outputs["divergence"] = (*opts.output_dir / "divergence.json").string();
        } else {
            trainer.save_checkpoint(*opts.output_dir / "final.json");
            manifest.outputs["checkpoint"] = (*opts.output_dir / "final.json").string();
        }
        write_json_file(*opts.output_dir / "summary.json", summary);
        manifest.outputs["summary"] = (*opts.output_dir / "summary.json").string();
        if (every > 0) manifest.outputs["checkpoints"] = (*opts.output_dir / "checkpoints").string();
        manifest.finished = iso_timestamp();
        manifest.wall_seconds = res.wall_seconds;
        write_json_file(*opts.output_dir / "manifest.json", manifest.to_json());
    }
    return res;
}

inline RunResult run_config(const TrainerConfig& cfg, const std::string& label, const RunOptions& opts = {}) {
    Trainer trainer(cfg);
    return run_trainer(trainer, label, opts);
}

// ---------------------------------------------------------------------------
// Run statistics

// Share of off-policy members whose correction weight hit a clamp bound.
inline double clamp_rate(const std::vector<IterationMetrics>& history) {
    long clamped = 0, members = 0;
    for (const auto& m : history) {
        clamped += m.weights_clamped;
        members += m.off_policy_members;
    }
    return members > 0 ? static_cast<double>(clamped) / static_cast<double>(members)
                       : std::numeric_limits<double>::quiet_NaN();
}

// Mean of a metric over the iterations where it is defined.
template <class Getter>
double mean_defined(const std::vector<IterationMetrics>& history, Getter get) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& m : history) {
        const double v = get(m);
        if (std::isfinite(v)) {
            s += v;
            ++n;
        }
    }
    return n > 0 ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

// ---------------------------------------------------------------------------
// Ablations

enum class AblationPreset { wo_corr, wo_trun, frac_sweep, baseline_vs_opgrpo };

inline std::string to_string(AblationPreset p) {
    switch (p) {
        case AblationPreset::wo_corr: return "wo_corr";
        case AblationPreset::wo_trun: return "wo_trun";
        case AblationPreset::frac_sweep: return "frac_sweep";
        case AblationPreset::baseline_vs_opgrpo: return "baseline_vs_opgrpo";
    }
    return "?";
}

inline AblationPreset ablation_preset_from_string(const std::string& s) {
    if (s == "wo_corr") return AblationPreset::wo_corr;
    if (s == "wo_trun") return AblationPreset::wo_trun;
    if (s == "frac_sweep") return AblationPreset::frac_sweep;
    if (s == "baseline_vs_opgrpo") return AblationPreset::baseline_vs_opgrpo;
    throw ConfigError("preset", "unknown ablation preset '" + s + "'");
}

struct AblationVariant {
    std::string name;
    TrainerConfig config;  // seed is filled in per cell
};

inline std::vector<AblationVariant> ablation_variants(AblationPreset preset, const TrainerConfig& base) {
    auto with = [&](std::string name, auto edit) {
        TrainerConfig c = base;
        edit(c);
        return AblationVariant{std::move(name), std::move(c)};
    };
    switch (preset) {
        case AblationPreset::wo_corr:
            return {with("sequence_corrected", [](TrainerConfig& c) { c.mode = TrainMode::sequence_corrected; }),
                    with("uncorrected", [](TrainerConfig& c) { c.mode = TrainMode::uncorrected; })};
        case AblationPreset::wo_trun:
            return {with("truncated", [](TrainerConfig& c) { c.mode = TrainMode::sequence_corrected; }),
                    with("untruncated", [](TrainerConfig& c) {
                        c.mode = TrainMode::sequence_corrected;
                        c.truncation_step = 0;
                    })};
        case AblationPreset::frac_sweep: {
            std::vector<AblationVariant> out;
            for (double f : {0.05, 0.15, 0.25}) {
                char name[32];
                std::snprintf(name, sizeof name, "fraction_%.2f", f);
                out.push_back(with(name, [f](TrainerConfig& c) {
                    c.mode = TrainMode::sequence_corrected;
                    c.off_policy_fraction = f;
                }));
            }
            return out;
        }
        case AblationPreset::baseline_vs_opgrpo:
            return {with("on_policy_baseline", [](TrainerConfig& c) { c.mode = TrainMode::on_policy_baseline; }),
                    with("sequence_corrected", [](TrainerConfig& c) { c.mode = TrainMode::sequence_corrected; })};
    }
    return {};
}

struct AblationCell {
    std::string variant;
    std::uint64_t seed = 0;
    RunResult run;
    double threshold = std::numeric_limits<double>::quiet_NaN();
    int iterations_to_threshold = -1;
    int baseline_iterations = -1;
    double final_reward = std::numeric_limits<double>::quiet_NaN();
    double clip_fraction = std::numeric_limits<double>::quiet_NaN();
    double clip_fraction_off = std::numeric_limits<double>::quiet_NaN();
    double clamp_rate = std::numeric_limits<double>::quiet_NaN();
};

struct AblationTable {
    std::string preset;
    std::vector<AblationCell> cells;
    std::vector<RunResult> baselines;  // one per seed

    // Mean iterations-to-threshold of `variant` divided by the baseline mean over the
    // same seeds. A run that never reaches the threshold counts as its full length.
    double speedup_ratio(const std::string& variant) const {
        double v = 0.0, b = 0.0;
        for (const auto& c : cells) {
            if (c.variant != variant) continue;
            v += c.iterations_to_threshold < 0 ? c.run.config.iterations : c.iterations_to_threshold;
            b += c.baseline_iterations < 0 ? c.run.config.iterations : c.baseline_iterations;
        }
        return b > 0 ? v / b : std::numeric_limits<double>::quiet_NaN();
    }

    double mean_final_reward(const std::string& variant) const {
        double s = 0.0;
        int n = 0;
        for (const auto& c : cells) {
            if (c.variant == variant && !c.run.diverged) {
                s += c.final_reward;
                ++n;
            }
        }
        return n > 0 ? s / n : std::numeric_limits<double>::quiet_NaN();
    }

    // Clamped members over off-policy members, pooled across seeds.
    double pooled_clamp_rate(const std::string& variant) const {
        long clamped = 0, members = 0;
        for (const auto& c : cells) {
            if (c.variant != variant) continue;
            for (const auto& m : c.run.history) {
                clamped += m.weights_clamped;
                members += m.off_policy_members;
            }
        }
        return members > 0 ? static_cast<double>(clamped) / static_cast<double>(members)
                           : std::numeric_limits<double>::quiet_NaN();
    }

    std::vector<std::string> variants() const {
        std::vector<std::string> out;
        for (const auto& c : cells) {
            if (std::find(out.begin(), out.end(), c.variant) == out.end()) out.push_back(c.variant);
        }
        return out;
    }
};

inline AblationCell evaluate_cell(const std::string& variant, std::uint64_t seed, RunResult run,
                                  const RunResult& baseline, double threshold_fraction = 0.95) {
    AblationCell cell;
    cell.variant = variant;
    cell.seed = seed;
    const double base_final = final_reward(baseline.history);
    cell.threshold = threshold_fraction * base_final;
    cell.baseline_iterations = baseline.diverged ? -1 : iterations_to_threshold(baseline.history, cell.threshold);
    cell.iterations_to_threshold = run.diverged ? -1 : iterations_to_threshold(run.history, cell.threshold);
    cell.final_reward = final_reward(run.history);
    cell.clip_fraction = mean_defined(run.history, [](const auto& m) { return m.clip_fraction; });
    cell.clip_fraction_off = mean_defined(run.history, [](const auto& m) { return m.clip_fraction_off; });
    cell.clamp_rate = clamp_rate(run.history);
    cell.run = std::move(run);
    return cell;
}

// Runs every (variant, seed) cell plus an on-policy baseline per seed, which sets the
// iterations-to-threshold target (`threshold_fraction` of its final trailing-10 mean
// reward). Diverged cells are recorded, never fatal.
inline AblationTable run_ablation(AblationPreset preset, const TrainerConfig& base, const std::vector<std::uint64_t>& seeds,
                                  const std::optional<std::filesystem::path>& output_root = std::nullopt,
                                  bool quiet = true, double threshold_fraction = 0.95) {
    AblationTable table;
    table.preset = to_string(preset);
    const auto variants = ablation_variants(preset, base);
    auto dir_for = [&](const std::string& name, std::uint64_t seed) -> std::optional<std::filesystem::path> {
        if (!output_root) return std::nullopt;
        return *output_root / (name + "-seed" + std::to_string(seed));
    };
    for (std::uint64_t seed : seeds) {
        TrainerConfig bcfg = base;
        bcfg.seed = seed;
        bcfg.mode = TrainMode::on_policy_baseline;
        RunResult baseline = run_config(bcfg, "on_policy_baseline", {dir_for("on_policy_baseline", seed), quiet});
        for (const auto& v : variants) {
            TrainerConfig cfg = v.config;
            cfg.seed = seed;
            RunResult run = cfg.mode == TrainMode::on_policy_baseline && config_hash(cfg) == config_hash(bcfg)
                                ? baseline
                                : run_config(cfg, v.name, {dir_for(v.name, seed), quiet});
            table.cells.push_back(evaluate_cell(v.name, seed, std::move(run), baseline, threshold_fraction));
        }
        table.baselines.push_back(std::move(baseline));
    }
    return table;
}

inline std::string ablation_csv(const AblationTable& t) {
    using detail::fmt_double;
    std::ostringstream os;
    os << "variant,seed,diverged,final_reward,threshold,iterations_to_threshold,baseline_iterations,clip_fraction,"
          "clip_fraction_off,clamp_rate\n";
    for (const auto& c : t.cells) {
        os << c.variant << ',' << c.seed << ',' << (c.run.diverged ? "diverged" : "ok") << ','
           << fmt_double(c.final_reward) << ',' << fmt_double(c.threshold) << ',' << c.iterations_to_threshold << ','
           << c.baseline_iterations << ',' << fmt_double(c.clip_fraction) << ',' << fmt_double(c.clip_fraction_off)
           << ',' << fmt_double(c.clamp_rate) << '\n';
    }
    return os.str();
}

inline nlohmann::json ablation_summary(const AblationTable& t) {
    nlohmann::json j;
    j["preset"] = t.preset;
    for (const auto& v : t.variants()) {
        int diverged = 0;
        for (const auto& c : t.cells) {
            if (c.variant == v && c.run.diverged) ++diverged;
        }
        j["variants"][v] = {{"speedup_ratio", t.speedup_ratio(v)},
                            {"mean_final_reward", t.mean_final_reward(v)},
                            {"clamp_rate", t.pooled_clamp_rate(v)},
                            {"diverged_runs", diverged}};
    }
    double base = 0.0;
    for (const auto& b : t.baselines) base += final_reward(b.history);
    if (!t.baselines.empty()) j["baseline_mean_final_reward"] = base / static_cast<double>(t.baselines.size());
    return j;
}

// ---------------------------------------------------------------------------
// Per-step log-probability profile

struct LogprobProfile {
    int num_steps = 0;
    // Raw per-step values, index t-1.
    std::vector<std::vector<double>> on_policy;
    std::vector<std::vector<double>> off_policy;
    std::size_t off_policy_trajectories = 0;

    static double mean(const std::vector<double>& v) {
        if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    }
    static double stddev(const std::vector<double>& v) {
        if (v.size() < 2) return std::numeric_limits<double>::quiet_NaN();
        const double m = mean(v);
        double s = 0.0;
        for (double x : v) s += (x - m) * (x - m);
        return std::sqrt(s / static_cast<double>(v.size() - 1));
    }
    static double mean_abs(const std::vector<double>& v) {
        if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
        double s = 0.0;
        for (double x : v) s += std::abs(x);
        return s / static_cast<double>(v.size());
    }

    // Mean |log-prob| over the last 10% of steps (nearest the sample) divided by the
    // median per-step mean |log-prob| over the first 80% (the noisiest steps).
    double cliff_ratio(bool off) const {
        const auto& rows = off ? off_policy : on_policy;
        const int late = std::max(1, static_cast<int>(std::ceil(0.1 * num_steps)));
        const int early = std::max(1, static_cast<int>(std::floor(0.8 * num_steps)));
        double late_sum = 0.0;
        std::size_t late_n = 0;
        for (int t = 1; t <= late; ++t) {
            for (double x : rows[static_cast<std::size_t>(t - 1)]) {
                late_sum += std::abs(x);
                ++late_n;
            }
        }
        std::vector<double> early_means;
        for (int t = num_steps; t > num_steps - early; --t) early_means.push_back(mean_abs(rows[static_cast<std::size_t>(t - 1)]));
        std::sort(early_means.begin(), early_means.end());
        const std::size_t k = early_means.size();
        const double median = k % 2 == 1 ? early_means[k / 2] : 0.5 * (early_means[k / 2 - 1] + early_means[k / 2]);
        if (late_n == 0 || !(median > 0.0)) return std::numeric_limits<double>::quiet_NaN();
        return (late_sum / static_cast<double>(late_n)) / median;
    }

    std::string csv() const {
        using detail::fmt_double;
        std::ostringstream os;
        os << "step,on_mean,on_std,on_mean_abs,off_mean,off_std,off_mean_abs\n";
        for (int t = 1; t <= num_steps; ++t) {
            const auto& on = on_policy[static_cast<std::size_t>(t - 1)];
            const auto& off = off_policy[static_cast<std::size_t>(t - 1)];
            os << t << ',' << fmt_double(mean(on)) << ',' << fmt_double(stddev(on)) << ',' << fmt_double(mean_abs(on)) << ','
               << fmt_double(mean(off)) << ',' << fmt_double(stddev(off)) << ',' << fmt_double(mean_abs(off)) << '\n';
        }
        return os.str();
    }
};

// On-policy: `num_trajectories` fresh rollouts from `vf`, self-scored. Off-policy:
// `replays` (trajectories recorded under an older policy) scored step by step under
// `vf`, as a fully replayed buffer trajectory would be.
inline LogprobProfile logprob_profile(const VelocityField& vf, std::size_t num_trajectories,
                                      const std::vector<Trajectory>& replays, std::uint64_t seed) {
    LogprobProfile p;
    p.num_steps = vf.num_steps();
    const auto T = static_cast<std::size_t>(vf.num_steps());
    p.on_policy.assign(T, {});
    p.off_policy.assign(T, {});
    RandomStream pick(seed, StreamKind::evaluation, {0});
    for (std::size_t i = 0; i < num_trajectories; ++i) {
        const Condition c{static_cast<int>(pick.index(static_cast<std::size_t>(vf.num_conditions())))};
        RandomStream rng(seed, StreamKind::evaluation, {1, i});
        const Trajectory tr = rollout_trajectory(vf, c, rng);
        for (std::size_t t = 0; t < T; ++t) p.on_policy[t].push_back(tr.step_logprobs[t]);
    }
    for (const auto& tr : replays) {
        const auto scores = score_trajectory(tr, vf);
        for (std::size_t t = 0; t < T; ++t) p.off_policy[t].push_back(scores[t]);
    }
    p.off_policy_trajectories = replays.size();
    return p;
}

// Off-policy trajectories for the profile: rollouts of `behaviour` (an older policy),
// spread over conditions like the on-policy population.
inline std::vector<Trajectory> behaviour_rollouts(const VelocityField& behaviour, std::size_t count, std::uint64_t seed) {
    std::vector<Trajectory> out;
    RandomStream pick(seed, StreamKind::evaluation, {2});
    for (std::size_t i = 0; i < count; ++i) {
        const Condition c{static_cast<int>(pick.index(static_cast<std::size_t>(behaviour.num_conditions())))};
        RandomStream rng(seed, StreamKind::evaluation, {3, i});
        out.push_back(rollout_trajectory(behaviour, c, rng));
    }
    return out;
}

inline std::vector<Trajectory> buffer_trajectories(const ReplayBuffer& buffer) {
    std::vector<Trajectory> out;
    for (const auto& [id, e] : buffer.entries()) out.push_back(buffer.retrieve(Condition{id}));
    return out;
}

// ---------------------------------------------------------------------------
// Clip experiment on frozen mixed batches

struct ClipExperimentResult {
    ObjectiveMode mode = ObjectiveMode::sequence_corrected;
    ClipStats stats;
    double off_policy_clip_fraction = std::numeric_limits<double>::quiet_NaN();
    double on_policy_clip_fraction = std::numeric_limits<double>::quiet_NaN();
};

// Mixed groups for every buffered condition (cycled until `num_groups`), built against
// the trainer's current parameters with the trainer's settings.
inline std::vector<GroupBatch> frozen_mixed_batch(const Trainer& trainer, int num_groups, std::uint64_t seed) {
    const ReplayBuffer& buffer = trainer.buffer();
    if (buffer.empty()) throw StateError("frozen_mixed_batch: the buffer is empty");
    std::vector<int> ids;
    for (const auto& [id, e] : buffer.entries()) ids.push_back(id);
    const VelocityField snapshot = trainer.field().frozen_copy();
    std::vector<GroupBatch> groups;
    for (int s = 0; s < num_groups; ++s) {
        const RolloutKey key{seed, -1 - trainer.iteration(), static_cast<std::size_t>(s)};
        groups.push_back(build_group(Condition{ids[static_cast<std::size_t>(s) % ids.size()]}, snapshot, buffer,
                                     trainer.config().reward, trainer.group_settings(), key, true));
    }
    return groups;
}

// Runs `epochs` optimizer updates of `mode` on the frozen groups, starting from the
// trainer's parameters and optimizer state, and pools the clip records of every epoch.
inline ClipExperimentResult clip_experiment(const Trainer& trainer, const std::vector<GroupBatch>& groups,
                                            ObjectiveMode mode, int epochs) {
    ClipExperimentResult res;
    res.mode = mode;
    const VelocityField snapshot = trainer.field().frozen_copy();
    VelocityField theta = trainer.field().frozen_copy();
    theta.set_requires_grad(true);
    AdamState adam = trainer.optimizer_state();
    ObjectiveOptions opts;
    opts.mode = mode;
    opts.clip_epsilon = trainer.config().clip_epsilon;
    for (int e = 0; e < epochs; ++e) {
        theta.zero_grad();
        Tape tape;
        SurrogateEvaluation ev = surrogate_loss(tape, groups, theta, snapshot, opts);
        res.stats.append(ev.stats);
        tape.backward(ev.loss);
        adam_step(theta.parameters(), adam, trainer.adam_options());
    }
    if (res.stats.count(ClipFilter::off_policy_steps) > 0) {
        res.off_policy_clip_fraction = clip_fraction(res.stats, ClipFilter::off_policy_steps);
    }
    if (res.stats.count(ClipFilter::on_policy_steps) > 0) {
        res.on_policy_clip_fraction = clip_fraction(res.stats, ClipFilter::on_policy_steps);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Plot data

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw FormatError("'" + path.string() + "' is empty");
    t.header = split_csv_line(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto row = split_csv_line(line);
        if (row.size() != t.header.size()) throw FormatError("'" + path.string() + "': ragged row");
        t.rows.push_back(std::move(row));
    }
    return t;
}

// Run id for a metrics file: its parent directory for files named metrics.csv,
// otherwise the file stem.
inline std::string run_id_for(const std::filesystem::path& path) {
    if (path.filename() == "metrics.csv" && path.has_parent_path() && !path.parent_path().filename().empty()) {
        return path.parent_path().filename().string();
    }
    return path.stem().string();
}

// Long format (run_id, iteration, metric, value) over every non-iteration column.
inline std::string plot_data(const std::vector<std::filesystem::path>& inputs) {
    if (inputs.empty()) throw ConfigError("inputs", "at least one metrics CSV is required");
    std::vector<CsvTable> tables;
    std::vector<std::string> ids;
    for (const auto& p : inputs) {
        tables.push_back(read_csv(p));
        std::string id = run_id_for(p);
        const std::string base = id;
        for (int k = 2; std::find(ids.begin(), ids.end(), id) != ids.end(); ++k) id = base + "-" + std::to_string(k);
        ids.push_back(id);
        if (tables.back().header != tables.front().header) {
            throw FormatError("'" + p.string() + "' does not share the schema of '" + inputs.front().string() + "'");
        }
    }
    const auto& header = tables.front().header;
    const auto it_col = std::find(header.begin(), header.end(), "iteration");
    if (it_col == header.end()) throw FormatError("metrics CSV lacks an iteration column");
    const auto it_idx = static_cast<std::size_t>(it_col - header.begin());
    std::ostringstream os;
    os << "run_id,iteration,metric,value\n";
    for (std::size_t k = 0; k < tables.size(); ++k) {
        for (const auto& row : tables[k].rows) {
            for (std::size_t c = 0; c < header.size(); ++c) {
                if (c == it_idx) continue;
                os << ids[k] << ',' << row[it_idx] << ',' << header[c] << ',' << row[c] << '\n';
            }
        }
    }
    return os.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << text;
}

}  // namespace opgrpo
