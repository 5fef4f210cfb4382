#pragma once

// Per-iteration training metrics and their CSV / JSON forms.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "opgrpo/error.hpp"

namespace opgrpo {

struct IterationMetrics {
    int iteration = 0;
    double mean_reward = 0.0;      // fresh on-policy members only
    double mean_reward_all = 0.0;  // every member, replayed ones included
    double max_reward = 0.0;
    int degenerate_groups = 0;
    int buffer_groups = 0;
    std::size_t buffer_size = 0;
    double buffer_mean_retention = 0.0;
    int offers_accepted = 0;
    double loss = 0.0;
    double clip_fraction = 0.0;
    double clip_fraction_on = std::numeric_limits<double>::quiet_NaN();
    double clip_fraction_off = std::numeric_limits<double>::quiet_NaN();
    double log_weight_mean = std::numeric_limits<double>::quiet_NaN();
    double log_weight_min = std::numeric_limits<double>::quiet_NaN();
    double log_weight_max = std::numeric_limits<double>::quiet_NaN();
    int off_policy_members = 0;  // members with at least one replayed step
    int weights_clamped = 0;
    std::uint64_t logprob_clamps = 0;
    std::vector<double> logprob_abs;  // mean |behaviour log-prob| per step, index t-1
    double wall_seconds = 0.0;        // kept out of the CSV so logs stay byte-reproducible
};

namespace detail {

inline std::string fmt_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline std::vector<std::string> metrics_columns(int num_steps) {
    std::vector<std::string> cols = {"iteration",       "mean_reward",       "mean_reward_all",   "max_reward",
                                     "degenerate_groups", "buffer_groups",   "buffer_size",       "buffer_mean_retention",
                                     "offers_accepted", "loss",              "clip_fraction",     "clip_fraction_on",
                                     "clip_fraction_off", "log_weight_mean", "log_weight_min",    "log_weight_max",
                                     "off_policy_members", "weights_clamped", "logprob_clamps"};
    for (int t = 1; t <= num_steps; ++t) cols.push_back("lp_abs_" + std::to_string(t));
    return cols;
}

inline std::string metrics_header(int num_steps) {
    std::string out;
    for (const auto& c : metrics_columns(num_steps)) {
        if (!out.empty()) out += ',';
        out += c;
    }
    return out;
}

inline std::string metrics_row(const IterationMetrics& m, int num_steps) {
    using detail::fmt_double;
    std::ostringstream os;
    os << m.iteration << ',' << fmt_double(m.mean_reward) << ',' << fmt_double(m.mean_reward_all) << ','
       << fmt_double(m.max_reward) << ',' << m.degenerate_groups << ',' << m.buffer_groups << ',' << m.buffer_size << ','
       << fmt_double(m.buffer_mean_retention) << ',' << m.offers_accepted << ',' << fmt_double(m.loss) << ','
       << fmt_double(m.clip_fraction) << ',' << fmt_double(m.clip_fraction_on) << ','
       << fmt_double(m.clip_fraction_off) << ',' << fmt_double(m.log_weight_mean) << ','
       << fmt_double(m.log_weight_min) << ',' << fmt_double(m.log_weight_max) << ',' << m.off_policy_members << ',' << m.weights_clamped << ','
       << m.logprob_clamps;
    for (int t = 0; t < num_steps; ++t) {
        const double v = t < static_cast<int>(m.logprob_abs.size()) ? m.logprob_abs[static_cast<std::size_t>(t)]
                                                                     : std::numeric_limits<double>::quiet_NaN();
        os << ',' << fmt_double(v);
    }
    return os.str();
}

// Appends rows to a CSV file, writing the header when the file is new.
class MetricsWriter {
public:
    MetricsWriter(const std::string& path, int num_steps, bool append = false) : num_steps_(num_steps) {
        bool fresh = true;
        if (append) {
            std::ifstream probe(path);
            fresh = !probe.good() || probe.peek() == std::ifstream::traits_type::eof();
        }
        out_.open(path, append ? std::ios::app : std::ios::trunc);
        if (!out_) throw Error("cannot open metrics file '" + path + "'");
        if (fresh) out_ << metrics_header(num_steps_) << '\n';
    }

    void write(const IterationMetrics& m) {
        out_ << metrics_row(m, num_steps_) << '\n';
        out_.flush();
    }

private:
    int num_steps_;
    std::ofstream out_;
};

// Mean of `values` over the trailing `window` entries ending at index `end` (inclusive).
inline double trailing_mean(const std::vector<double>& values, std::size_t end, std::size_t window) {
    const std::size_t begin = end + 1 >= window ? end + 1 - window : 0;
    double s = 0.0;
    for (std::size_t i = begin; i <= end; ++i) s += values[i];
    return s / static_cast<double>(end + 1 - begin);
}

inline std::vector<double> reward_curve(const std::vector<IterationMetrics>& history) {
    std::vector<double> out;
    out.reserve(history.size());
    for (const auto& m : history) out.push_back(m.mean_reward);
    return out;
}

inline double final_reward(const std::vector<IterationMetrics>& history, std::size_t window = 10) {
    if (history.empty()) return std::numeric_limits<double>::quiet_NaN();
    return trailing_mean(reward_curve(history), history.size() - 1, window);
}

// First iteration whose trailing-window mean reward exceeds `threshold`, counting only
// full windows; -1 if never.
inline int iterations_to_threshold(const std::vector<IterationMetrics>& history, double threshold,
                                   std::size_t window = 10) {
    const auto curve = reward_curve(history);
    for (std::size_t i = window > 0 ? window - 1 : 0; i < curve.size(); ++i) {
        if (trailing_mean(curve, i, window) > threshold) return history[i].iteration;
    }
    return -1;
}

inline nlohmann::json summarize(const std::vector<IterationMetrics>& history) {
    nlohmann::json j;
    j["iterations"] = history.size();
    if (history.empty()) return j;
    j["final_mean_reward"] = final_reward(history);
    double peak = history.front().mean_reward;
    std::size_t clamped = 0;
    for (const auto& m : history) {
        peak = std::max(peak, m.mean_reward);
        clamped += static_cast<std::size_t>(m.weights_clamped);
    }
    j["peak_mean_reward"] = peak;
    j["weights_clamped_total"] = clamped;
    j["final_buffer_size"] = history.back().buffer_size;
    return j;
}

}  // namespace opgrpo
