#include <catch_amalgamated.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code = -1;
    std::string output;  // stdout and stderr together
};

Outcome run_cli(const std::string& args, const fs::path& root) {
    const std::string cmd =
        "OPGRPO_OUTPUT_ROOT='" + root.string() + "' '" + std::string(OPGRPO_CLI) + "' " + args + " 2>&1";
    Outcome out;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), buf.size(), pipe) != nullptr) out.output += buf.data();
    const int status = pclose(pipe);
    out.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return out;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

struct Workspace {
    fs::path root;
    fs::path config;
    Workspace() {
        root = fs::temp_directory_path() / "opgrpo_cli_test";
        fs::remove_all(root);
        fs::create_directories(root);
        config = root / "tiny.json";
        std::ofstream(config) << R"({"group_size": 4, "groups_per_iteration": 4, "num_steps": 10, "hidden": [8],
                                     "off_policy_fraction": 0.5, "iterations": 3})";
    }
    ~Workspace() { fs::remove_all(root); }
};

}  // namespace

TEST_CASE("missing config file is a configuration error naming the path", "[cli]") {
    Workspace ws;
    const auto r = run_cli("train -q --config /no/such/config.json", ws.root);
    CHECK(r.code == 2);
    CHECK(r.output.find("/no/such/config.json") != std::string::npos);
}

TEST_CASE("bad flags and values exit with code 2", "[cli]") {
    Workspace ws;
    CHECK(run_cli("train -q --config '" + ws.config.string() + "' --mode sideways", ws.root).code == 2);
    CHECK(run_cli("train -q --config '" + ws.config.string() + "' --group-size 1", ws.root).code == 2);
    CHECK(run_cli("train -q --set 'nonsense=1'", ws.root).code == 2);
    CHECK(run_cli("frobnicate", ws.root).code == 2);
    CHECK(run_cli("ablation -q --preset nope", ws.root).code == 2);
    CHECK(run_cli("inspect-buffer /no/such/ckpt.json", ws.root).code == 2);
}

TEST_CASE("train writes a complete run directory", "[cli]") {
    Workspace ws;
    const auto dir = ws.root / "one";
    const auto r = run_cli("train -q --config '" + ws.config.string() + "' --iterations 1 -o '" + dir.string() + "'",
                           ws.root);
    REQUIRE(r.code == 0);
    const std::string metrics = slurp(dir / "metrics.csv");
    CHECK(line_count(metrics) == 2);
    for (const char* f : {"config.json", "summary.json", "manifest.json", "final.json"}) {
        INFO(f);
        CHECK(fs::exists(dir / f));
    }
    const std::string manifest = slurp(dir / "manifest.json");
    for (const char* key : {"run_id", "config_hash", "code_version", "started", "finished"}) {
        INFO(key);
        CHECK(manifest.find(key) != std::string::npos);
    }
}

TEST_CASE("runs with the same config get distinct directories", "[cli]") {
    Workspace ws;
    const std::string args = "train -q --config '" + ws.config.string() + "' --iterations 1";
    REQUIRE(run_cli(args, ws.root).code == 0);
    REQUIRE(run_cli(args, ws.root).code == 0);
    std::size_t dirs = 0;
    for (const auto& e : fs::directory_iterator(ws.root)) dirs += e.is_directory() ? 1 : 0;
    CHECK(dirs == 2);
}

TEST_CASE("resume continues the metrics file", "[cli]") {
    Workspace ws;
    const auto dir = ws.root / "resume";
    REQUIRE(run_cli("train -q --config '" + ws.config.string() + "' -o '" + dir.string() + "'", ws.root).code == 0);
    const auto r = run_cli("train -q --resume '" + (dir / "final.json").string() + "' --iterations 5 -o '" +
                               dir.string() + "'",
                           ws.root);
    REQUIRE(r.code == 0);
    CHECK(line_count(slurp(dir / "metrics.csv")) == 6);
}

TEST_CASE("analysis subcommands read a trained checkpoint", "[cli]") {
    Workspace ws;
    const auto dir = ws.root / "src";
    REQUIRE(run_cli("train -q --config '" + ws.config.string() + "' -o '" + dir.string() + "'", ws.root).code == 0);
    const std::string ckpt = (dir / "final.json").string();

    const auto profile = ws.root / "profile.csv";
    REQUIRE(run_cli("logprob-profile '" + ckpt + "' -n 16 -o '" + profile.string() + "'", ws.root).code == 0);
    CHECK(line_count(slurp(profile)) == 11);

    const auto buffer = ws.root / "buffer.json";
    REQUIRE(run_cli("inspect-buffer '" + ckpt + "' -o '" + buffer.string() + "'", ws.root).code == 0);
    CHECK(slurp(buffer).find("\"size\"") != std::string::npos);

    const auto merged = ws.root / "plot.csv";
    const std::string m = (dir / "metrics.csv").string();
    REQUIRE(run_cli("plot-data '" + m + "' '" + m + "' -o '" + merged.string() + "'", ws.root).code == 0);
    const std::string header = slurp(m).substr(0, slurp(m).find('\n'));
    const std::size_t metrics_cols = static_cast<std::size_t>(std::count(header.begin(), header.end(), ','));
    CHECK(line_count(slurp(merged)) == 1 + 2 * 3 * metrics_cols);

    const auto none = run_cli("plot-data", ws.root);
    CHECK(none.code == 2);
    CHECK(none.output.find("inputs") != std::string::npos);
}
