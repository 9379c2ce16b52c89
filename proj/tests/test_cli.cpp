#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string out;
};

CliResult run_cli(const std::string& args, const fs::path& dir) {
    fs::path out_file = dir / "stdout.txt";
    std::string cmd = std::string(SSMPEFT_CLI_PATH) + " " + args + " > " + out_file.string() +
                      " 2> " + (dir / "stderr.txt").string();
    int rc = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WEXITSTATUS(rc);
    std::ifstream f(out_file);
    r.out = std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return r;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("ssmpeft_cli_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

json toy_experiment(int epochs = 2) {
    json cfg;
    cfg["arch"] = {{"name", "toy"},   {"d_model", 8},  {"n_layer", 2}, {"d_state", 4},
                   {"expand", 2},     {"dt_rank", 1},  {"vocab", 16},  {"conv_width", 4}};
    cfg["adapter"] = {{"method", "state_offset_h"}};
    cfg["task"] = {{"kind", "selective_copy"}, {"seq_len", 8}, {"n_marked", 2}, {"vocab", 16}};
    cfg["train"] = {{"lr", 0.01}, {"epochs", epochs}, {"batch_size", 8}, {"seed", 3}};
    cfg["data"] = {{"train_n", 24}, {"val_n", 8}};
    return cfg;
}

}  // namespace

TEST_CASE("count-params prints the published 1.4b state-offset percentage") {
    TempDir tmp;
    CliResult r =
        run_cli("count-params --arch mamba-1.4b --method state_offset_h --format json", tmp.path);
    REQUIRE(r.exit_code == 0);
    json rows = json::parse(r.out);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0]["params_percent"].get<double>() ==
          doctest::Approx(0.22872629533389424).epsilon(1e-9));

    CliResult csv =
        run_cli("count-params --arch mamba-1.4b --method state_offset_h --format csv", tmp.path);
    CHECK(csv.out.find("method,trainable,params_percent") != std::string::npos);
    CHECK(csv.out.find("0.228726295333894") != std::string::npos);
}

TEST_CASE("flops reports the 130m base near 16.45 GMACs at L=128") {
    TempDir tmp;
    CliResult r = run_cli("flops --arch mamba-130m --seq 128 --format json", tmp.path);
    REQUIRE(r.exit_code == 0);
    json o = json::parse(r.out);
    double base = o["base_gmacs"].get<double>();
    CHECK(std::fabs(base - 16.45) / 16.45 < 0.15);
}

TEST_CASE("verify exits zero and writes parseable reports") {
    TempDir tmp;
    fs::path out = tmp.path / "reports.jsonl";
    CliResult r = run_cli("verify --seed 0 --instances 20 --out " + out.string(), tmp.path);
    CHECK(r.exit_code == 0);
    std::ifstream f(out);
    std::string line;
    int n = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json o = json::parse(line);
        CHECK(o.contains("name"));
        CHECK(o.contains("max_abs_error"));
        CHECK(o.contains("instances"));
        CHECK(o.contains("passed"));
        CHECK(o.contains("worst_seed"));
        CHECK(o["passed"].get<bool>());
        ++n;
    }
    CHECK(n >= 5);
}

TEST_CASE("unknown flags give usage exit code 2; bad config gives exit code 3") {
    TempDir tmp;
    CHECK(run_cli("verify --no-such-flag", tmp.path).exit_code == 2);
    CHECK(run_cli("frobnicate", tmp.path).exit_code == 2);

    // schema violation: lr missing
    json cfg = toy_experiment();
    cfg["train"].erase("lr");
    fs::path cfg_path = tmp.path / "bad.json";
    std::ofstream(cfg_path) << cfg.dump(2);
    CliResult r = run_cli("train --config " + cfg_path.string(), tmp.path);
    CHECK(r.exit_code == 3);

    // oversized arch is rejected as config error
    json big = toy_experiment();
    big["arch"] = "mamba-130m";
    big["task"]["vocab"] = 50280;
    std::ofstream(tmp.path / "big.json") << big.dump(2);
    CHECK(run_cli("train --config " + (tmp.path / "big.json").string(), tmp.path).exit_code == 3);
}

TEST_CASE("train writes metrics, run metrics, and a checkpoint; report aggregates") {
    TempDir tmp;
    json cfg = toy_experiment();
    cfg["output_dir"] = (tmp.path / "run1").string();
    fs::path cfg_path = tmp.path / "exp.json";
    std::ofstream(cfg_path) << cfg.dump(2);
    CliResult r = run_cli("train --config " + cfg_path.string(), tmp.path);
    REQUIRE(r.exit_code == 0);
    CHECK(fs::exists(tmp.path / "run1" / "metrics.jsonl"));
    CHECK(fs::exists(tmp.path / "run1" / "checkpoint.bin"));
    std::ifstream rm(tmp.path / "run1" / "run_metrics.json");
    json metrics = json::parse(rm);
    CHECK(metrics["method"] == "state_offset_h");
    CHECK(metrics["epochs"].size() == 2);

    CliResult rep = run_cli(
        "report " + (tmp.path / "run1" / "run_metrics.json").string() + " --format csv", tmp.path);
    CHECK(rep.exit_code == 0);
    CHECK(rep.out.find("state_offset_h") != std::string::npos);
}

TEST_CASE("flag overrides win over the config file") {
    TempDir tmp;
    json cfg = toy_experiment(2);
    cfg["output_dir"] = (tmp.path / "o1").string();
    fs::path cfg_path = tmp.path / "exp.json";
    std::ofstream(cfg_path) << cfg.dump(2);
    CliResult r = run_cli("train --config " + cfg_path.string() + " --epochs 1 --out " +
                              (tmp.path / "o2").string(),
                          tmp.path);
    REQUIRE(r.exit_code == 0);
    CHECK(!fs::exists(tmp.path / "o1"));
    std::ifstream rm(tmp.path / "o2" / "run_metrics.json");
    json metrics = json::parse(rm);
    CHECK(metrics["epochs"].size() == 1);
}
