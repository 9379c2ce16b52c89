#pragma once

#include <string>

#include "json.hpp"
#include "ssmpeft/analysis.hpp"
#include "ssmpeft/trainer.hpp"

namespace ssmpeft {

// Invalid experiment configuration; `where` is a JSON-pointer-style path to
// the offending field.
struct ConfigError : std::runtime_error {
    std::string where;
    ConfigError(std::string path, const std::string& msg)
        : std::runtime_error(path + ": " + msg), where(std::move(path)) {}
};

struct ExperimentConfig {
    ArchConfig arch;
    AdapterSpec adapter;
    TaskSpec task;
    TrainConfig train_cfg;
    int64_t train_n = 256;
    int64_t val_n = 64;
    std::string output_dir = "out";
};

// Parses and validates against the shipped experiment_config schema; the
// SSMPEFT_SEED environment variable overrides the configured seed.
ExperimentConfig parse_experiment_config(const nlohmann::json& j,
                                         const std::vector<ArchConfig>& extra_archs = {});

std::vector<ArchConfig> parse_arch_file(const nlohmann::json& j);

AdapterSpec parse_adapter_spec(const nlohmann::json& j, const std::string& path);
TaskSpec parse_task_spec(const nlohmann::json& j, const std::string& path);

}  // namespace ssmpeft
