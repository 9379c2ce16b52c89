#pragma once

#include <string>
#include <vector>

#include "ssmpeft/adapters.hpp"

namespace ssmpeft {

// Architecture shape record used for symbolic parameter / MAC accounting.
struct ArchConfig {
    std::string name;
    int64_t d_model = 0;
    int64_t n_layer = 0;
    int64_t d_state = 0;  // H
    int64_t expand = 2;
    int64_t dt_rank = 0;  // 0 => ceil(d_model / 16)
    int64_t vocab = 0;
    int64_t conv_width = 4;

    int64_t d_inner() const { return expand * d_model; }
    int64_t rank() const { return dt_rank > 0 ? dt_rank : (d_model + 15) / 16; }
    ModelDims dims() const;
};

const std::vector<ArchConfig>& builtin_configs();
ArchConfig find_config(const std::string& name,
                       const std::vector<ArchConfig>& extra = {});

// embedding (tied head) + blocks + final norm
int64_t backbone_total_params(const ArchConfig& arch);

struct ParamCount {
    int64_t trainable = 0;
    int64_t added = 0;  // new parameters introduced by the adapter
    int64_t total = 0;  // backbone + added
    double percent = 0.0;
};
ParamCount count_params(const ArchConfig& arch, const AdapterSpec& spec);

struct FlopReport {
    double base_macs_per_token = 0.0;
    double adapter_extra_macs_per_token = 0.0;  // sequence-level costs amortized over L
    double relative_overhead = 0.0;             // extra / base
    int64_t seq_len = 0;
    double base_macs_total = 0.0;
    double extra_macs_total = 0.0;
};
FlopReport estimate_flops(const ArchConfig& arch, const AdapterSpec& spec, int64_t seq_len);

struct MethodRow {
    std::string method;
    int64_t trainable = 0;
    double percent = 0.0;
    double overhead_percent = 0.0;
};
std::vector<MethodRow> compare_methods(const ArchConfig& arch,
                                       const std::vector<AdapterSpec>& specs,
                                       int64_t seq_len = 128);

std::string render_rows_csv(const std::vector<MethodRow>& rows);
std::string render_rows_json(const std::vector<MethodRow>& rows);

// default hyperparameters used when a method needs them and none are given
// (LoRA rank 8, 64 virtual tokens, 8 extra states, SDT keep (0.5, 0.25))
AdapterSpec default_spec(Method m);

}  // namespace ssmpeft
