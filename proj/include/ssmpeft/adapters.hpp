#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "ssmpeft/ssm.hpp"

namespace ssmpeft {

enum class Method {
    full_all,
    full_s6,
    state_offset_h,
    state_offset_y,
    state_offset_h_lowrank,
    initial_state,
    prompt_tuning,
    prefix_tuning,
    bitfit,
    lora,
    additional_scan,
    sdt,
};

std::string method_name(Method m);
Method method_from_name(const std::string& s);
const std::vector<Method>& all_methods();

struct AdapterSpec {
    Method method = Method::full_s6;
    std::optional<int64_t> rank_r;             // lora, state_offset_h_lowrank
    std::optional<int64_t> virtual_tokens;     // prompt_tuning, prefix_tuning
    std::optional<int64_t> extra_states;       // additional_scan
    std::optional<std::pair<double, double>> sdt_keep;  // (channel fraction, state fraction)

    // exactly the hyperparameters required by the method must be present
    void validate() const;
};

struct LoraTarget {
    Tensor u, vt;  // delta = (alpha/r) * u * vt, u zero-initialized
};

// Trainable state for one applied PEFT method. Construction allocates only the
// fields the method needs; at initialization the adapted forward pass matches
// the frozen backbone (prompt/prefix excepted, which extend the sequence).
struct AdapterState {
    AdapterSpec spec;
    std::vector<Tensor> h_prime;               // [D,H] per layer
    std::vector<Tensor> y_prime;               // [D] per layer
    std::vector<Tensor> lowrank_u, lowrank_vt;  // [D,r], [r,H]
    std::vector<Tensor> h0_prime;              // [D,H]
    std::vector<Tensor> prefix;                // [V,D] per layer
    Tensor prompt;                             // [V,d_model], global
    std::vector<std::array<LoraTarget, 4>> lora;  // w_b, w_c, w_dt, w_dt_in
    std::vector<Tensor> add_a_log, add_wb, add_wc;  // [D,n], [n,D], [n,D]
    std::vector<std::array<Tensor, 3>> sdt_mask;    // 0/1 over a_log, w_b, w_c
    bool sdt_selected = false;
    double lora_alpha = 0.0;

    std::vector<std::pair<std::string, Tensor*>> named_params();
    int64_t added_params();
};

// Allocates and initializes the adapter, then marks the trainable set
// (requires_grad flags on model + adapter parameters).
AdapterState init_adapter(Model& m, const AdapterSpec& spec, uint64_t seed);
void mark_trainable(Model& m, AdapterState& a);

// requires_grad parameters in deterministic order (model params, then adapter)
std::vector<std::pair<std::string, Tensor*>> trainable_params(Model& m, AdapterState& a);

// zeroes gradients of SDT-frozen entries; no-op for other methods
void apply_grad_masks(Model& m, AdapterState& a);

// forward pass with the adapter's hooks attached
Tensor adapted_forward(Model& m, AdapterState& a, const std::vector<int64_t>& tokens,
                       Tape* tape = nullptr);

// standalone output adjustments (Table-1 forms), usable on any scan output
Tensor apply_state_offset_h(const Tensor& y, const Tensor& c_seq, const Tensor& h_prime);
Tensor apply_state_offset_y(const Tensor& y, const Tensor& y_prime);

// bias-only trainable mask; returns the names, warns on an empty mask
std::vector<std::string> apply_bitfit(Model& m);

struct ParamReport {
    int64_t trainable = 0;
    int64_t total = 0;
    double percent = 0.0;
};
ParamReport trainable_parameter_report(Model& m, AdapterState& a);

// One warmup example for SDT mask selection.
struct WarmupExample {
    std::vector<int64_t> tokens;
    std::vector<int64_t> targets;
    std::vector<uint8_t> mask;
};
// Accumulates |grad| over the warmup batch, then freezes the per-matrix mask:
// top channel-fraction channels x top state-fraction states per matrix group.
void select_sdt_mask(Model& m, AdapterState& a, const std::vector<WarmupExample>& warmup);

int64_t lora_rank_for(int64_t r, int64_t rows, int64_t cols);

}  // namespace ssmpeft
