#pragma once

#include <string>
#include <vector>

#include "ssmpeft/ssm.hpp"

namespace ssmpeft {

struct EquivalenceReport {
    std::string name;
    double max_abs_error = 0.0;
    int64_t instances_checked = 0;
    bool passed = false;
    uint64_t worst_seed = 0;
    double tolerance = 0.0;
};

// Randomized layer instance for the equivalence suites: T in [1,16], D in
// [1,4], H in [1,8]; A_log ~ N(0,1), weights ~ N(0, 0.02^2), x ~ N(0,1).
struct TheoryInstance {
    bool is_s6 = true;
    SsmLayerParams s6;
    S4LayerParams s4;
    Tensor x;  // [T, D]
    int64_t t = 0, d = 0, h = 0;

    ScanTrace scan_of(const Tensor& xs, Tensor* h0 = nullptr);
    ScanTrace scan(Tensor* h0 = nullptr) { return scan_of(x, h0); }
};
TheoryInstance make_instance(uint64_t seed, bool s6, double weight_scale = 0.02,
                             bool zero_skip = false);

// final hidden state of scanning the prefix segment from h0 = 0
Tensor prefix_to_initial_state(TheoryInstance& inst, const Tensor& prefix_emb);

// scan(prefix ++ x) restricted to the x positions vs scan(x, h0 = h_prefix)
EquivalenceReport verify_prefix_equivalence(int64_t instances, uint64_t base_seed,
                                            double tol = 1e-10);

struct SuffixForward {
    Tensor y;        // [T, D]
    Tensor h_equiv;  // [D, H], the substituted state offset (iterative variant)
};
// literal per-step correction C_t (h_t + Abar_suffix^{-1} Bbar_suffix * suffix)
SuffixForward iterative_suffix_forward(TheoryInstance& inst, const Tensor& suffix_emb);
// readout at the suffix position: C_suffix (Abar_suffix h_t + Bbar_suffix * suffix)
Tensor naive_suffix_forward(TheoryInstance& inst, const Tensor& suffix_emb);

EquivalenceReport verify_iterative_suffix_equivalence(int64_t instances, uint64_t base_seed,
                                                      double tol = 1e-10);
// constructs an instance where the two suffix implementations visibly differ;
// returns the max abs output difference
double demo_suffix_mismatch(uint64_t seed);

EquivalenceReport verify_initial_state_closed_form(int64_t instances, uint64_t base_seed,
                                                   double tol = 1e-10);
EquivalenceReport verify_s4_offset_y_equals_h(int64_t instances, uint64_t base_seed,
                                              double tol = 1e-12);
EquivalenceReport verify_uniform_effect(int64_t instances, uint64_t base_seed,
                                        int64_t perturbations = 50, double tol = 1e-12);
EquivalenceReport verify_abar_product_decay(int64_t instances, uint64_t base_seed);

std::vector<EquivalenceReport> run_all_checks(uint64_t base_seed, int64_t instances = 100);

// ---- Table-2 token layouts -----------------------------------------------------

enum class LayoutMode { prefix, suffix, iterative_suffix };

struct TokenRef {
    bool is_virtual = false;
    int64_t index = 0;  // input position (1-based) or virtual-token index (0-based)
    bool operator==(const TokenRef&) const = default;
};

// ordered token layout at generation steps T, T+1, ..., T+steps-1
std::vector<std::vector<TokenRef>> token_layout(LayoutMode mode, int64_t t, int64_t v,
                                                int64_t steps = 2);

// ---- decay profile ---------------------------------------------------------------

struct DecayProfile {
    std::vector<double> initial_state_delta;  // per-t L2 norm of (y_hat - y)
    std::vector<double> state_offset_delta;
    std::vector<double> prod_abar;  // T * D * H cumulative products
    int64_t t = 0, d = 0, h = 0;
    bool prod_strictly_decreasing = false;
};
DecayProfile effect_decay_profile(TheoryInstance& inst, const Tensor& h_prime);

}  // namespace ssmpeft
