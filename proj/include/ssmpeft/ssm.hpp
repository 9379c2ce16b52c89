#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ssmpeft/tensor.hpp"

namespace ssmpeft {

// watches a parameter when a tape is active, otherwise passes it through
inline Tensor twatch(Tape* tape, Tensor& p) { return tape ? tape->watch(p) : p; }

// ---- S6 layer ----------------------------------------------------------------

// Per-layer selective-scan parameters. A is realized as -exp(a_log), so the
// discrete factors exp(delta * A) stay in (0,1) for any positive step size.
struct SsmLayerParams {
    Tensor a_log;    // [D, H]
    Tensor w_b;      // [H, D]
    Tensor w_c;      // [H, D]
    Tensor w_dt;     // [D, R]
    Tensor w_dt_in;  // [R, D]
    Tensor b_dt;     // [D]
    Tensor skip_d;   // [D]

    int64_t channels() const { return a_log.shape[0]; }
    int64_t states() const { return a_log.shape[1]; }
    int64_t dt_rank() const { return w_dt.shape[1]; }
};

// Time-invariant (S4-style) layer: the projections collapse to constants.
struct S4LayerParams {
    Tensor a_log;      // [D, H]
    Tensor b;          // [H]
    Tensor c;          // [H]
    Tensor delta_pre;  // [D], step size is softplus(delta_pre)
    Tensor skip_d;     // [D]
};

struct ScanTrace {
    Tensor y;                        // [T, D], includes the skip term
    Tensor c_seq;                    // [T, H], tape-linked when a tape is active
    std::vector<double> h_seq;       // (T+1) * D * H, h0 first
    std::vector<double> abar_seq;    // T * D * H
    std::vector<double> delta_vals;  // T * D
    std::vector<double> b_vals;      // T * H
    int64_t t = 0, d = 0, h = 0;

    double hidden(int64_t step, int64_t dd, int64_t nn) const {  // step 0..T, 0 = h0
        return h_seq[(step * d + dd) * h + nn];
    }
    double abar(int64_t step, int64_t dd, int64_t nn) const {  // step 1..T
        return abar_seq[((step - 1) * d + dd) * h + nn];
    }
    Tensor final_state() const;  // [D, H]
};

// zero-order hold for A, Euler rule for B
struct Discretized {
    Tensor abar;   // [D, H], entries in (0,1)
    Tensor delta;  // [D]
    Tensor b;      // [H]
    double contrib(int64_t dd, int64_t nn, double x_d) const {
        return delta.at(dd) * b.at(nn) * x_d;
    }
};
Discretized discretize(const Tensor& a, const Tensor& delta, const Tensor& b_t);

// Optional replacements for the layer's projection parameters, already
// tape-linked (used by LoRA and additional-scan).
struct SsmOverrides {
    std::optional<Tensor> a;  // realized A [D, H'] (not a_log)
    std::optional<Tensor> w_b, w_c;  // [H', D]
    std::optional<Tensor> w_dt, w_dt_in;
};

ScanTrace s6_scan(SsmLayerParams& p, const Tensor& x_seq, Tensor* h0 = nullptr,
                  Tape* tape = nullptr, const SsmOverrides* ov = nullptr);
ScanTrace s4_scan(S4LayerParams& p, const Tensor& x_seq, Tensor* h0 = nullptr,
                  Tape* tape = nullptr);

// ---- Mamba block ---------------------------------------------------------------

struct MambaBlockParams {
    Tensor norm_g;  // [d_model]
    Tensor w_in;    // [2*D, d_model]
    Tensor conv_w;  // [D, k]
    Tensor conv_b;  // [D]
    SsmLayerParams ssm;
    Tensor w_out;  // [d_model, D]

    int64_t d_model() const { return w_in.shape[1]; }
    int64_t d_inner() const { return ssm.channels(); }
};

// Per-layer adapter modifications applied inside the SSM branch.
struct LayerHooks {
    Tensor* h_offset = nullptr;    // [D, H] readout offset
    Tensor* y_offset = nullptr;    // [D] output offset
    Tensor* lowrank_u = nullptr;   // [D, r], offset = U * Vt
    Tensor* lowrank_vt = nullptr;  // [r, H]
    Tensor* h0 = nullptr;          // [D, H] trainable initial state
    Tensor* prefix = nullptr;      // [V, D] virtual vectors entering the scan
    SsmOverrides ov;
};

Tensor mamba_block_forward(MambaBlockParams& blk, const Tensor& u_seq, Tape* tape = nullptr,
                           const LayerHooks* hooks = nullptr);

// ---- model ---------------------------------------------------------------------

struct ModelDims {
    int64_t d_model = 0, n_layer = 0, d_state = 0, expand = 2, dt_rank = 0, vocab = 0,
            conv_width = 4;
    int64_t d_inner() const { return expand * d_model; }
};

struct Model {
    ModelDims dims;
    Tensor embedding;  // [V, d_model]
    std::vector<MambaBlockParams> blocks;
    Tensor norm_f;  // [d_model]
    Tensor head;    // [d_model, V]; unset => tied to embedding

    bool tied_head() const { return !head.data; }
    std::vector<std::pair<std::string, Tensor*>> named_params();
    int64_t total_params();
    void set_all_trainable(bool flag);
    void zero_all_grads();
};

struct ModelHooks {
    Tensor* prompt = nullptr;  // [V, d_model] prepended at the input
    std::vector<LayerHooks> layers;
};

// embed -> blocks (pre-norm residual) -> final norm -> head; logits [T, vocab]
Tensor model_forward(Model& m, const std::vector<int64_t>& tokens, Tape* tape = nullptr,
                     ModelHooks* hooks = nullptr);

Model build_model(const ModelDims& dims, uint64_t seed);

double inv_softplus(double y);

}  // namespace ssmpeft
