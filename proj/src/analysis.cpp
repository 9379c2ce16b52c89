#include "ssmpeft/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace ssmpeft {

ModelDims ArchConfig::dims() const {
    ModelDims d;
    d.d_model = d_model;
    d.n_layer = n_layer;
    d.d_state = d_state;
    d.expand = expand;
    d.dt_rank = rank();
    d.vocab = vocab;
    d.conv_width = conv_width;
    return d;
}

const std::vector<ArchConfig>& builtin_configs() {
    // shapes of the public Mamba family; vocab is the padded 50280
    static const std::vector<ArchConfig> cfgs = {
        {"mamba-130m", 768, 24, 16, 2, 48, 50280, 4},
        {"mamba-370m", 1024, 48, 16, 2, 64, 50280, 4},
        {"mamba-790m", 1536, 48, 16, 2, 96, 50280, 4},
        {"mamba-1.4b", 2048, 48, 16, 2, 128, 50280, 4},
        {"mamba-2.8b", 2560, 64, 16, 2, 160, 50280, 4},
    };
    return cfgs;
}

ArchConfig find_config(const std::string& name, const std::vector<ArchConfig>& extra) {
    for (const auto& c : extra)
        if (c.name == name) return c;
    for (const auto& c : builtin_configs())
        if (c.name == name) return c;
    throw std::invalid_argument("unknown architecture '" + name + "'");
}

namespace {

struct Sizes {
    int64_t d, D, H, R, K, V, L;
};

Sizes sizes_of(const ArchConfig& a) {
    return {a.d_model, a.d_inner(), a.d_state, a.rank(), a.conv_width, a.vocab, a.n_layer};
}

int64_t block_params(const Sizes& s) {
    return 2 * s.D * s.d              // in_proj
           + s.D * s.K + s.D          // conv weight + bias
           + (s.R + 2 * s.H) * s.D    // x_proj (W_dt_in, W_B, W_C)
           + s.D * s.R + s.D          // dt_proj weight + bias
           + s.D * s.H                // A_log
           + s.D                      // skip
           + s.d * s.D                // out_proj
           + s.d;                     // norm gain
}

int64_t s6_params(const Sizes& s) {
    return s.D * s.K + s.D + (s.R + 2 * s.H) * s.D + s.D * s.R + s.D + s.D * s.H + s.D;
}

// the four wrapped matrices (W_B, W_C, W_dt, W_dt_in) with per-target rank clamp
int64_t lora_params_per_layer(const Sizes& s, int64_t r) {
    const std::pair<int64_t, int64_t> shapes[4] = {{s.H, s.D}, {s.H, s.D}, {s.D, s.R}, {s.R, s.D}};
    int64_t n = 0;
    for (auto [rows, cols] : shapes) {
        int64_t rr = lora_rank_for(r, rows, cols);
        n += rr * (rows + cols);
    }
    return n;
}

}  // namespace

int64_t backbone_total_params(const ArchConfig& arch) {
    Sizes s = sizes_of(arch);
    return s.V * s.d + s.L * block_params(s) + s.d;
}

AdapterSpec default_spec(Method m) {
    AdapterSpec spec;
    spec.method = m;
    switch (m) {
        case Method::lora:
        case Method::state_offset_h_lowrank:
            spec.rank_r = 8;
            break;
        case Method::prompt_tuning:
        case Method::prefix_tuning:
            spec.virtual_tokens = 64;
            break;
        case Method::additional_scan:
            spec.extra_states = 8;
            break;
        case Method::sdt:
            spec.sdt_keep = {0.5, 0.25};
            break;
        default:
            break;
    }
    return spec;
}

ParamCount count_params(const ArchConfig& arch, const AdapterSpec& spec) {
    spec.validate();
    Sizes s = sizes_of(arch);
    int64_t backbone = backbone_total_params(arch);
    ParamCount out;
    switch (spec.method) {
        case Method::full_all:
            out.trainable = backbone;
            break;
        case Method::full_s6:
            out.trainable = s.L * s6_params(s);
            break;
        case Method::state_offset_h:
        case Method::initial_state:
            out.trainable = s.L * s.D * s.H;
            out.added = out.trainable;
            break;
        case Method::state_offset_y:
            out.trainable = s.L * s.D;
            out.added = out.trainable;
            break;
        case Method::state_offset_h_lowrank:
            out.trainable = s.L * *spec.rank_r * (s.D + s.H);
            out.added = out.trainable;
            break;
        case Method::prompt_tuning:
            out.trainable = *spec.virtual_tokens * s.d;
            out.added = out.trainable;
            break;
        case Method::prefix_tuning:
            out.trainable = s.L * *spec.virtual_tokens * s.D;
            out.added = out.trainable;
            break;
        case Method::bitfit:
            out.trainable = s.L * 2 * s.D;  // conv bias + dt bias
            break;
        case Method::lora:
            out.trainable = s.L * lora_params_per_layer(s, *spec.rank_r);
            out.added = out.trainable;
            break;
        case Method::additional_scan:
            out.trainable = s.L * 3 * *spec.extra_states * s.D;
            out.added = out.trainable;
            break;
        case Method::sdt: {
            auto [kc, ks] = *spec.sdt_keep;
            int64_t c = std::clamp<int64_t>(std::llround(kc * static_cast<double>(s.D)), 0, s.D);
            int64_t st = std::clamp<int64_t>(std::llround(ks * static_cast<double>(s.H)), 0, s.H);
            out.trainable = s.L * 3 * c * st;
            break;
        }
    }
    out.total = backbone + out.added;
    out.percent = 100.0 * static_cast<double>(out.trainable) / static_cast<double>(out.total);
    return out;
}

namespace {

// MAC counts; elementwise nonlinearities and norms excluded, one add counts as
// one MAC where an adapter only adds
double base_macs_per_token(const Sizes& s) {
    double layer = 2.0 * s.D * s.d                 // in_proj
                   + 1.0 * s.D * s.K + s.D         // conv + bias
                   + 1.0 * (s.R + 2 * s.H) * s.D   // x_proj
                   + 1.0 * s.D * s.R + s.D         // dt_proj
                   + 4.0 * s.D * s.H + 3.0 * s.D   // scan update + readout + skip + gate
                   + 1.0 * s.d * s.D;              // out_proj
    return static_cast<double>(s.L) * layer + static_cast<double>(s.d) * s.V;  // + tied head
}

double scan_macs_per_position(const Sizes& s) {
    return 1.0 * (s.R + 2 * s.H) * s.D + 1.0 * s.D * s.R + s.D + 4.0 * s.D * s.H + 2.0 * s.D;
}

}  // namespace

FlopReport estimate_flops(const ArchConfig& arch, const AdapterSpec& spec, int64_t seq_len) {
    if (seq_len < 1) throw std::invalid_argument("estimate_flops: seq_len must be >= 1");
    spec.validate();
    Sizes s = sizes_of(arch);
    double L = static_cast<double>(seq_len);
    FlopReport r;
    r.seq_len = seq_len;
    r.base_macs_per_token = base_macs_per_token(s);
    double extra = 0.0;
    switch (spec.method) {
        case Method::state_offset_h:
            extra = 1.0 * s.L * s.D * s.H;
            break;
        case Method::state_offset_y:
            extra = 1.0 * s.L * s.D;
            break;
        case Method::state_offset_h_lowrank:
            // per-token correction plus the U*Vt materialization once per sequence
            extra = 1.0 * s.L * s.D * s.H +
                    static_cast<double>(s.L * *spec.rank_r * s.D * s.H) / L;
            break;
        case Method::initial_state:
            extra = static_cast<double>(s.L * s.D * s.H) / L;  // one-time state load
            break;
        case Method::lora: {
            const std::pair<int64_t, int64_t> shapes[4] = {
                {s.H, s.D}, {s.H, s.D}, {s.D, s.R}, {s.R, s.D}};
            double per_layer = 0.0;
            for (auto [rows, cols] : shapes) {
                int64_t rr = lora_rank_for(*spec.rank_r, rows, cols);
                per_layer += static_cast<double>(rr * (rows + cols));
            }
            extra = static_cast<double>(s.L) * per_layer;
            break;
        }
        case Method::additional_scan:
            extra = 6.0 * s.L * *spec.extra_states * s.D;
            break;
        case Method::prompt_tuning: {
            double layer = 2.0 * s.D * s.d + 1.0 * s.D * s.K + s.D + scan_macs_per_position(s) +
                           s.D + 1.0 * s.d * s.D;
            extra = static_cast<double>(*spec.virtual_tokens) * s.L * layer / L;
            break;
        }
        case Method::prefix_tuning:
            extra = static_cast<double>(*spec.virtual_tokens) * s.L * scan_macs_per_position(s) / L;
            break;
        case Method::full_all:
        case Method::full_s6:
        case Method::bitfit:
        case Method::sdt:
            extra = 0.0;
            break;
    }
    r.adapter_extra_macs_per_token = extra;
    r.relative_overhead = extra / r.base_macs_per_token;
    r.base_macs_total = r.base_macs_per_token * L;
    r.extra_macs_total = extra * L;
    return r;
}

std::vector<MethodRow> compare_methods(const ArchConfig& arch,
                                       const std::vector<AdapterSpec>& specs, int64_t seq_len) {
    std::vector<MethodRow> rows;
    for (const auto& spec : specs) {
        ParamCount pc = count_params(arch, spec);
        FlopReport fr = estimate_flops(arch, spec, seq_len);
        rows.push_back({method_name(spec.method), pc.trainable, pc.percent,
                        100.0 * fr.relative_overhead});
    }
    std::sort(rows.begin(), rows.end(), [](const MethodRow& a, const MethodRow& b) {
        if (a.percent != b.percent) return a.percent < b.percent;
        return a.method < b.method;
    });
    return rows;
}

namespace {

// one serializer for both renderings so CSV and JSON carry identical digits
std::string num(double v) { return nlohmann::json(v).dump(); }

}  // namespace

std::string render_rows_csv(const std::vector<MethodRow>& rows) {
    std::string out = "method,trainable,params_percent,overhead_percent\n";
    for (const auto& r : rows)
        out += r.method + "," + std::to_string(r.trainable) + "," + num(r.percent) + "," +
               num(r.overhead_percent) + "\n";
    return out;
}

std::string render_rows_json(const std::vector<MethodRow>& rows) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
        nlohmann::ordered_json o;
        o["method"] = r.method;
        o["trainable"] = r.trainable;
        o["params_percent"] = r.percent;
        o["overhead_percent"] = r.overhead_percent;
        arr.push_back(o);
    }
    return arr.dump(2) + "\n";
}

}  // namespace ssmpeft
