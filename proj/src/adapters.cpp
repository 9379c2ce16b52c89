#include "ssmpeft/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "ssmpeft/rng.hpp"

namespace ssmpeft {

std::string method_name(Method m) {
    switch (m) {
        case Method::full_all: return "full_all";
        case Method::full_s6: return "full_s6";
        case Method::state_offset_h: return "state_offset_h";
        case Method::state_offset_y: return "state_offset_y";
        case Method::state_offset_h_lowrank: return "state_offset_h_lowrank";
        case Method::initial_state: return "initial_state";
        case Method::prompt_tuning: return "prompt_tuning";
        case Method::prefix_tuning: return "prefix_tuning";
        case Method::bitfit: return "bitfit";
        case Method::lora: return "lora";
        case Method::additional_scan: return "additional_scan";
        case Method::sdt: return "sdt";
    }
    return "?";
}

const std::vector<Method>& all_methods() {
    static const std::vector<Method> ms = {
        Method::full_all,       Method::full_s6,      Method::state_offset_h,
        Method::state_offset_y, Method::state_offset_h_lowrank, Method::initial_state,
        Method::prompt_tuning,  Method::prefix_tuning, Method::bitfit,
        Method::lora,           Method::additional_scan, Method::sdt};
    return ms;
}

Method method_from_name(const std::string& s) {
    for (Method m : all_methods())
        if (method_name(m) == s) return m;
    throw std::invalid_argument("unknown PEFT method '" + s + "'");
}

void AdapterSpec::validate() const {
    auto want = [&](bool cond, const char* what) {
        if (!cond)
            throw std::invalid_argument("adapter spec for " + method_name(method) + ": " + what);
    };
    bool needs_rank = method == Method::lora || method == Method::state_offset_h_lowrank;
    bool needs_tokens = method == Method::prompt_tuning || method == Method::prefix_tuning;
    bool needs_states = method == Method::additional_scan;
    bool needs_keep = method == Method::sdt;
    want(rank_r.has_value() == needs_rank, needs_rank ? "rank_r required" : "rank_r not applicable");
    want(virtual_tokens.has_value() == needs_tokens,
         needs_tokens ? "virtual_tokens required" : "virtual_tokens not applicable");
    want(extra_states.has_value() == needs_states,
         needs_states ? "extra_states required" : "extra_states not applicable");
    want(sdt_keep.has_value() == needs_keep,
         needs_keep ? "sdt_keep_fraction required" : "sdt_keep_fraction not applicable");
    if (rank_r && *rank_r <= 0) throw std::invalid_argument("adapter spec: rank_r must be positive");
    if (virtual_tokens && *virtual_tokens < 1)
        throw std::invalid_argument("adapter spec: virtual_tokens must be >= 1");
    if (extra_states && *extra_states < 1)
        throw std::invalid_argument("adapter spec: extra_states must be >= 1");
    if (sdt_keep) {
        auto [kc, ks] = *sdt_keep;
        if (!(kc > 0.0 && kc <= 1.0 && ks > 0.0 && ks <= 1.0))
            throw std::invalid_argument("adapter spec: sdt keep fractions must lie in (0,1]");
    }
}

int64_t lora_rank_for(int64_t r, int64_t rows, int64_t cols) {
    return std::min(r, std::min(rows, cols));
}

std::vector<std::pair<std::string, Tensor*>> AdapterState::named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    auto layer_list = [&](std::vector<Tensor>& v, const std::string& base) {
        for (size_t i = 0; i < v.size(); ++i)
            out.emplace_back("adapter." + base + "." + std::to_string(i), &v[i]);
    };
    layer_list(h_prime, "h_prime");
    layer_list(y_prime, "y_prime");
    layer_list(lowrank_u, "lowrank_u");
    layer_list(lowrank_vt, "lowrank_vt");
    layer_list(h0_prime, "h0_prime");
    layer_list(prefix, "prefix");
    if (prompt.data) out.emplace_back("adapter.prompt", &prompt);
    for (size_t i = 0; i < lora.size(); ++i) {
        static const char* tgt[4] = {"w_b", "w_c", "w_dt", "w_dt_in"};
        for (size_t j = 0; j < 4; ++j) {
            out.emplace_back("adapter.lora." + std::to_string(i) + "." + tgt[j] + ".u",
                             &lora[i][j].u);
            out.emplace_back("adapter.lora." + std::to_string(i) + "." + tgt[j] + ".vt",
                             &lora[i][j].vt);
        }
    }
    layer_list(add_a_log, "add_a_log");
    layer_list(add_wb, "add_wb");
    layer_list(add_wc, "add_wc");
    return out;
}

int64_t AdapterState::added_params() {
    int64_t n = 0;
    for (auto& [name, t] : named_params()) n += t->numel();
    return n;
}

AdapterState init_adapter(Model& m, const AdapterSpec& spec, uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    AdapterState a;
    a.spec = spec;
    int64_t L = static_cast<int64_t>(m.blocks.size());
    int64_t D = m.dims.d_inner(), H = m.dims.d_state, d = m.dims.d_model;

    auto normal_t = [&](Shape s, double sd) {
        Tensor t = Tensor::zeros(s);
        for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.normal(0.0, sd);
        return t;
    };

    switch (spec.method) {
        case Method::full_all:
        case Method::full_s6:
        case Method::bitfit:
            break;
        case Method::state_offset_h:
            for (int64_t l = 0; l < L; ++l) a.h_prime.push_back(Tensor::zeros({D, H}));
            break;
        case Method::state_offset_y:
            for (int64_t l = 0; l < L; ++l) a.y_prime.push_back(Tensor::zeros({D}));
            break;
        case Method::state_offset_h_lowrank: {
            int64_t r = *spec.rank_r;
            for (int64_t l = 0; l < L; ++l) {
                a.lowrank_u.push_back(Tensor::zeros({D, r}));
                a.lowrank_vt.push_back(normal_t({r, H}, 0.02));
            }
            break;
        }
        case Method::initial_state:
            for (int64_t l = 0; l < L; ++l) a.h0_prime.push_back(Tensor::zeros({D, H}));
            break;
        case Method::prompt_tuning: {
            int64_t V = *spec.virtual_tokens;
            a.prompt = Tensor::zeros({V, d});
            for (int64_t v = 0; v < V; ++v) {
                int64_t row = rng.uniform_int(0, m.dims.vocab - 1);
                for (int64_t i = 0; i < d; ++i) a.prompt.at2(v, i) = m.embedding.at2(row, i);
            }
            break;
        }
        case Method::prefix_tuning: {
            int64_t V = *spec.virtual_tokens;
            for (int64_t l = 0; l < L; ++l) a.prefix.push_back(normal_t({V, D}, 0.02));
            break;
        }
        case Method::lora: {
            int64_t r = *spec.rank_r;
            a.lora_alpha = static_cast<double>(r);
            int64_t R = m.blocks.empty() ? 1 : m.blocks[0].ssm.dt_rank();
            for (int64_t l = 0; l < L; ++l) {
                std::array<LoraTarget, 4> tg;
                const std::array<std::pair<int64_t, int64_t>, 4> shapes = {
                    std::pair{H, D}, {H, D}, {D, R}, {R, D}};
                for (size_t j = 0; j < 4; ++j) {
                    auto [rows, cols] = shapes[j];
                    int64_t rj = lora_rank_for(r, rows, cols);
                    tg[j].u = Tensor::zeros({rows, rj});
                    tg[j].vt = normal_t({rj, cols}, 0.02);
                }
                a.lora.push_back(std::move(tg));
            }
            break;
        }
        case Method::additional_scan: {
            int64_t n = *spec.extra_states;
            for (int64_t l = 0; l < L; ++l) {
                // continue the -(n+1) pattern so new states decay fast at init
                Tensor al = Tensor::zeros({D, n});
                for (int64_t dd = 0; dd < D; ++dd)
                    for (int64_t j = 0; j < n; ++j)
                        al.at2(dd, j) = std::log(static_cast<double>(H + 1 + j));
                a.add_a_log.push_back(std::move(al));
                a.add_wb.push_back(normal_t({n, D}, 0.02));
                a.add_wc.push_back(Tensor::zeros({n, D}));  // zero read-out keeps init neutral
            }
            break;
        }
        case Method::sdt: {
            for (int64_t l = 0; l < L; ++l) {
                std::array<Tensor, 3> masks = {Tensor::full({D, H}, 1.0), Tensor::full({H, D}, 1.0),
                                               Tensor::full({H, D}, 1.0)};
                a.sdt_mask.push_back(std::move(masks));
            }
            break;
        }
    }
    mark_trainable(m, a);
    return a;
}

void mark_trainable(Model& m, AdapterState& a) {
    m.set_all_trainable(false);
    for (auto& [name, t] : a.named_params()) t->requires_grad = true;
    switch (a.spec.method) {
        case Method::full_all:
            m.set_all_trainable(true);
            break;
        case Method::full_s6:
            for (auto& b : m.blocks) {
                b.conv_w.requires_grad = true;
                b.conv_b.requires_grad = true;
                b.ssm.a_log.requires_grad = true;
                b.ssm.w_b.requires_grad = true;
                b.ssm.w_c.requires_grad = true;
                b.ssm.w_dt.requires_grad = true;
                b.ssm.w_dt_in.requires_grad = true;
                b.ssm.b_dt.requires_grad = true;
                b.ssm.skip_d.requires_grad = true;
            }
            break;
        case Method::bitfit:
            apply_bitfit(m);
            break;
        case Method::sdt:
            for (auto& b : m.blocks) {
                b.ssm.a_log.requires_grad = true;
                b.ssm.w_b.requires_grad = true;
                b.ssm.w_c.requires_grad = true;
            }
            break;
        default:
            break;
    }
}

std::vector<std::string> apply_bitfit(Model& m) {
    std::vector<std::string> picked;
    for (auto& [name, t] : m.named_params()) {
        bool is_bias = name.ends_with("conv_b") || name.ends_with("b_dt");
        if (is_bias && t->numel() > 0) {
            t->requires_grad = true;
            picked.push_back(name);
        }
    }
    if (picked.empty())
        std::cerr << "warning: bitfit found no bias parameters; trainable mask is empty\n";
    return picked;
}

std::vector<std::pair<std::string, Tensor*>> trainable_params(Model& m, AdapterState& a) {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& [name, t] : m.named_params())
        if (t->requires_grad) out.emplace_back(name, t);
    for (auto& [name, t] : a.named_params())
        if (t->requires_grad) out.emplace_back(name, t);
    return out;
}

void apply_grad_masks(Model& m, AdapterState& a) {
    if (a.spec.method != Method::sdt) return;
    for (size_t l = 0; l < m.blocks.size(); ++l) {
        auto& s = m.blocks[l].ssm;
        Tensor* mats[3] = {&s.a_log, &s.w_b, &s.w_c};
        for (int j = 0; j < 3; ++j) {
            Tensor* t = mats[j];
            if (!t->grad) continue;
            const Tensor& mask = a.sdt_mask[l][j];
            for (int64_t i = 0; i < t->numel(); ++i) (*t->grad)[i] *= mask.at(i);
        }
    }
}

namespace {

ModelHooks build_hooks(Model& m, AdapterState& a, Tape* tape) {
    ModelHooks h;
    h.layers.resize(m.blocks.size());
    switch (a.spec.method) {
        case Method::state_offset_h:
            for (size_t l = 0; l < m.blocks.size(); ++l) h.layers[l].h_offset = &a.h_prime[l];
            break;
        case Method::state_offset_y:
            for (size_t l = 0; l < m.blocks.size(); ++l) h.layers[l].y_offset = &a.y_prime[l];
            break;
        case Method::state_offset_h_lowrank:
            for (size_t l = 0; l < m.blocks.size(); ++l) {
                h.layers[l].lowrank_u = &a.lowrank_u[l];
                h.layers[l].lowrank_vt = &a.lowrank_vt[l];
            }
            break;
        case Method::initial_state:
            for (size_t l = 0; l < m.blocks.size(); ++l) h.layers[l].h0 = &a.h0_prime[l];
            break;
        case Method::prompt_tuning:
            h.prompt = &a.prompt;
            break;
        case Method::prefix_tuning:
            for (size_t l = 0; l < m.blocks.size(); ++l) h.layers[l].prefix = &a.prefix[l];
            break;
        case Method::lora:
            for (size_t l = 0; l < m.blocks.size(); ++l) {
                auto& s = m.blocks[l].ssm;
                auto& tg = a.lora[l];
                auto wrap = [&](Tensor& w, LoraTarget& t) {
                    double sc = a.lora_alpha / static_cast<double>(t.u.shape[1]);
                    return add(twatch(tape, w),
                               scale(matmul(twatch(tape, t.u), twatch(tape, t.vt)), sc));
                };
                h.layers[l].ov.w_b = wrap(s.w_b, tg[0]);
                h.layers[l].ov.w_c = wrap(s.w_c, tg[1]);
                h.layers[l].ov.w_dt = wrap(s.w_dt, tg[2]);
                h.layers[l].ov.w_dt_in = wrap(s.w_dt_in, tg[3]);
            }
            break;
        case Method::additional_scan:
            for (size_t l = 0; l < m.blocks.size(); ++l) {
                auto& s = m.blocks[l].ssm;
                Tensor a_base = scale(exp(twatch(tape, s.a_log)), -1.0);
                Tensor a_new = scale(exp(twatch(tape, a.add_a_log[l])), -1.0);
                h.layers[l].ov.a = concat(a_base, a_new, 1);
                h.layers[l].ov.w_b = concat(twatch(tape, s.w_b), twatch(tape, a.add_wb[l]), 0);
                h.layers[l].ov.w_c = concat(twatch(tape, s.w_c), twatch(tape, a.add_wc[l]), 0);
            }
            break;
        default:
            break;
    }
    return h;
}

}  // namespace

Tensor adapted_forward(Model& m, AdapterState& a, const std::vector<int64_t>& tokens, Tape* tape) {
    ModelHooks h = build_hooks(m, a, tape);
    return model_forward(m, tokens, tape, &h);
}

Tensor apply_state_offset_h(const Tensor& y, const Tensor& c_seq, const Tensor& h_prime) {
    Tensor hp = h_prime;
    return add(y, matmul(c_seq, hp, false, true));
}

Tensor apply_state_offset_y(const Tensor& y, const Tensor& y_prime) {
    Tensor yp = y_prime;
    return add(y, broadcast_to(yp, y.shape));
}

ParamReport trainable_parameter_report(Model& m, AdapterState& a) {
    ParamReport r;
    r.total = m.total_params() + a.added_params();
    if (a.spec.method == Method::sdt) {
        for (auto& masks : a.sdt_mask)
            for (auto& mk : masks)
                for (int64_t i = 0; i < mk.numel(); ++i) r.trainable += mk.at(i) != 0.0 ? 1 : 0;
    } else {
        for (auto& [name, t] : trainable_params(m, a)) r.trainable += t->numel();
    }
    r.percent = 100.0 * static_cast<double>(r.trainable) / static_cast<double>(r.total);
    return r;
}

void select_sdt_mask(Model& m, AdapterState& a, const std::vector<WarmupExample>& warmup) {
    if (a.spec.method != Method::sdt) throw std::invalid_argument("select_sdt_mask: not an SDT adapter");
    if (warmup.empty()) throw std::invalid_argument("select_sdt_mask: warmup data required");
    auto [keep_c, keep_s] = *a.spec.sdt_keep;

    // accumulate |grad| over the warmup batch
    size_t L = m.blocks.size();
    std::vector<std::array<std::vector<double>, 3>> acc(L);
    for (size_t l = 0; l < L; ++l) {
        auto& s = m.blocks[l].ssm;
        acc[l][0].assign(s.a_log.numel(), 0.0);
        acc[l][1].assign(s.w_b.numel(), 0.0);
        acc[l][2].assign(s.w_c.numel(), 0.0);
    }
    for (const auto& ex : warmup) {
        m.zero_all_grads();
        Tape tape;
        Tensor logits = adapted_forward(m, a, ex.tokens, &tape);
        Tensor loss = cross_entropy_logits(logits, ex.targets, ex.mask);
        tape.backward(loss);
        tape.accumulate_leaf_grads();
        for (size_t l = 0; l < L; ++l) {
            auto& s = m.blocks[l].ssm;
            Tensor* mats[3] = {&s.a_log, &s.w_b, &s.w_c};
            for (int j = 0; j < 3; ++j)
                if (mats[j]->grad)
                    for (size_t i = 0; i < acc[l][j].size(); ++i)
                        acc[l][j][i] += std::fabs((*mats[j]->grad)[i]);
        }
    }
    m.zero_all_grads();

    auto top_indices = [](const std::vector<double>& score, int64_t k) {
        std::vector<int64_t> idx(score.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](int64_t x, int64_t y) {
            if (score[x] != score[y]) return score[x] > score[y];
            return x < y;  // tie-break by lowest index
        });
        idx.resize(static_cast<size_t>(std::min<int64_t>(k, static_cast<int64_t>(idx.size()))));
        return idx;
    };

    int64_t D = m.dims.d_inner(), H = m.dims.d_state;
    int64_t kc = std::clamp<int64_t>(std::llround(keep_c * static_cast<double>(D)), 0, D);
    int64_t ks = std::clamp<int64_t>(std::llround(keep_s * static_cast<double>(H)), 0, H);
    bool all_zero = true;
    for (size_t l = 0; l < L && all_zero; ++l)
        for (int j = 0; j < 3 && all_zero; ++j)
            for (double v : acc[l][j])
                if (v != 0.0) {
                    all_zero = false;
                    break;
                }
    if (all_zero)
        std::cerr << "warning: SDT warmup gradients are all zero; mask falls back to lowest indices\n";

    for (size_t l = 0; l < L; ++l) {
        for (int j = 0; j < 3; ++j) {
            // a_log is [D,H] (channel-major); w_b / w_c are [H,D]
            bool channel_major = j == 0;
            int64_t rows = channel_major ? D : H;
            int64_t cols = channel_major ? H : D;
            std::vector<double> chan_score(static_cast<size_t>(D), 0.0);
            std::vector<double> state_score(static_cast<size_t>(H), 0.0);
            const auto& g = acc[l][j];
            for (int64_t r0 = 0; r0 < rows; ++r0)
                for (int64_t c0 = 0; c0 < cols; ++c0) {
                    double v = g[r0 * cols + c0];
                    int64_t ch = channel_major ? r0 : c0;
                    int64_t st = channel_major ? c0 : r0;
                    chan_score[ch] += v;
                    state_score[st] += v;
                }
            auto ch_keep = top_indices(chan_score, kc);
            auto st_keep = top_indices(state_score, ks);
            Tensor& mask = a.sdt_mask[l][j];
            std::fill(mask.vals().begin(), mask.vals().end(), 0.0);
            for (int64_t ch : ch_keep)
                for (int64_t st : st_keep) {
                    int64_t r0 = channel_major ? ch : st;
                    int64_t c0 = channel_major ? st : ch;
                    mask.at(r0 * cols + c0) = 1.0;
                }
        }
    }
    a.sdt_selected = true;
}

}  // namespace ssmpeft
