#include "ssmpeft/ssm.hpp"

#include <cmath>

#include "ssmpeft/rng.hpp"

namespace ssmpeft {

Tensor ScanTrace::final_state() const {
    Tensor f = Tensor::zeros({d, h});
    for (int64_t i = 0; i < d * h; ++i) f.at(i) = h_seq[t * d * h + i];
    return f;
}

Discretized discretize(const Tensor& a, const Tensor& delta, const Tensor& b_t) {
    if (a.rank() != 2) throw std::invalid_argument("discretize: A must be [D,H]");
    int64_t D = a.shape[0], H = a.shape[1];
    if (delta.numel() != D)
        throw std::invalid_argument("discretize: delta " + shape_str(delta.shape) +
                                    " does not match D=" + std::to_string(D));
    if (b_t.numel() != H)
        throw std::invalid_argument("discretize: B " + shape_str(b_t.shape) +
                                    " does not match H=" + std::to_string(H));
    for (int64_t i = 0; i < D; ++i)
        if (!(delta.at(i) > 0.0))
            throw std::invalid_argument("discretize: nonpositive step size at channel " +
                                        std::to_string(i) + " (softplus missing?)");
    Discretized out;
    out.abar = Tensor::zeros({D, H});
    for (int64_t dd = 0; dd < D; ++dd)
        for (int64_t nn = 0; nn < H; ++nn)
            out.abar.at2(dd, nn) = std::exp(delta.at(dd) * a.at2(dd, nn));
    out.delta = delta;
    out.b = b_t;
    return out;
}

namespace {

ScanTrace run_scan(const Tensor& x_seq, const Tensor& delta, const Tensor& a, const Tensor& b_seq,
                   const Tensor& c_seq, const Tensor& skip, Tensor* h0, Tape* tape) {
    int64_t T = x_seq.shape[0], D = x_seq.shape[1], H = a.shape[1];
    Tensor h0t;
    if (h0)
        h0t = twatch(tape, *h0);
    else
        h0t = Tensor::zeros({D, H});
    ScanTrace tr;
    ScanBuffers bufs;
    Tensor y_core = ssm_scan(x_seq, delta, a, b_seq, c_seq, h0t, &bufs);
    tr.y = add(y_core, mul(broadcast_to(skip, {T, D}), x_seq));
    tr.c_seq = c_seq;
    tr.h_seq = std::move(bufs.h_seq);
    tr.abar_seq = std::move(bufs.abar);
    tr.delta_vals = delta.vals();
    tr.b_vals = b_seq.vals();
    tr.t = T;
    tr.d = D;
    tr.h = H;
    return tr;
}

}  // namespace

ScanTrace s6_scan(SsmLayerParams& p, const Tensor& x_seq, Tensor* h0, Tape* tape,
                  const SsmOverrides* ov) {
    if (x_seq.rank() != 2 || x_seq.shape[1] != p.channels())
        throw std::invalid_argument("s6_scan: input " + shape_str(x_seq.shape) +
                                    " does not match D=" + std::to_string(p.channels()));
    int64_t T = x_seq.shape[0], D = p.channels();
    Tensor a = (ov && ov->a) ? *ov->a : scale(exp(twatch(tape, p.a_log)), -1.0);
    Tensor w_b = (ov && ov->w_b) ? *ov->w_b : twatch(tape, p.w_b);
    Tensor w_c = (ov && ov->w_c) ? *ov->w_c : twatch(tape, p.w_c);
    Tensor w_dt = (ov && ov->w_dt) ? *ov->w_dt : twatch(tape, p.w_dt);
    Tensor w_dt_in = (ov && ov->w_dt_in) ? *ov->w_dt_in : twatch(tape, p.w_dt_in);

    Tensor dt_pre = add(matmul(matmul(x_seq, w_dt_in, false, true), w_dt, false, true),
                        broadcast_to(twatch(tape, p.b_dt), {T, D}));
    Tensor delta = softplus(dt_pre);
    Tensor b_seq = matmul(x_seq, w_b, false, true);  // [T, H]
    Tensor c_seq = matmul(x_seq, w_c, false, true);
    return run_scan(x_seq, delta, a, b_seq, c_seq, twatch(tape, p.skip_d), h0, tape);
}

ScanTrace s4_scan(S4LayerParams& p, const Tensor& x_seq, Tensor* h0, Tape* tape) {
    if (x_seq.rank() != 2 || x_seq.shape[1] != p.a_log.shape[0])
        throw std::invalid_argument("s4_scan: input " + shape_str(x_seq.shape) +
                                    " does not match D=" + std::to_string(p.a_log.shape[0]));
    int64_t T = x_seq.shape[0], H = p.a_log.shape[1];
    Tensor a = scale(exp(twatch(tape, p.a_log)), -1.0);
    Tensor delta = broadcast_to(softplus(twatch(tape, p.delta_pre)), {T, p.a_log.shape[0]});
    Tensor b_seq = broadcast_to(twatch(tape, p.b), {T, H});
    Tensor c_seq = broadcast_to(twatch(tape, p.c), {T, H});
    return run_scan(x_seq, delta, a, b_seq, c_seq, twatch(tape, p.skip_d), h0, tape);
}

Tensor mamba_block_forward(MambaBlockParams& blk, const Tensor& u_seq, Tape* tape,
                           const LayerHooks* hooks) {
    int64_t T = u_seq.shape[0], D = blk.d_inner();
    Tensor xn = rmsnorm(u_seq, twatch(tape, blk.norm_g));
    Tensor xz = matmul(xn, twatch(tape, blk.w_in), false, true);  // [T, 2D]
    Tensor gate = slice(xz, 1, 0, D);
    Tensor xbr = slice(xz, 1, D, D);
    Tensor xs = silu(conv1d_causal(xbr, twatch(tape, blk.conv_w), twatch(tape, blk.conv_b)));

    int64_t V = 0;
    Tensor scan_in = xs;
    if (hooks && hooks->prefix) {
        Tensor pv = twatch(tape, *hooks->prefix);
        V = pv.shape[0];
        scan_in = concat(pv, xs, 0);
    }

    Tensor* h0 = hooks ? hooks->h0 : nullptr;
    ScanTrace tr = s6_scan(blk.ssm, scan_in, h0, tape, hooks ? &hooks->ov : nullptr);
    Tensor y = tr.y;
    Tensor c_rows = tr.c_seq;
    if (V > 0) {
        y = slice(y, 0, V, T);
        c_rows = slice(c_rows, 0, V, T);
    }
    if (hooks && hooks->h_offset)
        y = add(y, matmul(c_rows, twatch(tape, *hooks->h_offset), false, true));
    if (hooks && hooks->lowrank_u) {
        Tensor hp = matmul(twatch(tape, *hooks->lowrank_u), twatch(tape, *hooks->lowrank_vt));
        y = add(y, matmul(c_rows, hp, false, true));
    }
    if (hooks && hooks->y_offset) y = add(y, broadcast_to(twatch(tape, *hooks->y_offset), {T, D}));

    Tensor out = matmul(mul(y, silu(gate)), twatch(tape, blk.w_out), false, true);
    return add(u_seq, out);
}

std::vector<std::pair<std::string, Tensor*>> Model::named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("embedding", &embedding);
    for (size_t i = 0; i < blocks.size(); ++i) {
        std::string p = "layers." + std::to_string(i) + ".";
        auto& b = blocks[i];
        out.emplace_back(p + "norm_g", &b.norm_g);
        out.emplace_back(p + "w_in", &b.w_in);
        out.emplace_back(p + "conv_w", &b.conv_w);
        out.emplace_back(p + "conv_b", &b.conv_b);
        out.emplace_back(p + "ssm.a_log", &b.ssm.a_log);
        out.emplace_back(p + "ssm.w_b", &b.ssm.w_b);
        out.emplace_back(p + "ssm.w_c", &b.ssm.w_c);
        out.emplace_back(p + "ssm.w_dt", &b.ssm.w_dt);
        out.emplace_back(p + "ssm.w_dt_in", &b.ssm.w_dt_in);
        out.emplace_back(p + "ssm.b_dt", &b.ssm.b_dt);
        out.emplace_back(p + "ssm.skip_d", &b.ssm.skip_d);
        out.emplace_back(p + "w_out", &b.w_out);
    }
    out.emplace_back("norm_f", &norm_f);
    if (head.data) out.emplace_back("head", &head);
    return out;
}

int64_t Model::total_params() {
    int64_t n = 0;
    for (auto& [name, t] : named_params()) n += t->numel();
    return n;
}

void Model::set_all_trainable(bool flag) {
    for (auto& [name, t] : named_params()) t->requires_grad = flag;
}

void Model::zero_all_grads() {
    for (auto& [name, t] : named_params()) t->zero_grad();
}

Tensor model_forward(Model& m, const std::vector<int64_t>& tokens, Tape* tape, ModelHooks* hooks) {
    int64_t T = static_cast<int64_t>(tokens.size());
    Tensor emb = twatch(tape, m.embedding);
    Tensor x = embed_rows(emb, tokens);
    int64_t V = 0;
    if (hooks && hooks->prompt) {
        Tensor pv = twatch(tape, *hooks->prompt);
        V = pv.shape[0];
        x = concat(pv, x, 0);
    }
    for (size_t i = 0; i < m.blocks.size(); ++i) {
        const LayerHooks* lh = nullptr;
        if (hooks && i < hooks->layers.size()) lh = &hooks->layers[i];
        x = mamba_block_forward(m.blocks[i], x, tape, lh);
    }
    Tensor xn = rmsnorm(x, twatch(tape, m.norm_f));
    if (V > 0) xn = slice(xn, 0, V, T);
    if (m.tied_head()) return matmul(xn, emb, false, true);
    return matmul(xn, twatch(tape, m.head));
}

double inv_softplus(double y) {
    // softplus^{-1}(y) = log(expm1(y)), stable for small y
    return std::log(std::expm1(y));
}

Model build_model(const ModelDims& dims, uint64_t seed) {
    if (dims.d_model <= 0 || dims.n_layer < 0 || dims.vocab <= 0 || dims.d_state <= 0)
        throw std::invalid_argument("build_model: invalid dimensions");
    Rng rng(seed);
    Model m;
    m.dims = dims;
    int64_t d = dims.d_model, D = dims.d_inner(), H = dims.d_state, R = dims.dt_rank,
            K = dims.conv_width, V = dims.vocab;
    if (R <= 0) R = (d + 15) / 16;

    auto normal_t = [&](Shape s, double sd) {
        Tensor t = Tensor::zeros(s);
        for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.normal(0.0, sd);
        return t;
    };
    auto uniform_t = [&](Shape s, double a) {
        Tensor t = Tensor::zeros(s);
        for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.uniform(-a, a);
        return t;
    };

    m.embedding = normal_t({V, d}, 0.02);
    m.norm_f = Tensor::full({d}, 1.0);
    for (int64_t l = 0; l < dims.n_layer; ++l) {
        MambaBlockParams b;
        b.norm_g = Tensor::full({d}, 1.0);
        b.w_in = uniform_t({2 * D, d}, 1.0 / std::sqrt(static_cast<double>(d)));
        b.conv_w = uniform_t({D, K}, 1.0 / std::sqrt(static_cast<double>(K)));
        b.conv_b = Tensor::zeros({D});
        b.w_out = uniform_t({d, D}, 1.0 / std::sqrt(static_cast<double>(D)));
        auto& s = b.ssm;
        // S4D-real pattern: A[d,n] = -(n+1)
        s.a_log = Tensor::zeros({D, H});
        for (int64_t dd = 0; dd < D; ++dd)
            for (int64_t nn = 0; nn < H; ++nn)
                s.a_log.at2(dd, nn) = std::log(static_cast<double>(nn + 1));
        double pin = 1.0 / std::sqrt(static_cast<double>(D));
        s.w_b = uniform_t({H, D}, pin);
        s.w_c = uniform_t({H, D}, pin);
        s.w_dt_in = uniform_t({R, D}, pin);
        s.w_dt = uniform_t({D, R}, 1.0 / std::sqrt(static_cast<double>(R)));
        // bias chosen so the initial step size lands in [1e-3, 1e-1]
        s.b_dt = Tensor::zeros({D});
        for (int64_t dd = 0; dd < D; ++dd) {
            double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
            s.b_dt.at(dd) = inv_softplus(std::max(dt, 1e-4));
        }
        s.skip_d = Tensor::full({D}, 1.0);
        m.blocks.push_back(std::move(b));
    }
    return m;
}

}  // namespace ssmpeft
