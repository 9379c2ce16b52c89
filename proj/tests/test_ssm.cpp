#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "ssmpeft/rng.hpp"
#include "ssmpeft/ssm.hpp"

using namespace ssmpeft;

namespace {

Tensor randn(Rng& rng, Shape s, double sd = 1.0) {
    Tensor t = Tensor::zeros(std::move(s));
    for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.normal(0.0, sd);
    return t;
}

SsmLayerParams random_s6(Rng& rng, int64_t D, int64_t H, int64_t R, double sd = 0.4) {
    SsmLayerParams p;
    p.a_log = randn(rng, {D, H}, 0.5);
    p.w_b = randn(rng, {H, D}, sd);
    p.w_c = randn(rng, {H, D}, sd);
    p.w_dt = randn(rng, {D, R}, sd);
    p.w_dt_in = randn(rng, {R, D}, sd);
    p.b_dt = randn(rng, {D}, sd);
    p.skip_d = randn(rng, {D}, sd);
    return p;
}

// independent per-element re-implementation of the S6 recurrence, written as
// plain nested loops with no shared code with the scan kernel
std::vector<double> brute_force_s6(const SsmLayerParams& p, const Tensor& x,
                                   const std::vector<double>* h0 = nullptr) {
    int64_t T = x.shape[0], D = p.a_log.shape[0], H = p.a_log.shape[1], R = p.w_dt.shape[1];
    std::vector<double> h(static_cast<size_t>(D * H), 0.0);
    if (h0) h = *h0;
    std::vector<double> y(static_cast<size_t>(T * D), 0.0);
    for (int64_t t = 0; t < T; ++t) {
        // delta_t = softplus(W_dt (W_dt_in x_t) + b_dt); B_t = W_B x_t; C_t = W_C x_t
        std::vector<double> low(static_cast<size_t>(R), 0.0);
        for (int64_t r = 0; r < R; ++r)
            for (int64_t d = 0; d < D; ++d) low[r] += p.w_dt_in.at2(r, d) * x.at2(t, d);
        for (int64_t d = 0; d < D; ++d) {
            double pre = p.b_dt.at(d);
            for (int64_t r = 0; r < R; ++r) pre += p.w_dt.at2(d, r) * low[r];
            double delta = std::log1p(std::exp(-std::fabs(pre))) + std::max(pre, 0.0);
            for (int64_t n = 0; n < H; ++n) {
                double a = -std::exp(p.a_log.at2(d, n));
                double abar = std::exp(delta * a);
                double b = 0.0;
                for (int64_t j = 0; j < D; ++j) b += p.w_b.at2(n, j) * x.at2(t, j);
                h[d * H + n] = abar * h[d * H + n] + delta * b * x.at2(t, d);
            }
        }
        for (int64_t d = 0; d < D; ++d) {
            double acc = p.skip_d.at(d) * x.at2(t, d);
            for (int64_t n = 0; n < H; ++n) {
                double c = 0.0;
                for (int64_t j = 0; j < D; ++j) c += p.w_c.at2(n, j) * x.at2(t, j);
                acc += c * h[d * H + n];
            }
            y[t * D + d] = acc;
        }
    }
    return y;
}

}  // namespace

TEST_CASE("discretize: limits and range") {
    Tensor a = Tensor::full({1, 1}, -1.0);

    // delta -> 0+ gives Abar -> 1 and vanishing input contribution
    Discretized tiny = discretize(a, Tensor::full({1}, 1e-12), Tensor::full({1}, 3.0));
    CHECK(tiny.abar.at(0) == doctest::Approx(1.0));
    CHECK(tiny.contrib(0, 0, 5.0) == doctest::Approx(0.0));

    // A = -1, delta = ln 2 -> Abar = 0.5
    Discretized half = discretize(a, Tensor::full({1}, std::log(2.0)), Tensor::full({1}, 1.0));
    CHECK(half.abar.at(0) == doctest::Approx(0.5));

    CHECK_THROWS_AS(discretize(a, Tensor::full({1}, 0.0), Tensor::full({1}, 1.0)),
                    std::invalid_argument);

    // random A < 0, delta > 0: all factors in (0,1)
    Rng rng(5);
    int64_t checked = 0;
    for (int it = 0; it < 120; ++it) {
        int64_t D = rng.uniform_int(1, 4), H = rng.uniform_int(1, 8);
        Tensor al = randn(rng, {D, H});
        Tensor av = Tensor::zeros({D, H});
        for (int64_t i = 0; i < D * H; ++i) av.at(i) = -std::exp(al.at(i));
        Tensor delta = Tensor::zeros({D});
        for (int64_t i = 0; i < D; ++i) delta.at(i) = softplus_val(rng.normal()) + 1e-6;
        Discretized d = discretize(av, delta, randn(rng, {H}));
        for (int64_t i = 0; i < D * H; ++i) {
            CHECK(d.abar.at(i) > 0.0);
            CHECK(d.abar.at(i) < 1.0);
            ++checked;
        }
    }
    CHECK(checked >= 1000);
}

TEST_CASE("s6_scan equals the naive double-loop re-implementation") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(100 + seed);
        int64_t T = 6, D = rng.uniform_int(1, 4), H = rng.uniform_int(1, 6),
                R = rng.uniform_int(1, 3);
        SsmLayerParams p = random_s6(rng, D, H, R);
        Tensor x = randn(rng, {T, D});
        ScanTrace tr = s6_scan(p, x);
        std::vector<double> oracle = brute_force_s6(p, x);
        for (int64_t i = 0; i < T * D; ++i)
            CHECK(tr.y.at(i) == doctest::Approx(oracle[i]).epsilon(1e-12));
    }
}

TEST_CASE("s6_scan trivial cases") {
    Rng rng(42);
    int64_t T = 5, D = 3, H = 4, R = 2;
    SsmLayerParams p = random_s6(rng, D, H, R);
    Tensor x = randn(rng, {T, D});

    SUBCASE("W_B = 0 decouples the state; y = skip * x") {
        p.w_b = Tensor::zeros({H, D});
        ScanTrace tr = s6_scan(p, x);
        for (int64_t t = 0; t < T; ++t)
            for (int64_t d = 0; d < D; ++d) {
                CHECK(tr.y.at2(t, d) == doctest::Approx(p.skip_d.at(d) * x.at2(t, d)));
                for (int64_t n = 0; n < H; ++n) CHECK(tr.hidden(t + 1, d, n) == 0.0);
            }
    }

    SUBCASE("single step unrolls to y_1 = C_1 (delta_1 B_1 x_1) + skip") {
        Tensor x1 = slice(x, 0, 0, 1);
        ScanTrace tr = s6_scan(p, x1);
        std::vector<double> oracle = brute_force_s6(p, x1);
        for (int64_t d = 0; d < D; ++d) CHECK(tr.y.at2(0, d) == doctest::Approx(oracle[d]));
    }

    SUBCASE("shape mismatch raises a dimension error") {
        Tensor bad = Tensor::zeros({4, D + 1});
        CHECK_THROWS_AS(s6_scan(p, bad), std::invalid_argument);
    }
}

TEST_CASE("s4_scan closed forms") {
    SUBCASE("geometric ramp under constant input") {
        // Abar = 0.5, Bbar = delta * B = 1, C = 1, D = H = 1
        double delta = std::log(2.0);  // Abar = exp(-delta) with A = -1
        S4LayerParams p;
        p.a_log = Tensor::zeros({1, 1});  // A = -1
        p.b = Tensor::full({1}, 1.0 / delta);
        p.c = Tensor::full({1}, 1.0);
        p.delta_pre = Tensor::full({1}, inv_softplus(delta));
        p.skip_d = Tensor::zeros({1});
        int64_t T = 12;
        double xv = 0.7;
        Tensor x = Tensor::full({T, 1}, xv);
        ScanTrace tr = s4_scan(p, x);
        // h_t = Bbar x (1 - Abar^t) / (1 - Abar), y_t = C h_t
        for (int64_t t = 1; t <= T; ++t) {
            double closed = xv * (1.0 - std::pow(0.5, static_cast<double>(t))) / (1.0 - 0.5);
            CHECK(tr.y.at2(t - 1, 0) == doctest::Approx(closed).epsilon(1e-12));
        }
    }

    SUBCASE("impulse response decays as C Abar^{t-1} Bbar") {
        S4LayerParams p;
        p.a_log = Tensor::from({1, 1}, {std::log(0.8)});  // A = -0.8
        p.b = Tensor::full({1}, 2.0);
        p.c = Tensor::full({1}, 1.5);
        p.delta_pre = Tensor::full({1}, inv_softplus(0.9));
        p.skip_d = Tensor::zeros({1});
        int64_t T = 8;
        Tensor x = Tensor::zeros({T, 1});
        x.at2(0, 0) = 1.0;
        double abar = std::exp(0.9 * -0.8);
        double bbar = 0.9 * 2.0;
        ScanTrace tr = s4_scan(p, x);
        for (int64_t t = 0; t < T; ++t) {
            double closed = 1.5 * std::pow(abar, static_cast<double>(t)) * bbar;
            CHECK(tr.y.at2(t, 0) == doctest::Approx(closed).epsilon(1e-12));
        }
    }

    SUBCASE("s4 equals the constant-projection special case of the s6 kernel") {
        Rng rng(9);
        int64_t T = 7, D = 2, H = 3;
        S4LayerParams p;
        p.a_log = randn(rng, {D, H}, 0.5);
        p.b = randn(rng, {H});
        p.c = randn(rng, {H});
        p.delta_pre = randn(rng, {D});
        p.skip_d = randn(rng, {D});
        Tensor x = randn(rng, {T, D});
        ScanTrace s4 = s4_scan(p, x);

        // drive the shared kernel with explicitly constant per-step rows
        Tensor a = scale(exp(p.a_log), -1.0);
        Tensor delta = broadcast_to(softplus(p.delta_pre), {T, D});
        Tensor b_seq = broadcast_to(p.b, {T, H});
        Tensor c_seq = broadcast_to(p.c, {T, H});
        Tensor y = ssm_scan(x, delta, a, b_seq, c_seq, Tensor::zeros({D, H}));
        Tensor skipped = add(y, mul(broadcast_to(p.skip_d, {T, D}), x));
        for (int64_t i = 0; i < T * D; ++i)
            CHECK(s4.y.at(i) == doctest::Approx(skipped.at(i)).epsilon(1e-12));
    }
}

TEST_CASE("causality: perturbing x[t..] never changes y[..t-1]") {
    Rng rng(17);
    for (int it = 0; it < 10; ++it) {
        int64_t T = 10, D = 2, H = 3, R = 2;
        SsmLayerParams p = random_s6(rng, D, H, R);
        Tensor x = randn(rng, {T, D});
        ScanTrace base = s6_scan(p, x);
        int64_t cut = rng.uniform_int(1, T - 1);
        Tensor xp = x;
        xp.data = std::make_shared<std::vector<double>>(*x.data);
        for (int64_t t = cut; t < T; ++t)
            for (int64_t d = 0; d < D; ++d) xp.at2(t, d) += rng.normal();
        ScanTrace pert = s6_scan(p, xp);
        for (int64_t t = 0; t < cut; ++t)
            for (int64_t d = 0; d < D; ++d) CHECK(pert.y.at2(t, d) == base.y.at2(t, d));
    }
}

TEST_CASE("scan associativity: split state handoff is exact") {
    Rng rng(23);
    for (int it = 0; it < 10; ++it) {
        int64_t Ta = rng.uniform_int(1, 8), Tb = rng.uniform_int(1, 8);
        int64_t D = rng.uniform_int(1, 4), H = rng.uniform_int(1, 6);
        SsmLayerParams p = random_s6(rng, D, H, 2);
        Tensor xa = randn(rng, {Ta, D});
        Tensor xb = randn(rng, {Tb, D});
        ScanTrace joint = s6_scan(p, concat(xa, xb, 0));
        Tensor h_mid = s6_scan(p, xa).final_state();
        ScanTrace part = s6_scan(p, xb, &h_mid);
        for (int64_t t = 0; t < Tb; ++t)
            for (int64_t d = 0; d < D; ++d) {
                double a = joint.y.at2(Ta + t, d), b = part.y.at2(t, d);
                CHECK(std::fabs(a - b) <= 1e-12 * std::max(1.0, std::fabs(a)));
            }
    }
}

TEST_CASE("mamba block: degenerate configurations") {
    ModelDims dims;
    dims.d_model = 6;
    dims.n_layer = 1;
    dims.d_state = 4;
    dims.vocab = 11;
    dims.dt_rank = 1;
    Model m = build_model(dims, 3);
    Rng rng(31);
    Tensor u = randn(rng, {5, dims.d_model});

    SUBCASE("W_out = 0 leaves only the residual") {
        MambaBlockParams& blk = m.blocks[0];
        blk.w_out = Tensor::zeros(blk.w_out.shape);
        Tensor out = mamba_block_forward(blk, u);
        for (int64_t i = 0; i < u.numel(); ++i) CHECK(out.at(i) == u.at(i));
    }

    SUBCASE("all-zero weights pass the residual through") {
        MambaBlockParams& blk = m.blocks[0];
        for (Tensor* t : {&blk.w_in, &blk.conv_w, &blk.conv_b, &blk.w_out})
            *t = Tensor::zeros(t->shape);
        Tensor out = mamba_block_forward(blk, u);
        for (int64_t i = 0; i < u.numel(); ++i) CHECK(out.at(i) == u.at(i));
    }

    SUBCASE("two sequences processed jointly or separately give identical outputs") {
        Tensor u2 = randn(rng, {5, dims.d_model});
        Tensor o1 = mamba_block_forward(m.blocks[0], u);
        Tensor o2 = mamba_block_forward(m.blocks[0], u2);
        // independence across sequences, not across time: re-running each alone
        // must reproduce its rows bit-for-bit
        Tensor o1b = mamba_block_forward(m.blocks[0], u);
        Tensor o2b = mamba_block_forward(m.blocks[0], u2);
        for (int64_t i = 0; i < o1.numel(); ++i) CHECK(o1.at(i) == o1b.at(i));
        for (int64_t i = 0; i < o2.numel(); ++i) CHECK(o2.at(i) == o2b.at(i));
    }
}

TEST_CASE("model_forward basics") {
    ModelDims dims;
    dims.d_model = 6;
    dims.n_layer = 2;
    dims.d_state = 4;
    dims.vocab = 13;
    dims.dt_rank = 1;

    SUBCASE("zero-layer model reduces to normalized embedding lookup times head") {
        ModelDims d0 = dims;
        d0.n_layer = 0;
        Model m = build_model(d0, 1);
        std::vector<int64_t> toks = {3, 7, 1};
        Tensor logits = model_forward(m, toks);
        Tensor emb = embed_rows(m.embedding, toks);
        Tensor manual = matmul(rmsnorm(emb, m.norm_f), m.embedding, false, true);
        for (int64_t i = 0; i < logits.numel(); ++i)
            CHECK(logits.at(i) == doctest::Approx(manual.at(i)).epsilon(1e-14));
    }

    SUBCASE("single token, single layer matches hand-composed sub-ops") {
        ModelDims d1 = dims;
        d1.n_layer = 1;
        Model m = build_model(d1, 2);
        std::vector<int64_t> toks = {5};
        Tensor logits = model_forward(m, toks);
        Tensor x = embed_rows(m.embedding, toks);
        Tensor x1 = mamba_block_forward(m.blocks[0], x);
        Tensor manual = matmul(rmsnorm(x1, m.norm_f), m.embedding, false, true);
        for (int64_t i = 0; i < logits.numel(); ++i)
            CHECK(logits.at(i) == doctest::Approx(manual.at(i)).epsilon(1e-14));
    }

    SUBCASE("same tokens give identical logits; bad token is rejected") {
        Model m = build_model(dims, 3);
        std::vector<int64_t> toks = {1, 2, 3, 4};
        Tensor a = model_forward(m, toks);
        Tensor b = model_forward(m, toks);
        for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
        CHECK_THROWS_AS(model_forward(m, {dims.vocab}), std::out_of_range);
    }
}

TEST_CASE("model init: step sizes land in [1e-3, 1e-1] and A follows -(n+1)") {
    ModelDims dims;
    dims.d_model = 8;
    dims.n_layer = 1;
    dims.d_state = 4;
    dims.vocab = 11;
    Model m = build_model(dims, 7);
    auto& s = m.blocks[0].ssm;
    for (int64_t d = 0; d < s.channels(); ++d) {
        double dt = softplus_val(s.b_dt.at(d));
        CHECK(dt >= 1e-4);  // clamp floor
        CHECK(dt <= 1e-1 + 1e-9);
        for (int64_t n = 0; n < s.states(); ++n)
            CHECK(-std::exp(s.a_log.at2(d, n)) == doctest::Approx(-(double)(n + 1)));
    }
}
