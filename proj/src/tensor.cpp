#include "ssmpeft/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace ssmpeft {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d < 0) throw std::invalid_argument("negative extent in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::add: return "add";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::matmul: return "matmul";
        case OpKind::exp: return "exp";
        case OpKind::softplus: return "softplus";
        case OpKind::silu: return "silu";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::sum: return "sum";
        case OpKind::slice: return "slice";
        case OpKind::concat: return "concat";
        case OpKind::broadcast: return "broadcast";
        case OpKind::conv1d: return "conv1d";
        case OpKind::rmsnorm: return "rmsnorm";
        case OpKind::embed: return "embed";
        case OpKind::cross_entropy: return "cross_entropy";
        case OpKind::ssm_scan: return "ssm_scan";
    }
    return "?";
}

double Tensor::scalar_value() const {
    if (numel() != 1) throw std::invalid_argument("scalar_value: tensor has shape " + shape_str(shape));
    return (*data)[0];
}

void Tensor::ensure_grad() {
    if (!grad) grad = std::make_shared<std::vector<double>>(data->size(), 0.0);
}

void Tensor::zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

Tensor Tensor::zeros(Shape s) { return full(std::move(s), 0.0); }

Tensor Tensor::full(Shape s, double v) {
    Tensor t;
    int64_t n = shape_numel(s);
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<double>>(static_cast<size_t>(n), v);
    return t;
}

Tensor Tensor::scalar(double v) { return full({1}, v); }

Tensor Tensor::from(Shape s, std::vector<double> v) {
    if (shape_numel(s) != static_cast<int64_t>(v.size()))
        throw std::invalid_argument("Tensor::from: " + shape_str(s) + " does not hold " +
                                    std::to_string(v.size()) + " values");
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<double>>(std::move(v));
    return t;
}

// ---- scalar kernels ---------------------------------------------------------

double softplus_val(double x) {
    // stable branch: max(x,0) + log1p(exp(-|x|))
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

double sigmoid_val(double x) {
    if (x >= 0.0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

double silu_val(double x) { return x * sigmoid_val(x); }

// ---- tape -------------------------------------------------------------------

int64_t Tape::emit(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int64_t>(nodes_.size()) - 1;
}

Tensor Tape::as_tensor(int64_t id) {
    Tensor t;
    Node& n = nodes_[static_cast<size_t>(id)];
    t.shape = n.shape;
    t.data = n.out;
    t.tape = this;
    t.node = id;
    return t;
}

Tensor Tape::watch(Tensor& param) {
    auto it = watched_.find(param.data.get());
    if (it != watched_.end()) return as_tensor(it->second);
    Node n;
    n.kind = OpKind::leaf;
    n.shape = param.shape;
    n.out = param.data;
    n.requires_grad = param.requires_grad;
    if (param.requires_grad) {
        param.ensure_grad();
        n.leaf_sink = param.grad;
    }
    int64_t id = emit(std::move(n));
    watched_[param.data.get()] = id;
    return as_tensor(id);
}

Tensor Tape::watch_const(const Tensor& value) {
    auto it = watched_.find(value.data.get());
    if (it != watched_.end()) return as_tensor(it->second);
    Node n;
    n.kind = OpKind::leaf;
    n.shape = value.shape;
    n.out = value.data;
    n.requires_grad = false;
    int64_t id = emit(std::move(n));
    watched_[value.data.get()] = id;
    return as_tensor(id);
}

std::span<const double> Tape::grad_of(const Tensor& t) const {
    if (t.tape != this || t.node < 0) throw std::invalid_argument("grad_of: tensor is not on this tape");
    const Node& n = nodes_[static_cast<size_t>(t.node)];
    return {n.grad.data(), n.grad.size()};
}

void Tape::accumulate_leaf_grads(double s) {
    for (auto& n : nodes_) {
        if (n.kind != OpKind::leaf || !n.leaf_sink || n.grad.empty()) continue;
        auto& sink = *n.leaf_sink;
        for (size_t i = 0; i < sink.size(); ++i) sink[i] += s * n.grad[i];
    }
}

namespace {

void ensure_grad_buf(Tape::Node& n) {
    if (n.grad.empty()) n.grad.assign(n.out->size(), 0.0);
}

}  // namespace

void Tape::backward(const Tensor& scalar_output) {
    if (scalar_output.tape != this || scalar_output.node < 0)
        throw std::invalid_argument("backward: output is not on this tape");
    if (scalar_output.numel() != 1)
        throw std::invalid_argument("backward: output must be scalar, got shape " +
                                    shape_str(scalar_output.shape));
    if (ran_backward_) throw std::invalid_argument("backward: tape already differentiated");
    ran_backward_ = true;
    visit_count_ = 0;
    nodes_[static_cast<size_t>(scalar_output.node)].grad.assign(1, 1.0);
    for (int64_t id = size() - 1; id >= 0; --id) {
        ++visit_count_;
        backward_node(id);
    }
}

void Tape::backward_node(int64_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty() || n.kind == OpKind::leaf) return;
    const std::vector<double>& g = n.grad;
    auto in = [&](size_t k) -> Node& { return nodes_[static_cast<size_t>(n.inputs[k])]; };
    auto need = [&](size_t k) { return in(k).requires_grad; };
    auto gbuf = [&](size_t k) -> std::vector<double>& {
        ensure_grad_buf(in(k));
        return in(k).grad;
    };

    switch (n.kind) {
        case OpKind::add: {
            for (size_t k = 0; k < 2; ++k) {
                if (!need(k)) continue;
                auto& gi = gbuf(k);
                for (size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
            }
            break;
        }
        case OpKind::mul: {
            const auto& a = *in(0).out;
            const auto& b = *in(1).out;
            if (need(0)) {
                auto& ga = gbuf(0);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
            }
            if (need(1)) {
                auto& gb = gbuf(1);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
            }
            break;
        }
        case OpKind::scale: {
            if (need(0)) {
                auto& ga = gbuf(0);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.c0;
            }
            break;
        }
        case OpKind::matmul: {
            // effective A:[m,k], B:[k,n]; i0=m, i1=k, i2=n; f0/f1 = stored transposed
            int64_t m = n.i0, k = n.i1, nn = n.i2;
            const auto& A = *in(0).out;
            const auto& B = *in(1).out;
            auto eff_a = [&](int64_t i, int64_t kk) { return n.f0 ? A[kk * m + i] : A[i * k + kk]; };
            auto eff_b = [&](int64_t kk, int64_t j) { return n.f1 ? B[j * k + kk] : B[kk * nn + j]; };
            if (need(0)) {
                auto& ga = gbuf(0);
                // dA_eff[i,kk] = sum_j G[i,j] * B_eff[kk,j]
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t kk = 0; kk < k; ++kk) {
                        double s = 0.0;
                        for (int64_t j = 0; j < nn; ++j) s += g[i * nn + j] * eff_b(kk, j);
                        ga[n.f0 ? kk * m + i : i * k + kk] += s;
                    }
            }
            if (need(1)) {
                auto& gb = gbuf(1);
                // dB_eff[kk,j] = sum_i A_eff[i,kk] * G[i,j]
                for (int64_t kk = 0; kk < k; ++kk)
                    for (int64_t i = 0; i < m; ++i) {
                        double a = eff_a(i, kk);
                        if (a == 0.0) continue;
                        for (int64_t j = 0; j < nn; ++j) {
                            double inc = a * g[i * nn + j];
                            gb[n.f1 ? j * k + kk : kk * nn + j] += inc;
                        }
                    }
            }
            break;
        }
        case OpKind::exp: {
            if (need(0)) {
                auto& ga = gbuf(0);
                const auto& y = *n.out;
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
            }
            break;
        }
        case OpKind::softplus: {
            if (need(0)) {
                auto& ga = gbuf(0);
                const auto& x = *in(0).out;
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sigmoid_val(x[i]);
            }
            break;
        }
        case OpKind::silu: {
            if (need(0)) {
                auto& ga = gbuf(0);
                const auto& x = *in(0).out;
                for (size_t i = 0; i < g.size(); ++i) {
                    double s = sigmoid_val(x[i]);
                    ga[i] += g[i] * (s * (1.0 + x[i] * (1.0 - s)));
                }
            }
            break;
        }
        case OpKind::sigmoid: {
            if (need(0)) {
                auto& ga = gbuf(0);
                const auto& y = *n.out;
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
            }
            break;
        }
        case OpKind::sum: {
            if (need(0)) {
                auto& ga = gbuf(0);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
            }
            break;
        }
        case OpKind::slice: {
            if (need(0)) {
                auto& ga = gbuf(0);
                int64_t outer = n.i0, mid_in = n.i1, inner = n.i2;
                int64_t start = static_cast<int64_t>(n.c0);
                int64_t mid_out = static_cast<int64_t>(n.out->size()) / (outer * inner);
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t m2 = 0; m2 < mid_out; ++m2)
                        for (int64_t i = 0; i < inner; ++i)
                            ga[(o * mid_in + start + m2) * inner + i] +=
                                g[(o * mid_out + m2) * inner + i];
            }
            break;
        }
        case OpKind::concat: {
            int64_t outer = n.i0, inner = n.i2;
            int64_t mid_a = n.i1;
            int64_t mid = static_cast<int64_t>(n.out->size()) / (outer * inner);
            int64_t mid_b = mid - mid_a;
            if (need(0)) {
                auto& ga = gbuf(0);
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t m2 = 0; m2 < mid_a; ++m2)
                        for (int64_t i = 0; i < inner; ++i)
                            ga[(o * mid_a + m2) * inner + i] += g[(o * mid + m2) * inner + i];
            }
            if (need(1)) {
                auto& gb = gbuf(1);
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t m2 = 0; m2 < mid_b; ++m2)
                        for (int64_t i = 0; i < inner; ++i)
                            gb[(o * mid_b + m2) * inner + i] += g[(o * mid + mid_a + m2) * inner + i];
            }
            break;
        }
        case OpKind::broadcast: {
            if (need(0)) {
                auto& ga = gbuf(0);
                size_t block = ga.size();
                size_t reps = g.size() / block;
                for (size_t r = 0; r < reps; ++r)
                    for (size_t i = 0; i < block; ++i) ga[i] += g[r * block + i];
            }
            break;
        }
        case OpKind::conv1d: {
            const auto& x = *in(0).out;
            const auto& w = *in(1).out;
            int64_t T = n.i0, D = n.i1, K = n.i2;
            if (need(0)) {
                auto& gx = gbuf(0);
                for (int64_t t = 0; t < T; ++t)
                    for (int64_t j = 0; j < K; ++j) {
                        int64_t u = t - (K - 1) + j;
                        if (u < 0) continue;
                        for (int64_t d = 0; d < D; ++d) gx[u * D + d] += w[d * K + j] * g[t * D + d];
                    }
            }
            if (need(1)) {
                auto& gw = gbuf(1);
                for (int64_t t = 0; t < T; ++t)
                    for (int64_t j = 0; j < K; ++j) {
                        int64_t u = t - (K - 1) + j;
                        if (u < 0) continue;
                        for (int64_t d = 0; d < D; ++d) gw[d * K + j] += x[u * D + d] * g[t * D + d];
                    }
            }
            if (n.inputs.size() > 2 && need(2)) {
                auto& gb = gbuf(2);
                for (int64_t t = 0; t < T; ++t)
                    for (int64_t d = 0; d < D; ++d) gb[d] += g[t * D + d];
            }
            break;
        }
        case OpKind::rmsnorm: {
            const auto& x = *in(0).out;
            const auto& gm = *in(1).out;
            int64_t T = n.i0, D = n.i1;
            const auto& inv = n.saved;  // per-row 1/rms
            if (need(0)) {
                auto& gx = gbuf(0);
                for (int64_t t = 0; t < T; ++t) {
                    double dot = 0.0;
                    for (int64_t i = 0; i < D; ++i) dot += g[t * D + i] * gm[i] * x[t * D + i];
                    double c = inv[t] * inv[t] * inv[t] * dot / static_cast<double>(D);
                    for (int64_t i = 0; i < D; ++i)
                        gx[t * D + i] += g[t * D + i] * gm[i] * inv[t] - c * x[t * D + i];
                }
            }
            if (need(1)) {
                auto& gg = gbuf(1);
                for (int64_t t = 0; t < T; ++t)
                    for (int64_t i = 0; i < D; ++i) gg[i] += g[t * D + i] * x[t * D + i] * inv[t];
            }
            break;
        }
        case OpKind::embed: {
            if (need(0)) {
                auto& gt = gbuf(0);
                int64_t D = n.i1;
                for (size_t t = 0; t < n.saved_idx.size(); ++t) {
                    int64_t row = n.saved_idx[t];
                    for (int64_t i = 0; i < D; ++i)
                        gt[row * D + i] += g[static_cast<int64_t>(t) * D + i];
                }
            }
            break;
        }
        case OpKind::cross_entropy: {
            if (need(0)) {
                auto& gl = gbuf(0);
                int64_t T = n.i0, V = n.i1;
                double nm = n.c0;  // number of masked positions
                const auto& probs = n.saved;
                for (int64_t t = 0; t < T; ++t) {
                    if (!n.saved_idx[t + T]) continue;  // mask stored after targets
                    int64_t y = n.saved_idx[t];
                    for (int64_t v = 0; v < V; ++v)
                        gl[t * V + v] += g[0] * (probs[t * V + v] - (v == y ? 1.0 : 0.0)) / nm;
                }
            }
            break;
        }
        case OpKind::ssm_scan: {
            // inputs: x [T,D], delta [T,D], A [D,H], B [T,H], C [T,H], h0 [D,H]
            int64_t T = n.i0, D = n.i1, H = n.i2;
            const auto& x = *in(0).out;
            const auto& delta = *in(1).out;
            const auto& A = *in(2).out;
            const auto& B = *in(3).out;
            const auto& C = *in(4).out;
            const double* hseq = n.saved.data();               // (T+1) * D*H, h0 first
            const double* abar = n.saved.data() + (T + 1) * D * H;
            std::vector<double> gh(static_cast<size_t>(D * H), 0.0);
            std::vector<double>* gx = need(0) ? &gbuf(0) : nullptr;
            std::vector<double>* gdelta = need(1) ? &gbuf(1) : nullptr;
            std::vector<double>* gA = need(2) ? &gbuf(2) : nullptr;
            std::vector<double>* gB = need(3) ? &gbuf(3) : nullptr;
            std::vector<double>* gC = need(4) ? &gbuf(4) : nullptr;
            std::vector<double>* gh0 = need(5) ? &gbuf(5) : nullptr;
            for (int64_t t = T - 1; t >= 0; --t) {
                const double* ht = hseq + (t + 1) * D * H;   // state after step t
                const double* hprev = hseq + t * D * H;
                const double* ab = abar + t * D * H;
                for (int64_t d = 0; d < D; ++d) {
                    double gy = g[t * D + d];
                    double u = delta[t * D + d] * x[t * D + d];
                    double gu = 0.0;
                    double gdel = 0.0;
                    for (int64_t nn = 0; nn < H; ++nn) {
                        int64_t i = d * H + nn;
                        double ghe = gh[i] + C[t * H + nn] * gy;
                        if (gC) (*gC)[t * H + nn] += gy * ht[i];
                        if (gB) (*gB)[t * H + nn] += ghe * u;
                        gu += ghe * B[t * H + nn];
                        double dab = ghe * hprev[i];  // d/d(abar)
                        gdel += dab * ab[i] * A[i];
                        if (gA) (*gA)[i] += dab * ab[i] * delta[t * D + d];
                        gh[i] = ghe * ab[i];
                    }
                    if (gdelta) (*gdelta)[t * D + d] += gdel + gu * x[t * D + d];
                    if (gx) (*gx)[t * D + d] += gu * delta[t * D + d];
                }
            }
            if (gh0)
                for (int64_t i = 0; i < D * H; ++i) (*gh0)[i] += gh[i];
            break;
        }
        case OpKind::leaf:
            break;
    }
}

// ---- op builders ------------------------------------------------------------

namespace {

struct OpCtx {
    Tape* tape = nullptr;
    std::vector<int64_t> ids;
    bool rg = false;
};

OpCtx ctx_of(std::initializer_list<const Tensor*> ins, const char* op) {
    OpCtx c;
    for (const Tensor* t : ins) {
        if (t->tape) {
            if (c.tape && c.tape != t->tape)
                throw std::invalid_argument(std::string(op) + ": inputs live on different tapes");
            c.tape = t->tape;
        }
    }
    if (!c.tape) return c;
    for (const Tensor* t : ins) {
        Tensor v = t->tape ? *t : c.tape->watch_const(*t);
        c.ids.push_back(v.node);
        c.rg = c.rg || c.tape->node(v.node).requires_grad;
    }
    return c;
}

Tensor finish(OpCtx& c, OpKind kind, Shape shape, std::shared_ptr<std::vector<double>> out,
              const std::function<void(Tape::Node&)>& fill = nullptr) {
    if (!c.tape) {
        Tensor t;
        t.shape = std::move(shape);
        t.data = std::move(out);
        return t;
    }
    Tape::Node n;
    n.kind = kind;
    n.inputs = c.ids;
    n.shape = std::move(shape);
    n.out = std::move(out);
    n.requires_grad = c.rg;
    if (fill) fill(n);
    int64_t id = c.tape->emit(std::move(n));
    return c.tape->as_tensor(id);
}

std::shared_ptr<std::vector<double>> alloc(int64_t n, double v = 0.0) {
    return std::make_shared<std::vector<double>>(static_cast<size_t>(n), v);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto c = ctx_of({&a, &b}, "add");
    auto out = alloc(a.numel());
    for (int64_t i = 0; i < a.numel(); ++i) (*out)[i] = a.at(i) + b.at(i);
    return finish(c, OpKind::add, a.shape, out);
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    auto c = ctx_of({&a, &b}, "mul");
    auto out = alloc(a.numel());
    for (int64_t i = 0; i < a.numel(); ++i) (*out)[i] = a.at(i) * b.at(i);
    return finish(c, OpKind::mul, a.shape, out);
}

Tensor scale(const Tensor& a, double s) {
    auto c = ctx_of({&a}, "scale");
    auto out = alloc(a.numel());
    for (int64_t i = 0; i < a.numel(); ++i) (*out)[i] = a.at(i) * s;
    return finish(c, OpKind::scale, a.shape, out, [&](Tape::Node& n) { n.c0 = s; });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    if ((a.rank() == 1 && trans_a) || (b.rank() == 1 && trans_b))
        throw std::invalid_argument("matmul: cannot transpose rank-1 operand");
    int64_t m, k, k2, nn;
    if (a.rank() == 2) {
        m = trans_a ? a.shape[1] : a.shape[0];
        k = trans_a ? a.shape[0] : a.shape[1];
    } else if (a.rank() == 1) {
        m = 1;
        k = a.shape[0];
    } else {
        throw std::invalid_argument("matmul: lhs rank must be 1 or 2, got " + shape_str(a.shape));
    }
    if (b.rank() == 2) {
        k2 = trans_b ? b.shape[1] : b.shape[0];
        nn = trans_b ? b.shape[0] : b.shape[1];
    } else if (b.rank() == 1) {
        k2 = b.shape[0];
        nn = 1;
    } else {
        throw std::invalid_argument("matmul: rhs rank must be 1 or 2, got " + shape_str(b.shape));
    }
    if (k != k2)
        throw std::invalid_argument("matmul: inner dims differ, " + shape_str(a.shape) +
                                    (trans_a ? "^T" : "") + " x " + shape_str(b.shape) +
                                    (trans_b ? "^T" : ""));
    auto c = ctx_of({&a, &b}, "matmul");
    auto out = alloc(m * nn);
    const auto& A = a.vals();
    const auto& B = b.vals();
    auto& C = *out;
    if (!trans_a && !trans_b) {
        for (int64_t i = 0; i < m; ++i)
            for (int64_t kk = 0; kk < k; ++kk) {
                double av = A[i * k + kk];
                if (av == 0.0) continue;
                const double* brow = B.data() + kk * nn;
                double* crow = C.data() + i * nn;
                for (int64_t j = 0; j < nn; ++j) crow[j] += av * brow[j];
            }
    } else if (!trans_a && trans_b) {
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < nn; ++j) {
                const double* arow = A.data() + i * k;
                const double* brow = B.data() + j * k;
                double s = 0.0;
                for (int64_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
                C[i * nn + j] = s;
            }
    } else if (trans_a && !trans_b) {
        for (int64_t kk = 0; kk < k; ++kk)
            for (int64_t i = 0; i < m; ++i) {
                double av = A[kk * m + i];
                if (av == 0.0) continue;
                const double* brow = B.data() + kk * nn;
                double* crow = C.data() + i * nn;
                for (int64_t j = 0; j < nn; ++j) crow[j] += av * brow[j];
            }
    } else {
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < nn; ++j) {
                double s = 0.0;
                for (int64_t kk = 0; kk < k; ++kk) s += A[kk * m + i] * B[j * k + kk];
                C[i * nn + j] = s;
            }
    }
    Shape oshape;
    if (a.rank() == 2 && b.rank() == 2)
        oshape = {m, nn};
    else if (a.rank() == 2)
        oshape = {m};
    else if (b.rank() == 2)
        oshape = {nn};
    else
        oshape = {1};
    return finish(c, OpKind::matmul, oshape, out, [&](Tape::Node& n) {
        n.i0 = m;
        n.i1 = k;
        n.i2 = nn;
        n.f0 = trans_a;
        n.f1 = trans_b;
    });
}

namespace {

template <typename F>
Tensor unary_op(const Tensor& a, OpKind kind, const char* name, F f) {
    auto c = ctx_of({&a}, name);
    auto out = alloc(a.numel());
    for (int64_t i = 0; i < a.numel(); ++i) (*out)[i] = f(a.at(i));
    return finish(c, kind, a.shape, out);
}

}  // namespace

Tensor exp(const Tensor& a) {
    return unary_op(a, OpKind::exp, "exp", [](double x) { return std::exp(x); });
}
Tensor softplus(const Tensor& a) { return unary_op(a, OpKind::softplus, "softplus", softplus_val); }
Tensor silu(const Tensor& a) { return unary_op(a, OpKind::silu, "silu", silu_val); }
Tensor sigmoid(const Tensor& a) { return unary_op(a, OpKind::sigmoid, "sigmoid", sigmoid_val); }

Tensor sum(const Tensor& a) {
    auto c = ctx_of({&a}, "sum");
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a.at(i);
    auto out = alloc(1, s);
    return finish(c, OpKind::sum, {1}, out);
}

Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t len) {
    if (axis < 0 || axis >= static_cast<int64_t>(a.rank()))
        throw std::invalid_argument("slice: axis " + std::to_string(axis) + " out of range for " +
                                    shape_str(a.shape));
    if (start < 0 || len < 0 || start + len > a.shape[axis])
        throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") exceeds " + shape_str(a.shape));
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= a.shape[i];
    for (size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape[i];
    int64_t mid_in = a.shape[axis];
    Shape oshape = a.shape;
    oshape[axis] = len;
    auto c = ctx_of({&a}, "slice");
    auto out = alloc(outer * len * inner);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t m2 = 0; m2 < len; ++m2)
            for (int64_t i = 0; i < inner; ++i)
                (*out)[(o * len + m2) * inner + i] = a.at((o * mid_in + start + m2) * inner + i);
    return finish(c, OpKind::slice, oshape, out, [&](Tape::Node& n) {
        n.i0 = outer;
        n.i1 = mid_in;
        n.i2 = inner;
        n.c0 = static_cast<double>(start);
    });
}

Tensor concat(const Tensor& a, const Tensor& b, int64_t axis) {
    if (a.rank() != b.rank())
        throw std::invalid_argument("concat: rank mismatch " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
    for (size_t i = 0; i < a.rank(); ++i)
        if (static_cast<int64_t>(i) != axis && a.shape[i] != b.shape[i])
            throw std::invalid_argument("concat: shapes " + shape_str(a.shape) + " and " +
                                        shape_str(b.shape) + " differ off axis " +
                                        std::to_string(axis));
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= a.shape[i];
    for (size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape[i];
    int64_t mid_a = a.shape[axis], mid_b = b.shape[axis];
    Shape oshape = a.shape;
    oshape[axis] = mid_a + mid_b;
    auto c = ctx_of({&a, &b}, "concat");
    auto out = alloc(outer * (mid_a + mid_b) * inner);
    int64_t mid = mid_a + mid_b;
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t m2 = 0; m2 < mid_a; ++m2)
            for (int64_t i = 0; i < inner; ++i)
                (*out)[(o * mid + m2) * inner + i] = a.at((o * mid_a + m2) * inner + i);
        for (int64_t m2 = 0; m2 < mid_b; ++m2)
            for (int64_t i = 0; i < inner; ++i)
                (*out)[(o * mid + mid_a + m2) * inner + i] = b.at((o * mid_b + m2) * inner + i);
    }
    return finish(c, OpKind::concat, oshape, out, [&](Tape::Node& n) {
        n.i0 = outer;
        n.i1 = mid_a;
        n.i2 = inner;
    });
}

Tensor broadcast_to(const Tensor& a, const Shape& target) {
    if (a.rank() > target.size())
        throw std::invalid_argument("broadcast: rank of " + shape_str(a.shape) +
                                    " exceeds target " + shape_str(target));
    size_t off = target.size() - a.rank();
    for (size_t i = 0; i < a.rank(); ++i)
        if (a.shape[i] != target[off + i])
            throw std::invalid_argument("broadcast: " + shape_str(a.shape) +
                                        " is not a trailing suffix of " + shape_str(target));
    auto c = ctx_of({&a}, "broadcast");
    int64_t block = a.numel();
    int64_t total = shape_numel(target);
    auto out = alloc(total);
    for (int64_t r = 0; r < total / block; ++r)
        for (int64_t i = 0; i < block; ++i) (*out)[r * block + i] = a.at(i);
    return finish(c, OpKind::broadcast, target, out);
}

Tensor conv1d_causal(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || x.shape[1] != w.shape[0])
        throw std::invalid_argument("conv1d: x " + shape_str(x.shape) + " incompatible with kernel " +
                                    shape_str(w.shape));
    if (b.numel() != x.shape[1])
        throw std::invalid_argument("conv1d: bias " + shape_str(b.shape) + " does not match channels");
    int64_t T = x.shape[0], D = x.shape[1], K = w.shape[1];
    auto c = ctx_of({&x, &w, &b}, "conv1d");
    auto out = alloc(T * D);
    for (int64_t t = 0; t < T; ++t)
        for (int64_t d = 0; d < D; ++d) {
            double s = b.at(d);
            for (int64_t j = 0; j < K; ++j) {
                int64_t u = t - (K - 1) + j;
                if (u >= 0) s += w.at2(d, j) * x.at2(u, d);
            }
            (*out)[t * D + d] = s;
        }
    return finish(c, OpKind::conv1d, {T, D}, out, [&](Tape::Node& n) {
        n.i0 = T;
        n.i1 = D;
        n.i2 = K;
    });
}

Tensor rmsnorm(const Tensor& x, const Tensor& g) {
    if (x.rank() != 2 || g.numel() != x.shape[1])
        throw std::invalid_argument("rmsnorm: x " + shape_str(x.shape) + " vs gain " +
                                    shape_str(g.shape));
    constexpr double eps = 1e-5;
    int64_t T = x.shape[0], D = x.shape[1];
    auto c = ctx_of({&x, &g}, "rmsnorm");
    auto out = alloc(T * D);
    std::vector<double> inv(static_cast<size_t>(T));
    for (int64_t t = 0; t < T; ++t) {
        double ms = 0.0;
        for (int64_t i = 0; i < D; ++i) ms += x.at2(t, i) * x.at2(t, i);
        inv[t] = 1.0 / std::sqrt(ms / static_cast<double>(D) + eps);
        for (int64_t i = 0; i < D; ++i) (*out)[t * D + i] = x.at2(t, i) * inv[t] * g.at(i);
    }
    return finish(c, OpKind::rmsnorm, {T, D}, out, [&](Tape::Node& n) {
        n.i0 = T;
        n.i1 = D;
        n.saved = std::move(inv);
    });
}

Tensor embed_rows(const Tensor& table, const std::vector<int64_t>& ids) {
    if (table.rank() != 2) throw std::invalid_argument("embed: table must be rank 2");
    int64_t V = table.shape[0], D = table.shape[1];
    for (int64_t id : ids)
        if (id < 0 || id >= V)
            throw std::out_of_range("embed: token id " + std::to_string(id) +
                                    " outside vocabulary of " + std::to_string(V));
    auto c = ctx_of({&table}, "embed");
    int64_t T = static_cast<int64_t>(ids.size());
    auto out = alloc(T * D);
    for (int64_t t = 0; t < T; ++t)
        for (int64_t i = 0; i < D; ++i) (*out)[t * D + i] = table.at2(ids[t], i);
    return finish(c, OpKind::embed, {T, D}, out, [&](Tape::Node& n) {
        n.i0 = T;
        n.i1 = D;
        n.saved_idx = ids;
    });
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int64_t>& targets,
                            const std::vector<uint8_t>& mask) {
    if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be rank 2");
    int64_t T = logits.shape[0], V = logits.shape[1];
    if (static_cast<int64_t>(targets.size()) != T || static_cast<int64_t>(mask.size()) != T)
        throw std::invalid_argument("cross_entropy: targets/mask length must equal T");
    int64_t nm = 0;
    for (auto m : mask) nm += m ? 1 : 0;
    if (nm == 0) throw std::invalid_argument("cross_entropy: empty mask");
    auto c = ctx_of({&logits}, "cross_entropy");
    std::vector<double> probs(static_cast<size_t>(T * V), 0.0);
    double loss = 0.0;
    for (int64_t t = 0; t < T; ++t) {
        if (!mask[t]) continue;
        if (targets[t] < 0 || targets[t] >= V)
            throw std::out_of_range("cross_entropy: target " + std::to_string(targets[t]) +
                                    " outside vocabulary");
        double mx = logits.at2(t, 0);
        for (int64_t v = 1; v < V; ++v) mx = std::max(mx, logits.at2(t, v));
        double z = 0.0;
        for (int64_t v = 0; v < V; ++v) z += std::exp(logits.at2(t, v) - mx);
        double lse = mx + std::log(z);
        loss += lse - logits.at2(t, targets[t]);
        for (int64_t v = 0; v < V; ++v) probs[t * V + v] = std::exp(logits.at2(t, v) - mx) / z;
    }
    loss /= static_cast<double>(nm);
    auto out = alloc(1, loss);
    return finish(c, OpKind::cross_entropy, {1}, out, [&](Tape::Node& n) {
        n.i0 = T;
        n.i1 = V;
        n.c0 = static_cast<double>(nm);
        n.saved = std::move(probs);
        n.saved_idx.resize(static_cast<size_t>(2 * T));
        for (int64_t t = 0; t < T; ++t) {
            n.saved_idx[t] = mask[t] ? targets[t] : 0;
            n.saved_idx[T + t] = mask[t] ? 1 : 0;
        }
    });
}

Tensor ssm_scan(const Tensor& x, const Tensor& delta, const Tensor& a, const Tensor& b_seq,
                const Tensor& c_seq, const Tensor& h0, ScanBuffers* trace) {
    if (x.rank() != 2 || delta.shape != x.shape)
        throw std::invalid_argument("ssm_scan: x " + shape_str(x.shape) + " vs delta " +
                                    shape_str(delta.shape));
    int64_t T = x.shape[0], D = x.shape[1];
    if (a.rank() != 2 || a.shape[0] != D)
        throw std::invalid_argument("ssm_scan: A " + shape_str(a.shape) + " does not match D=" +
                                    std::to_string(D));
    int64_t H = a.shape[1];
    if (b_seq.shape != Shape{T, H} || c_seq.shape != Shape{T, H})
        throw std::invalid_argument("ssm_scan: B " + shape_str(b_seq.shape) + " / C " +
                                    shape_str(c_seq.shape) + " must be [T,H]");
    if (h0.shape != Shape{D, H})
        throw std::invalid_argument("ssm_scan: h0 " + shape_str(h0.shape) + " must be [D,H]");
    for (int64_t i = 0; i < delta.numel(); ++i)
        if (!(delta.at(i) > 0.0))
            throw std::invalid_argument("ssm_scan: nonpositive step size at index " +
                                        std::to_string(i) + " (softplus missing?)");
    auto c = ctx_of({&x, &delta, &a, &b_seq, &c_seq, &h0}, "ssm_scan");
    auto out = alloc(T * D);
    std::vector<double> saved(static_cast<size_t>((2 * T + 1) * D * H));
    double* hseq = saved.data();
    double* abar = saved.data() + (T + 1) * D * H;
    for (int64_t i = 0; i < D * H; ++i) hseq[i] = h0.at(i);
    for (int64_t t = 0; t < T; ++t) {
        const double* hprev = hseq + t * D * H;
        double* ht = hseq + (t + 1) * D * H;
        double* ab = abar + t * D * H;
        for (int64_t d = 0; d < D; ++d) {
            double del = delta.at2(t, d);
            double u = del * x.at2(t, d);
            double y = 0.0;
            for (int64_t nn = 0; nn < H; ++nn) {
                int64_t i = d * H + nn;
                double e = std::exp(del * a.at(i));
                ab[i] = e;
                double h = e * hprev[i] + b_seq.at2(t, nn) * u;
                ht[i] = h;
                y += c_seq.at2(t, nn) * h;
            }
            (*out)[t * D + d] = y;
        }
    }
    if (trace) {
        trace->h_seq.assign(saved.begin(), saved.begin() + (T + 1) * D * H);
        trace->abar.assign(saved.begin() + (T + 1) * D * H, saved.end());
    }
    return finish(c, OpKind::ssm_scan, {T, D}, out, [&](Tape::Node& n) {
        n.i0 = T;
        n.i1 = D;
        n.i2 = H;
        n.saved = std::move(saved);
    });
}

// ---- finite differences ------------------------------------------------------

double finite_difference_check(const std::function<Tensor(Tape&, std::vector<Tensor>&)>& loss,
                               std::vector<Tensor>& params, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("finite_difference_check: eps must be positive");
    for (auto& p : params) p.requires_grad = true;

    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor out = loss(tape, params);
        if (out.numel() != 1)
            throw std::invalid_argument("finite_difference_check: loss must be scalar");
        tape.backward(out);
        for (auto& p : params) {
            Tensor watched = tape.watch(p);  // returns existing node
            auto g = tape.grad_of(watched);
            if (g.empty())
                analytic.emplace_back(p.data->size(), 0.0);
            else
                analytic.emplace_back(g.begin(), g.end());
        }
    }

    auto eval = [&]() {
        Tape tape;
        Tensor out = loss(tape, params);
        return out.scalar_value();
    };

    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& vals = *params[pi].data;
        for (size_t i = 0; i < vals.size(); ++i) {
            double keep = vals[i];
            vals[i] = keep + eps;
            double up = eval();
            vals[i] = keep - eps;
            double dn = eval();
            vals[i] = keep;
            double numeric = (up - dn) / (2.0 * eps);
            double a = analytic[pi][i];
            if (std::isnan(numeric) || std::isnan(a))
                throw std::runtime_error("finite_difference_check: NaN at parameter " +
                                         std::to_string(pi) + "[" + std::to_string(i) + "]");
            double denom = std::max(1e-12, std::fabs(numeric) + std::fabs(a));
            worst = std::max(worst, std::fabs(a - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace ssmpeft
