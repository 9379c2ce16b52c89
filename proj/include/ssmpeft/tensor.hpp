#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace ssmpeft {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Dense f64 tensor, row-major. A Tensor is either a free value (tape == null)
// or a handle to a node on a tape. Parameters are free tensors that get
// watched by a fresh tape each forward pass; their accumulated gradient lives
// in `grad`.
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    std::shared_ptr<std::vector<double>> grad;  // leaves only, lazily allocated
    bool requires_grad = false;
    Tape* tape = nullptr;
    int64_t node = -1;

    Tensor() = default;

    int64_t numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }
    int64_t dim(size_t i) const { return shape.at(i); }
    size_t rank() const { return shape.size(); }

    std::vector<double>& vals() { return *data; }
    const std::vector<double>& vals() const { return *data; }
    double scalar_value() const;

    double& at(int64_t i) { return (*data)[static_cast<size_t>(i)]; }
    double at(int64_t i) const { return (*data)[static_cast<size_t>(i)]; }
    double& at2(int64_t i, int64_t j) { return (*data)[static_cast<size_t>(i * shape[1] + j)]; }
    double at2(int64_t i, int64_t j) const { return (*data)[static_cast<size_t>(i * shape[1] + j)]; }

    void ensure_grad();
    void zero_grad();

    static Tensor zeros(Shape s);
    static Tensor full(Shape s, double v);
    static Tensor scalar(double v);
    static Tensor from(Shape s, std::vector<double> v);
};

enum class OpKind {
    leaf,
    add,
    mul,
    scale,
    matmul,
    exp,
    softplus,
    silu,
    sigmoid,
    sum,
    slice,
    concat,
    broadcast,
    conv1d,
    rmsnorm,
    embed,
    cross_entropy,
    ssm_scan,
};

const char* op_name(OpKind k);

// Reverse-mode tape, rebuilt per forward pass. Node ids are topological by
// construction: inputs always have smaller ids.
class Tape {
  public:
    struct Node {
        OpKind kind;
        std::vector<int64_t> inputs;
        Shape shape;
        std::shared_ptr<std::vector<double>> out;
        std::vector<double> grad;  // allocated on demand during backward
        bool requires_grad = false;
        // op attributes / saved activations
        double c0 = 0.0;
        int64_t i0 = 0, i1 = 0, i2 = 0;
        bool f0 = false, f1 = false;
        std::vector<double> saved;
        std::vector<int64_t> saved_idx;
        std::shared_ptr<std::vector<double>> leaf_sink;  // leaf grad accumulator
    };

    // Registers `param` as a leaf. Repeated watches of the same buffer on one
    // tape return the same node (needed for tied weights).
    Tensor watch(Tensor& param);
    Tensor watch_const(const Tensor& value);

    int64_t size() const { return static_cast<int64_t>(nodes_.size()); }
    const Node& node(int64_t id) const { return nodes_[static_cast<size_t>(id)]; }
    Node& node_mut(int64_t id) { return nodes_[static_cast<size_t>(id)]; }

    // Propagates d(scalar_output)/d(node) to every node; exactly one visit per
    // node, in reverse id order. Does not touch parameter `grad` buffers.
    void backward(const Tensor& scalar_output);

    // Adds each watched leaf's tape-gradient into the owning parameter's
    // `grad` buffer (allocating it if needed). Call order across tapes defines
    // the reduction order.
    void accumulate_leaf_grads(double scale = 1.0);

    std::span<const double> grad_of(const Tensor& t) const;

    int64_t backward_visit_count() const { return visit_count_; }

    // internal: used by op builders
    int64_t emit(Node n);
    Tensor as_tensor(int64_t id);

  private:
    std::vector<Node> nodes_;
    std::unordered_map<const std::vector<double>*, int64_t> watched_;
    int64_t visit_count_ = 0;
    bool ran_backward_ = false;

    void backward_node(int64_t id);
};

// ---- primitives ------------------------------------------------------------
// Each op runs eagerly; it records a tape node iff any input is tape-linked.
// Mixing tensors from two different tapes is a contract error.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor exp(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t len);
Tensor concat(const Tensor& a, const Tensor& b, int64_t axis);
Tensor broadcast_to(const Tensor& a, const Shape& target);
// depthwise causal conv over [T, D] with kernel [D, k], bias [D]
Tensor conv1d_causal(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor rmsnorm(const Tensor& x, const Tensor& g);
Tensor embed_rows(const Tensor& table, const std::vector<int64_t>& ids);
// mean cross-entropy over masked positions; logits [T, V]
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int64_t>& targets,
                            const std::vector<uint8_t>& mask);
// fused diagonal selective scan, see ssm.hpp for the trace-returning wrapper;
// when `trace` is given it receives h_0..h_T and the per-step discrete A factors
struct ScanBuffers {
    std::vector<double> h_seq;  // (T+1) * D * H, h0 first
    std::vector<double> abar;   // T * D * H
};
Tensor ssm_scan(const Tensor& x, const Tensor& delta, const Tensor& a, const Tensor& b_seq,
                const Tensor& c_seq, const Tensor& h0, ScanBuffers* trace = nullptr);

// scalar softplus/silu/sigmoid helpers (stable branches shared with the ops)
double softplus_val(double x);
double sigmoid_val(double x);
double silu_val(double x);

// ---- finite differences -----------------------------------------------------
// loss must be a pure function of the watched params. Returns the max over all
// parameter entries of |analytic - central| / max(1e-12, |central| + |analytic|).
double finite_difference_check(const std::function<Tensor(Tape&, std::vector<Tensor>&)>& loss,
                               std::vector<Tensor>& params, double eps);

}  // namespace ssmpeft
