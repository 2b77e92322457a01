#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "w2vc/errors.hpp"

namespace w2vc {

// Dense row-major tensor of 64-bit floats, rank 1 or 2. A scalar is a rank-1
// tensor of size 1. Values are immutable once an op has consumed them; only
// the grad buffer is written during backward.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until backward touches it
    bool requires_grad = false;
    bool needs_grad = false; // requires_grad, or downstream of a tensor that does
    int param_id = -1;       // >= 0 for registered parameters
    std::string name;

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    bool is_scalar() const { return rank() == 1 && shape[0] == 1; }
    int rows() const;
    int cols() const;
    double value() const;
    bool all_finite() const;
    void ensure_grad();

    static std::shared_ptr<Tensor> make(std::vector<int> shape, bool requires_grad = false);
    static std::shared_ptr<Tensor> make(std::vector<int> shape, std::vector<double> values,
                                        bool requires_grad = false);
    static std::shared_ptr<Tensor> scalar(double v);
};

using TensorPtr = std::shared_ptr<Tensor>;

// Registered trainable parameters. param_id indexes into `all()` and into the
// gradient sink used by Graph::backward; the registration order is the
// canonical parameter order for the optimizer and checkpoints.
class ParamRegistry {
public:
    TensorPtr add(const std::string& name, std::vector<int> shape);
    const std::vector<TensorPtr>& all() const { return params_; }
    TensorPtr find(const std::string& name) const;
    int64_t total_size() const;

private:
    std::vector<TensorPtr> params_;
};

using GradSink = std::vector<std::vector<double>>; // indexed by param_id

// Dynamic tape. Ops append nodes in execution order; backward walks them in
// exact reverse append order, so gradient accumulation across fan-out is
// deterministic. One graph is confined to one worker.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // leaves
    TensorPtr constant(std::vector<int> shape, std::vector<double> values);
    TensorPtr detach(const TensorPtr& x); // stop-gradient: value copy, no history

    // elementwise / shape-preserving
    TensorPtr add(const TensorPtr& a, const TensorPtr& b);
    TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
    TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
    TensorPtr div(const TensorPtr& a, const TensorPtr& b);
    TensorPtr scale(const TensorPtr& a, double s);
    TensorPtr add_const(const TensorPtr& a, double c);
    TensorPtr sigmoid(const TensorPtr& a);
    TensorPtr tanh(const TensorPtr& a);
    TensorPtr exp(const TensorPtr& a);
    TensorPtr gelu(const TensorPtr& a);
    TensorPtr xlogx(const TensorPtr& a); // x*ln(x), 0 at 0
    TensorPtr clamp_min(const TensorPtr& a, double lo);

    // identity forward, gradient multiplied by `factor` on the way back
    TensorPtr gradient_scale(const TensorPtr& a, double factor);

    // linear algebra
    TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);    // [m x k] * [k x n]
    TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b); // [m x k] * [n x k]^T
    TensorPtr add_rowvec(const TensorPtr& a, const TensorPtr& v);

    // Whole recurrent gate sequence as one node: xp holds precomputed input
    // projections [T x 4H], wh the recurrent weights [H x 4H]; returns the
    // hidden states [T x H]. Gate columns are input, forget, cell, output,
    // state starts at zero. Forward arithmetic matches the per-step op
    // composition element for element; backward runs the reverse-time
    // recurrence in a single closure.
    TensorPtr lstm_cell_sequence(const TensorPtr& xp, const TensorPtr& wh, int hidden);

    // structure
    TensorPtr reshape(const TensorPtr& a, std::vector<int> shape);
    TensorPtr slice_rows(const TensorPtr& a, int r0, int n);
    TensorPtr slice_cols(const TensorPtr& a, int c0, int n);
    TensorPtr concat_rows(const std::vector<TensorPtr>& parts);
    TensorPtr concat_cols(const std::vector<TensorPtr>& parts);
    TensorPtr gather_rows(const TensorPtr& a, std::vector<int> idx);
    TensorPtr pick_col(const TensorPtr& a, int col);

    // reductions
    TensorPtr row_sum(const TensorPtr& a);  // [R x C] -> [R]
    TensorPtr col_mean(const TensorPtr& a); // [R x C] -> [C]
    TensorPtr sum_all(const TensorPtr& a);  // -> scalar
    TensorPtr logsumexp_rows(const TensorPtr& a);

    // per-row L2 norm; value is exact sqrt(sum sq), backward guards the
    // denominator with max(norm, 1e-8)
    TensorPtr norm2_rows(const TensorPtr& a);

    // rows sum to one, computed with max subtraction; backward applies the
    // exact softmax Jacobian
    TensorPtr softmax_rows(const TensorPtr& a);

    TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias);

    // masked rows of `a` are replaced by the (trainable) embedding vector;
    // gradients route to the embedding for covered rows, to `a` elsewhere
    TensorPtr mask_rows(const TensorPtr& a, const std::vector<int>& masked, const TensorPtr& emb);

    // straight-through: forward emits `forward_value`, backward copies the
    // incoming gradient to `grad_target` unchanged
    TensorPtr st_copy(const TensorPtr& grad_target, const std::vector<double>& forward_value);

    // hard-forward / soft-backward code lookup: forward emits codes[hard[t]],
    // backward treats the op as probs * codes for both inputs
    TensorPtr st_matmul(const TensorPtr& probs, const TensorPtr& codes,
                        const std::vector<int>& hard);

    // backward passes
    void backward(const TensorPtr& loss);                 // param grads into Tensor::grad
    void backward(const TensorPtr& loss, GradSink& sink); // param grads into sink[param_id]

    // first op (in append order) whose output holds a non-finite value
    std::optional<std::string> find_nonfinite() const;

    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        const char* op;
        TensorPtr out;
        std::function<void()> back; // empty when no input needs grad
    };

    std::vector<Node> nodes_;
    GradSink* sink_ = nullptr;

    void push_(const char* op, TensorPtr out, std::function<void()> back);
    void run_backward_(const TensorPtr& loss);

public:
    // Accumulation target for a tensor's gradient, or nullptr when the tensor
    // does not participate in differentiation. Used by op backward closures.
    double* grad_buf(Tensor& t);
};

// Central-difference gradient verification. Analytic gradients are read from
// each parameter's grad buffer; `f` re-evaluates the scalar objective at the
// current parameter values and must be deterministic.
struct FiniteDiffReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    int64_t checked = 0;
    int64_t skipped = 0;
    double tol = 0.0;
    bool pass = false;
    std::map<std::string, double> per_param_max;
};

// `floor` bounds the comparison denominator from below so that noise on
// near-zero gradients is judged absolutely rather than relatively.
// `max_entries_per_param` > 0 restricts the sweep to the leading entries of
// each parameter, for spot checks on models too large for a full pass.
FiniteDiffReport finite_diff_check(const std::function<double()>& f,
                                   const std::vector<TensorPtr>& params, double step = 1e-5,
                                   double tol = 1e-6, double floor = 1e-4,
                                   int64_t max_entries_per_param = 0);

} // namespace w2vc
