#include "w2vc/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <new>
#include <sstream>

namespace w2vc {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const MatRM, Eigen::Aligned64>;
using MMap = Eigen::Map<MatRM, Eigen::Aligned64>;

// Matrix products run on 64-byte-aligned scratch copies. Heap buffers land on
// varying alignments, and vectorized kernels peel loops differently per
// alignment, which would make results depend on allocation history; copying
// to fixed-alignment scratch keeps every product bit-reproducible.
struct AlignedBuf {
    double* p = nullptr;
    size_t cap = 0;
    double* get(size_t n) {
        if (n > cap) {
            std::free(p);
            const size_t bytes = ((n * sizeof(double) + 63) / 64) * 64;
            p = static_cast<double*>(std::aligned_alloc(64, bytes));
            if (!p) throw std::bad_alloc();
            cap = n;
        }
        return p;
    }
    ~AlignedBuf() { std::free(p); }
};

thread_local AlignedBuf tl_lhs, tl_rhs, tl_dst;

// Plain-loop product for thin or tiny shapes. Per output element the k sum
// runs in ascending order whatever the buffer alignment, so results never
// depend on where the heap placed things. No scratch copies either, which
// matters for the recurrent per-frame products.
void gemm_plain(const double* A, int ac, bool ta, const double* B, int bc, bool tb, double* C,
                int m, int k, int n, bool accumulate) {
    if (!accumulate) std::fill(C, C + static_cast<size_t>(m) * n, 0.0);
    if (tb) {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double s = 0;
                const double* brow = B + static_cast<size_t>(j) * bc;
                if (!ta) {
                    const double* arow = A + static_cast<size_t>(i) * ac;
                    for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
                } else {
                    for (int p = 0; p < k; ++p) s += A[static_cast<size_t>(p) * ac + i] * brow[p];
                }
                C[static_cast<size_t>(i) * n + j] += s;
            }
    } else {
        for (int i = 0; i < m; ++i) {
            double* crow = C + static_cast<size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
                const double av = ta ? A[static_cast<size_t>(p) * ac + i]
                                     : A[static_cast<size_t>(i) * ac + p];
                const double* brow = B + static_cast<size_t>(p) * bc;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

// C (+)= op(A) * op(B); A is [ar x ac] row-major before any transpose, B
// likewise. op is transpose when the flag is set. Thin and tiny products use
// fixed-order loops directly on the inputs; larger ones run on 64-byte
// aligned scratch copies. Heap buffers land on varying alignments and
// vectorized kernels peel loops differently per alignment, which would make
// results depend on allocation history; both paths avoid that.
void gemm(const double* A, int ar, int ac, bool ta, const double* B, int br, int bc, bool tb,
          double* C, bool accumulate) {
    const int m = ta ? ac : ar;
    const int k = ta ? ar : ac;
    const int n = tb ? br : bc;
    if (m == 1 || n == 1 || k == 1 || static_cast<int64_t>(m) * k * n <= 4096) {
        gemm_plain(A, ac, ta, B, bc, tb, C, m, k, n, accumulate);
        return;
    }
    double* a = tl_lhs.get(static_cast<size_t>(ar) * ac);
    double* b = tl_rhs.get(static_cast<size_t>(br) * bc);
    double* c = tl_dst.get(static_cast<size_t>(m) * n);
    std::memcpy(a, A, sizeof(double) * static_cast<size_t>(ar) * ac);
    std::memcpy(b, B, sizeof(double) * static_cast<size_t>(br) * bc);
    CMap Am(a, ar, ac), Bm(b, br, bc);
    MMap Cm(c, m, n);
    if (!ta && !tb)
        Cm.noalias() = Am * Bm;
    else if (!ta && tb)
        Cm.noalias() = Am * Bm.transpose();
    else if (ta && !tb)
        Cm.noalias() = Am.transpose() * Bm;
    else
        Cm.noalias() = Am.transpose() * Bm.transpose();
    const size_t total = static_cast<size_t>(m) * n;
    if (accumulate)
        for (size_t i = 0; i < total; ++i) C[i] += c[i];
    else
        std::memcpy(C, c, sizeof(double) * total);
}

int64_t shape_size(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                          shape_str(b.shape));
}

void check_matrix(const char* op, const Tensor& t) {
    if (t.rank() != 2)
        throw shape_error(std::string(op) + ": expected a matrix, got " + shape_str(t.shape));
}

constexpr double kNormFloor = 1e-8;

} // namespace

int Tensor::rows() const {
    if (rank() != 2) throw shape_error("rows(): tensor is not rank 2: " + shape_str(shape));
    return shape[0];
}

int Tensor::cols() const {
    if (rank() != 2) throw shape_error("cols(): tensor is not rank 2: " + shape_str(shape));
    return shape[1];
}

double Tensor::value() const {
    if (!is_scalar()) throw shape_error("value(): tensor is not scalar: " + shape_str(shape));
    return data[0];
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
}

TensorPtr Tensor::make(std::vector<int> shape, bool requires_grad) {
    auto t = std::make_shared<Tensor>();
    const int64_t n = shape_size(shape);
    if (shape.empty() || n <= 0) throw shape_error("Tensor::make: bad shape " + shape_str(shape));
    t->shape = std::move(shape);
    t->data.assign(static_cast<size_t>(n), 0.0);
    t->requires_grad = requires_grad;
    t->needs_grad = requires_grad;
    return t;
}

TensorPtr Tensor::make(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    auto t = make(std::move(shape), requires_grad);
    if (static_cast<int64_t>(values.size()) != t->size())
        throw shape_error("Tensor::make: data length does not match shape");
    t->data = std::move(values);
    return t;
}

TensorPtr Tensor::scalar(double v) { return make({1}, std::vector<double>{v}); }

TensorPtr ParamRegistry::add(const std::string& name, std::vector<int> shape) {
    auto t = Tensor::make(std::move(shape), /*requires_grad=*/true);
    t->name = name;
    t->param_id = static_cast<int>(params_.size());
    params_.push_back(t);
    return t;
}

TensorPtr ParamRegistry::find(const std::string& name) const {
    for (const auto& p : params_)
        if (p->name == name) return p;
    return nullptr;
}

int64_t ParamRegistry::total_size() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p->size();
    return n;
}

// ---------------------------------------------------------------------------
// Graph internals

namespace {
// Treats a leaf whose requires_grad was switched on after construction the
// same as one created with it, so the two flags cannot drift apart.
bool wants_grad(const TensorPtr& t) { return t->needs_grad || t->requires_grad; }
}  // namespace

double* Graph::grad_buf(Tensor& t) {
    if (!t.needs_grad && !t.requires_grad) return nullptr;
    if (sink_ && t.param_id >= 0) {
        auto& slot = (*sink_)[static_cast<size_t>(t.param_id)];
        if (slot.empty()) slot.assign(t.data.size(), 0.0);
        return slot.data();
    }
    t.ensure_grad();
    return t.grad.data();
}

void Graph::push_(const char* op, TensorPtr out, std::function<void()> back) {
    nodes_.push_back(Node{op, std::move(out), std::move(back)});
}

namespace {
bool any_needs(std::initializer_list<const TensorPtr*> ts) {
    for (const auto* t : ts)
        if (wants_grad(*t)) return true;
    return false;
}
} // namespace

TensorPtr Graph::constant(std::vector<int> shape, std::vector<double> values) {
    return Tensor::make(std::move(shape), std::move(values));
}

TensorPtr Graph::detach(const TensorPtr& x) {
    auto out = Tensor::make(x->shape, x->data);
    return out;
}

// Every op follows the same pattern: compute the forward value, then (when the
// output needs a gradient) record a closure that routes grad contributions to
// the inputs. Closures capture shared_ptrs, so dropping intermediate handles
// is safe.

TensorPtr Graph::add(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape("add", *a, *b);
    auto out = Tensor::make(a->shape);
    const int64_t n = out->size();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + b->data[i];
    out->needs_grad = any_needs({&a, &b});
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, b, out, n] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
            if (double* gb = grad_buf(*b))
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
        };
    }
    push_("add", out, std::move(back));
    return out;
}

TensorPtr Graph::sub(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape("sub", *a, *b);
    auto out = Tensor::make(a->shape);
    const int64_t n = out->size();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] - b->data[i];
    out->needs_grad = any_needs({&a, &b});
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, b, out, n] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
            if (double* gb = grad_buf(*b))
                for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
        };
    }
    push_("sub", out, std::move(back));
    return out;
}

TensorPtr Graph::mul(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape("mul", *a, *b);
    auto out = Tensor::make(a->shape);
    const int64_t n = out->size();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * b->data[i];
    out->needs_grad = any_needs({&a, &b});
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, b, out, n] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * b->data[i];
            if (double* gb = grad_buf(*b))
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * a->data[i];
        };
    }
    push_("mul", out, std::move(back));
    return out;
}

TensorPtr Graph::div(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape("div", *a, *b);
    auto out = Tensor::make(a->shape);
    const int64_t n = out->size();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] / b->data[i];
    out->needs_grad = any_needs({&a, &b});
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, b, out, n] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] / b->data[i];
            if (double* gb = grad_buf(*b))
                for (int64_t i = 0; i < n; ++i)
                    gb[i] -= g[i] * a->data[i] / (b->data[i] * b->data[i]);
        };
    }
    push_("div", out, std::move(back));
    return out;
}

TensorPtr Graph::scale(const TensorPtr& a, double s) {
    auto out = Tensor::make(a->shape);
    const int64_t n = out->size();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * s;
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, s, n] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * s;
        };
    }
    push_("scale", out, std::move(back));
    return out;
}

TensorPtr Graph::add_const(const TensorPtr& a, double c) {
    auto out = Tensor::make(a->shape);
    const int64_t n = out->size();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + c;
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, n] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        };
    }
    push_("add_const", out, std::move(back));
    return out;
}

TensorPtr Graph::sigmoid(const TensorPtr& a) {
    auto out = Tensor::make(a->shape);
    const int64_t n = out->size();
    for (int64_t i = 0; i < n; ++i) {
        const double x = a->data[i];
        out->data[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, n] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < n; ++i) {
                    const double y = out->data[i];
                    ga[i] += g[i] * y * (1.0 - y);
                }
        };
    }
    push_("sigmoid", out, std::move(back));
    return out;
}

TensorPtr Graph::tanh(const TensorPtr& a) {
    auto out = Tensor::make(a->shape);
    const int64_t n = out->size();
    for (int64_t i = 0; i < n; ++i) out->data[i] = std::tanh(a->data[i]);
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, n] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < n; ++i) {
                    const double y = out->data[i];
                    ga[i] += g[i] * (1.0 - y * y);
                }
        };
    }
    push_("tanh", out, std::move(back));
    return out;
}

TensorPtr Graph::exp(const TensorPtr& a) {
    auto out = Tensor::make(a->shape);
    const int64_t n = out->size();
    for (int64_t i = 0; i < n; ++i) out->data[i] = std::exp(a->data[i]);
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, n] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * out->data[i];
        };
    }
    push_("exp", out, std::move(back));
    return out;
}

TensorPtr Graph::gelu(const TensorPtr& a) {
    auto out = Tensor::make(a->shape);
    const int64_t n = out->size();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    auto erfs = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const double x = a->data[i];
        const double e = std::erf(x * inv_sqrt2);
        (*erfs)[static_cast<size_t>(i)] = e;
        out->data[i] = 0.5 * x * (1.0 + e);
    }
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, erfs, n] {
            constexpr double inv_sqrt2pi = 0.39894228040143267794;
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < n; ++i) {
                    const double x = a->data[i];
                    const double cdf = 0.5 * (1.0 + (*erfs)[static_cast<size_t>(i)]);
                    const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                    ga[i] += g[i] * (cdf + x * pdf);
                }
        };
    }
    push_("gelu", out, std::move(back));
    return out;
}

TensorPtr Graph::xlogx(const TensorPtr& a) {
    auto out = Tensor::make(a->shape);
    const int64_t n = out->size();
    for (int64_t i = 0; i < n; ++i) {
        const double x = a->data[i];
        out->data[i] = x > 0.0 ? x * std::log(x) : 0.0;
    }
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, n] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < n; ++i) {
                    const double x = a->data[i];
                    if (x > 0.0) ga[i] += g[i] * (std::log(x) + 1.0);
                }
        };
    }
    push_("xlogx", out, std::move(back));
    return out;
}

TensorPtr Graph::clamp_min(const TensorPtr& a, double lo) {
    auto out = Tensor::make(a->shape);
    const int64_t n = out->size();
    for (int64_t i = 0; i < n; ++i) out->data[i] = std::max(a->data[i], lo);
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, lo, n] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < n; ++i)
                    if (a->data[i] > lo) ga[i] += g[i];
        };
    }
    push_("clamp_min", out, std::move(back));
    return out;
}

TensorPtr Graph::gradient_scale(const TensorPtr& a, double factor) {
    if (!std::isfinite(factor)) throw config_error("gradient_scale: factor must be finite");
    auto out = Tensor::make(a->shape, a->data);
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        const int64_t n = out->size();
        back = [this, a, out, factor, n] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * factor;
        };
    }
    push_("gradient_scale", out, std::move(back));
    return out;
}

TensorPtr Graph::matmul(const TensorPtr& a, const TensorPtr& b) {
    check_matrix("matmul", *a);
    check_matrix("matmul", *b);
    if (a->cols() != b->rows())
        throw shape_error("matmul: inner dimensions disagree: " + shape_str(a->shape) + " x " +
                          shape_str(b->shape));
    const int m = a->rows(), k = a->cols(), n = b->cols();
    auto out = Tensor::make({m, n});
    gemm(a->data.data(), m, k, false, b->data.data(), k, n, false, out->data.data(), false);
    out->needs_grad = any_needs({&a, &b});
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, b, out, m, k, n] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                gemm(g, m, n, false, b->data.data(), k, n, true, ga, true);
            if (double* gb = grad_buf(*b))
                gemm(a->data.data(), m, k, true, g, m, n, false, gb, true);
        };
    }
    push_("matmul", out, std::move(back));
    return out;
}

TensorPtr Graph::matmul_nt(const TensorPtr& a, const TensorPtr& b) {
    check_matrix("matmul_nt", *a);
    check_matrix("matmul_nt", *b);
    if (a->cols() != b->cols())
        throw shape_error("matmul_nt: inner dimensions disagree: " + shape_str(a->shape) + " x " +
                          shape_str(b->shape) + "^T");
    const int m = a->rows(), k = a->cols(), n = b->rows();
    auto out = Tensor::make({m, n});
    gemm(a->data.data(), m, k, false, b->data.data(), n, k, true, out->data.data(), false);
    out->needs_grad = any_needs({&a, &b});
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, b, out, m, k, n] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                gemm(g, m, n, false, b->data.data(), n, k, false, ga, true);
            if (double* gb = grad_buf(*b))
                gemm(g, m, n, true, a->data.data(), m, k, false, gb, true);
        };
    }
    push_("matmul_nt", out, std::move(back));
    return out;
}

TensorPtr Graph::lstm_cell_sequence(const TensorPtr& xp, const TensorPtr& wh, int hidden) {
    check_matrix("lstm_cell_sequence", *xp);
    check_matrix("lstm_cell_sequence", *wh);
    if (hidden < 1) throw shape_error("lstm_cell_sequence: hidden must be >= 1");
    const int H = hidden, G4 = 4 * hidden, T = xp->rows();
    if (xp->cols() != G4)
        throw shape_error("lstm_cell_sequence: xp has " + std::to_string(xp->cols()) +
                          " cols, expected " + std::to_string(G4));
    if (wh->rows() != H || wh->cols() != G4)
        throw shape_error("lstm_cell_sequence: wh is " + shape_str(wh->shape) + ", expected [" +
                          std::to_string(H) + " x " + std::to_string(G4) + "]");
    auto out = Tensor::make({T, H});
    // Post-activation gates plus cell values, kept for the backward pass.
    auto acts = std::make_shared<std::vector<double>>(static_cast<size_t>(T) * G4);
    auto cells = std::make_shared<std::vector<double>>(static_cast<size_t>(T) * H);
    auto tcells = std::make_shared<std::vector<double>>(static_cast<size_t>(T) * H);
    std::vector<double> pre(static_cast<size_t>(G4));
    const double* whd = wh->data.data();
    for (int t = 0; t < T; ++t) {
        const double* xrow = xp->data.data() + static_cast<size_t>(t) * G4;
        const double* hprev = t > 0 ? out->data.data() + static_cast<size_t>(t - 1) * H : nullptr;
        const double* cprev = t > 0 ? cells->data() + static_cast<size_t>(t - 1) * H : nullptr;
        std::fill(pre.begin(), pre.end(), 0.0);
        if (hprev)
            for (int k = 0; k < H; ++k) {
                const double av = hprev[k];
                const double* wrow = whd + static_cast<size_t>(k) * G4;
                for (int j = 0; j < G4; ++j) pre[static_cast<size_t>(j)] += av * wrow[j];
            }
        for (int j = 0; j < G4; ++j) pre[static_cast<size_t>(j)] += xrow[j];
        double* arow = acts->data() + static_cast<size_t>(t) * G4;
        double* crow = cells->data() + static_cast<size_t>(t) * H;
        double* tcrow = tcells->data() + static_cast<size_t>(t) * H;
        double* hrow = out->data.data() + static_cast<size_t>(t) * H;
        for (int j = 0; j < H; ++j) {
            const auto sig = [](double x) {
                return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            };
            const double gi = sig(pre[static_cast<size_t>(j)]);
            const double gf = sig(pre[static_cast<size_t>(H + j)]);
            const double gc = std::tanh(pre[static_cast<size_t>(2 * H + j)]);
            const double go = sig(pre[static_cast<size_t>(3 * H + j)]);
            arow[j] = gi;
            arow[H + j] = gf;
            arow[2 * H + j] = gc;
            arow[3 * H + j] = go;
            const double c = gf * (cprev ? cprev[j] : 0.0) + gi * gc;
            const double tc = std::tanh(c);
            crow[j] = c;
            tcrow[j] = tc;
            hrow[j] = go * tc;
        }
    }
    out->needs_grad = any_needs({&xp, &wh});
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, xp, wh, out, acts, cells, tcells, T, H, G4] {
            const double* g = out->grad.data();
            const double* whd = wh->data.data();
            std::vector<double> dgates(static_cast<size_t>(T) * G4);
            std::vector<double> hcarry(static_cast<size_t>(H), 0.0);
            std::vector<double> ccarry(static_cast<size_t>(H), 0.0);
            for (int t = T - 1; t >= 0; --t) {
                const double* arow = acts->data() + static_cast<size_t>(t) * G4;
                const double* tcrow = tcells->data() + static_cast<size_t>(t) * H;
                const double* cprev =
                    t > 0 ? cells->data() + static_cast<size_t>(t - 1) * H : nullptr;
                double* drow = dgates.data() + static_cast<size_t>(t) * G4;
                for (int j = 0; j < H; ++j) {
                    const double dh = g[static_cast<size_t>(t) * H + j] + hcarry[static_cast<size_t>(j)];
                    const double gi = arow[j], gf = arow[H + j], gc = arow[2 * H + j],
                                 go = arow[3 * H + j];
                    const double tc = tcrow[j];
                    const double dgo = dh * tc;
                    const double dc = dh * go * (1.0 - tc * tc) + ccarry[static_cast<size_t>(j)];
                    const double dgi = dc * gc;
                    const double dgc = dc * gi;
                    const double dgf = dc * (cprev ? cprev[j] : 0.0);
                    ccarry[static_cast<size_t>(j)] = dc * gf;
                    drow[j] = dgi * gi * (1.0 - gi);
                    drow[H + j] = dgf * gf * (1.0 - gf);
                    drow[2 * H + j] = dgc * (1.0 - gc * gc);
                    drow[3 * H + j] = dgo * go * (1.0 - go);
                }
                for (int k = 0; k < H; ++k) {
                    const double* wrow = whd + static_cast<size_t>(k) * G4;
                    double s = 0.0;
                    for (int j = 0; j < G4; ++j) s += drow[j] * wrow[j];
                    hcarry[static_cast<size_t>(k)] = s;
                }
            }
            if (double* gx = grad_buf(*xp)) {
                const size_t n = dgates.size();
                for (size_t i = 0; i < n; ++i) gx[i] += dgates[i];
            }
            if (double* gw = grad_buf(*wh)) {
                // d_wh = Hprev^T * dgates with Hprev row t holding h_{t-1}
                std::vector<double> hprev(static_cast<size_t>(T) * H, 0.0);
                if (T > 1)
                    std::copy(out->data.begin(), out->data.begin() + static_cast<size_t>(T - 1) * H,
                              hprev.begin() + H);
                gemm(hprev.data(), T, H, true, dgates.data(), T, G4, false, gw, true);
            }
        };
    }
    push_("lstm_cell_sequence", out, std::move(back));
    return out;
}

TensorPtr Graph::add_rowvec(const TensorPtr& a, const TensorPtr& v) {
    check_matrix("add_rowvec", *a);
    if (v->rank() != 1 || v->shape[0] != a->cols())
        throw shape_error("add_rowvec: vector length " + shape_str(v->shape) +
                          " does not match matrix cols " + shape_str(a->shape));
    const int R = a->rows(), C = a->cols();
    auto out = Tensor::make(a->shape);
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) out->data[r * C + c] = a->data[r * C + c] + v->data[c];
    out->needs_grad = any_needs({&a, &v});
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, v, out, R, C] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < static_cast<int64_t>(R) * C; ++i) ga[i] += g[i];
            if (double* gv = grad_buf(*v))
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) gv[c] += g[r * C + c];
        };
    }
    push_("add_rowvec", out, std::move(back));
    return out;
}

TensorPtr Graph::reshape(const TensorPtr& a, std::vector<int> shape) {
    if (shape_size(shape) != a->size())
        throw shape_error("reshape: element count mismatch " + shape_str(a->shape) + " -> " +
                          shape_str(shape));
    auto out = Tensor::make(std::move(shape), a->data);
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        const int64_t n = out->size();
        back = [this, a, out, n] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        };
    }
    push_("reshape", out, std::move(back));
    return out;
}

TensorPtr Graph::slice_rows(const TensorPtr& a, int r0, int n) {
    check_matrix("slice_rows", *a);
    if (r0 < 0 || n < 1 || r0 + n > a->rows())
        throw shape_error("slice_rows: range out of bounds");
    const int C = a->cols();
    auto out = Tensor::make({n, C});
    std::memcpy(out->data.data(), a->data.data() + static_cast<size_t>(r0) * C,
                sizeof(double) * static_cast<size_t>(n) * C);
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, r0, n, C] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < static_cast<int64_t>(n) * C; ++i)
                    ga[static_cast<int64_t>(r0) * C + i] += g[i];
        };
    }
    push_("slice_rows", out, std::move(back));
    return out;
}

TensorPtr Graph::slice_cols(const TensorPtr& a, int c0, int n) {
    check_matrix("slice_cols", *a);
    if (c0 < 0 || n < 1 || c0 + n > a->cols())
        throw shape_error("slice_cols: range out of bounds");
    const int R = a->rows(), C = a->cols();
    auto out = Tensor::make({R, n});
    for (int r = 0; r < R; ++r)
        std::memcpy(out->data.data() + static_cast<size_t>(r) * n,
                    a->data.data() + static_cast<size_t>(r) * C + c0, sizeof(double) * n);
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, c0, n, R, C] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < n; ++c) ga[r * C + c0 + c] += g[r * n + c];
        };
    }
    push_("slice_cols", out, std::move(back));
    return out;
}

TensorPtr Graph::concat_rows(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw shape_error("concat_rows: no inputs");
    const int C = parts[0]->cols();
    int R = 0;
    for (const auto& p : parts) {
        check_matrix("concat_rows", *p);
        if (p->cols() != C) throw shape_error("concat_rows: column mismatch");
        R += p->rows();
    }
    auto out = Tensor::make({R, C});
    size_t off = 0;
    bool needs = false;
    for (const auto& p : parts) {
        std::memcpy(out->data.data() + off, p->data.data(), sizeof(double) * p->data.size());
        off += p->data.size();
        needs = needs || wants_grad(p);
    }
    out->needs_grad = needs;
    std::function<void()> back;
    if (needs) {
        back = [this, parts, out] {
            const double* g = out->grad.data();
            size_t off2 = 0;
            for (const auto& p : parts) {
                if (double* gp = grad_buf(*p))
                    for (size_t i = 0; i < p->data.size(); ++i) gp[i] += g[off2 + i];
                off2 += p->data.size();
            }
        };
    }
    push_("concat_rows", out, std::move(back));
    return out;
}

TensorPtr Graph::concat_cols(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw shape_error("concat_cols: no inputs");
    const int R = parts[0]->rows();
    int C = 0;
    for (const auto& p : parts) {
        check_matrix("concat_cols", *p);
        if (p->rows() != R) throw shape_error("concat_cols: row mismatch");
        C += p->cols();
    }
    auto out = Tensor::make({R, C});
    bool needs = false;
    int c0 = 0;
    for (const auto& p : parts) {
        const int pc = p->cols();
        for (int r = 0; r < R; ++r)
            std::memcpy(out->data.data() + static_cast<size_t>(r) * C + c0,
                        p->data.data() + static_cast<size_t>(r) * pc, sizeof(double) * pc);
        c0 += pc;
        needs = needs || wants_grad(p);
    }
    out->needs_grad = needs;
    std::function<void()> back;
    if (needs) {
        back = [this, parts, out, R, C] {
            const double* g = out->grad.data();
            int cc = 0;
            for (const auto& p : parts) {
                const int pc = p->cols();
                if (double* gp = grad_buf(*p))
                    for (int r = 0; r < R; ++r)
                        for (int c = 0; c < pc; ++c) gp[r * pc + c] += g[r * C + cc + c];
                cc += pc;
            }
        };
    }
    push_("concat_cols", out, std::move(back));
    return out;
}

TensorPtr Graph::gather_rows(const TensorPtr& a, std::vector<int> idx) {
    check_matrix("gather_rows", *a);
    const int R = a->rows(), C = a->cols();
    for (int i : idx)
        if (i < 0 || i >= R) throw shape_error("gather_rows: index out of range");
    const int n = static_cast<int>(idx.size());
    if (n == 0) throw shape_error("gather_rows: empty index list");
    auto out = Tensor::make({n, C});
    for (int i = 0; i < n; ++i)
        std::memcpy(out->data.data() + static_cast<size_t>(i) * C,
                    a->data.data() + static_cast<size_t>(idx[i]) * C, sizeof(double) * C);
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, idx = std::move(idx), n, C] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int i = 0; i < n; ++i)
                    for (int c = 0; c < C; ++c) ga[idx[i] * C + c] += g[i * C + c];
        };
    }
    push_("gather_rows", out, std::move(back));
    return out;
}

TensorPtr Graph::pick_col(const TensorPtr& a, int col) {
    check_matrix("pick_col", *a);
    if (col < 0 || col >= a->cols()) throw shape_error("pick_col: column out of range");
    const int R = a->rows(), C = a->cols();
    auto out = Tensor::make({R});
    for (int r = 0; r < R; ++r) out->data[r] = a->data[r * C + col];
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, col, R, C] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int r = 0; r < R; ++r) ga[r * C + col] += g[r];
        };
    }
    push_("pick_col", out, std::move(back));
    return out;
}

TensorPtr Graph::row_sum(const TensorPtr& a) {
    check_matrix("row_sum", *a);
    const int R = a->rows(), C = a->cols();
    auto out = Tensor::make({R});
    for (int r = 0; r < R; ++r) {
        double s = 0;
        for (int c = 0; c < C; ++c) s += a->data[r * C + c];
        out->data[r] = s;
    }
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, R, C] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) ga[r * C + c] += g[r];
        };
    }
    push_("row_sum", out, std::move(back));
    return out;
}

TensorPtr Graph::col_mean(const TensorPtr& a) {
    check_matrix("col_mean", *a);
    const int R = a->rows(), C = a->cols();
    auto out = Tensor::make({C});
    for (int c = 0; c < C; ++c) {
        double s = 0;
        for (int r = 0; r < R; ++r) s += a->data[r * C + c];
        out->data[c] = s / R;
    }
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, R, C] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) ga[r * C + c] += g[c] / R;
        };
    }
    push_("col_mean", out, std::move(back));
    return out;
}

TensorPtr Graph::sum_all(const TensorPtr& a) {
    auto out = Tensor::make({1});
    double s = 0;
    for (double v : a->data) s += v;
    out->data[0] = s;
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        const int64_t n = a->size();
        back = [this, a, out, n] {
            const double g = out->grad[0];
            if (double* ga = grad_buf(*a))
                for (int64_t i = 0; i < n; ++i) ga[i] += g;
        };
    }
    push_("sum_all", out, std::move(back));
    return out;
}

TensorPtr Graph::logsumexp_rows(const TensorPtr& a) {
    check_matrix("logsumexp_rows", *a);
    const int R = a->rows(), C = a->cols();
    auto out = Tensor::make({R});
    for (int r = 0; r < R; ++r) {
        const double* row = a->data.data() + static_cast<size_t>(r) * C;
        double m = row[0];
        for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
        double s = 0;
        for (int c = 0; c < C; ++c) s += std::exp(row[c] - m);
        out->data[r] = m + std::log(s);
    }
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, R, C] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int r = 0; r < R; ++r) {
                    const double* row = a->data.data() + static_cast<size_t>(r) * C;
                    for (int c = 0; c < C; ++c)
                        ga[r * C + c] += g[r] * std::exp(row[c] - out->data[r]);
                }
        };
    }
    push_("logsumexp_rows", out, std::move(back));
    return out;
}

TensorPtr Graph::norm2_rows(const TensorPtr& a) {
    check_matrix("norm2_rows", *a);
    const int R = a->rows(), C = a->cols();
    auto out = Tensor::make({R});
    for (int r = 0; r < R; ++r) {
        double s = 0;
        for (int c = 0; c < C; ++c) {
            const double v = a->data[r * C + c];
            s += v * v;
        }
        out->data[r] = std::sqrt(s);
    }
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, R, C] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int r = 0; r < R; ++r) {
                    const double inv = 1.0 / std::max(out->data[r], kNormFloor);
                    for (int c = 0; c < C; ++c)
                        ga[r * C + c] += g[r] * a->data[r * C + c] * inv;
                }
        };
    }
    push_("norm2_rows", out, std::move(back));
    return out;
}

TensorPtr Graph::softmax_rows(const TensorPtr& a) {
    check_matrix("softmax_rows", *a);
    const int R = a->rows(), C = a->cols();
    for (double v : a->data)
        if (std::isnan(v)) throw numeric_error("softmax_rows: NaN input");
    auto out = Tensor::make({R, C});
    for (int r = 0; r < R; ++r) {
        const double* row = a->data.data() + static_cast<size_t>(r) * C;
        double* orow = out->data.data() + static_cast<size_t>(r) * C;
        double m = row[0];
        for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
        double s = 0;
        for (int c = 0; c < C; ++c) {
            orow[c] = std::exp(row[c] - m);
            s += orow[c];
        }
        const double inv = 1.0 / s;
        for (int c = 0; c < C; ++c) orow[c] *= inv;
    }
    out->needs_grad = wants_grad(a);
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, out, R, C] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int r = 0; r < R; ++r) {
                    const double* y = out->data.data() + static_cast<size_t>(r) * C;
                    const double* gr = g + static_cast<size_t>(r) * C;
                    double dot = 0;
                    for (int c = 0; c < C; ++c) dot += gr[c] * y[c];
                    for (int c = 0; c < C; ++c) ga[r * C + c] += y[c] * (gr[c] - dot);
                }
        };
    }
    push_("softmax_rows", out, std::move(back));
    return out;
}

TensorPtr Graph::layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias) {
    check_matrix("layer_norm", *x);
    const int R = x->rows(), C = x->cols();
    if (gain->rank() != 1 || gain->shape[0] != C || bias->rank() != 1 || bias->shape[0] != C)
        throw shape_error("layer_norm: gain/bias must be length-" + std::to_string(C) + " vectors");
    constexpr double eps = 1e-5;
    auto out = Tensor::make({R, C});
    auto mean = std::make_shared<std::vector<double>>(R);
    auto istd = std::make_shared<std::vector<double>>(R);
    for (int r = 0; r < R; ++r) {
        const double* row = x->data.data() + static_cast<size_t>(r) * C;
        double mu = 0;
        for (int c = 0; c < C; ++c) mu += row[c];
        mu /= C;
        double var = 0;
        for (int c = 0; c < C; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= C;
        const double is = 1.0 / std::sqrt(var + eps);
        (*mean)[r] = mu;
        (*istd)[r] = is;
        for (int c = 0; c < C; ++c)
            out->data[r * C + c] = (row[c] - mu) * is * gain->data[c] + bias->data[c];
    }
    out->needs_grad = any_needs({&x, &gain, &bias});
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, x, gain, bias, out, mean, istd, R, C] {
            const double* g = out->grad.data();
            double* gx = grad_buf(*x);
            double* gg = grad_buf(*gain);
            double* gb = grad_buf(*bias);
            std::vector<double> xhat(C), dxhat(C);
            for (int r = 0; r < R; ++r) {
                const double* row = x->data.data() + static_cast<size_t>(r) * C;
                const double* gr = g + static_cast<size_t>(r) * C;
                const double mu = (*mean)[r], is = (*istd)[r];
                for (int c = 0; c < C; ++c) xhat[c] = (row[c] - mu) * is;
                if (gg)
                    for (int c = 0; c < C; ++c) gg[c] += gr[c] * xhat[c];
                if (gb)
                    for (int c = 0; c < C; ++c) gb[c] += gr[c];
                if (gx) {
                    double m1 = 0, m2 = 0;
                    for (int c = 0; c < C; ++c) {
                        dxhat[c] = gr[c] * gain->data[c];
                        m1 += dxhat[c];
                        m2 += dxhat[c] * xhat[c];
                    }
                    m1 /= C;
                    m2 /= C;
                    for (int c = 0; c < C; ++c)
                        gx[r * C + c] += is * (dxhat[c] - m1 - xhat[c] * m2);
                }
            }
        };
    }
    push_("layer_norm", out, std::move(back));
    return out;
}

TensorPtr Graph::mask_rows(const TensorPtr& a, const std::vector<int>& masked,
                           const TensorPtr& emb) {
    check_matrix("mask_rows", *a);
    const int R = a->rows(), C = a->cols();
    if (emb->rank() != 1 || emb->shape[0] != C)
        throw shape_error("mask_rows: embedding length does not match row width");
    for (int i : masked)
        if (i < 0 || i >= R) throw usage_error("mask_rows: masked index out of range");
    auto out = Tensor::make({R, C}, a->data);
    std::vector<char> is_masked(R, 0);
    for (int i : masked) is_masked[i] = 1;
    for (int r = 0; r < R; ++r)
        if (is_masked[r])
            std::memcpy(out->data.data() + static_cast<size_t>(r) * C, emb->data.data(),
                        sizeof(double) * C);
    out->needs_grad = any_needs({&a, &emb});
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, a, emb, out, is_masked = std::move(is_masked), R, C] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*a))
                for (int r = 0; r < R; ++r)
                    if (!is_masked[r])
                        for (int c = 0; c < C; ++c) ga[r * C + c] += g[r * C + c];
            if (double* ge = grad_buf(*emb))
                for (int r = 0; r < R; ++r)
                    if (is_masked[r])
                        for (int c = 0; c < C; ++c) ge[c] += g[r * C + c];
        };
    }
    push_("mask_rows", out, std::move(back));
    return out;
}

TensorPtr Graph::st_copy(const TensorPtr& grad_target, const std::vector<double>& forward_value) {
    if (static_cast<int64_t>(forward_value.size()) != grad_target->size())
        throw shape_error("st_copy: forward value length mismatch");
    auto out = Tensor::make(grad_target->shape, forward_value);
    out->needs_grad = wants_grad(grad_target);
    std::function<void()> back;
    if (out->needs_grad) {
        const int64_t n = out->size();
        back = [this, grad_target, out, n] {
            const double* g = out->grad.data();
            if (double* ga = grad_buf(*grad_target))
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        };
    }
    push_("st_copy", out, std::move(back));
    return out;
}

TensorPtr Graph::st_matmul(const TensorPtr& probs, const TensorPtr& codes,
                           const std::vector<int>& hard) {
    check_matrix("st_matmul", *probs);
    check_matrix("st_matmul", *codes);
    const int T = probs->rows(), V = probs->cols(), K = codes->cols();
    if (codes->rows() != V) throw shape_error("st_matmul: probs cols must equal codes rows");
    if (static_cast<int>(hard.size()) != T)
        throw shape_error("st_matmul: one hard index per row required");
    for (int h : hard)
        if (h < 0 || h >= V) throw shape_error("st_matmul: hard index out of range");
    auto out = Tensor::make({T, K});
    for (int t = 0; t < T; ++t)
        std::memcpy(out->data.data() + static_cast<size_t>(t) * K,
                    codes->data.data() + static_cast<size_t>(hard[t]) * K, sizeof(double) * K);
    out->needs_grad = any_needs({&probs, &codes});
    std::function<void()> back;
    if (out->needs_grad) {
        back = [this, probs, codes, out, T, V, K] {
            const double* g = out->grad.data();
            if (double* gp = grad_buf(*probs))
                gemm(g, T, K, false, codes->data.data(), V, K, true, gp, true);
            if (double* gc = grad_buf(*codes))
                gemm(probs->data.data(), T, V, true, g, T, K, false, gc, true);
        };
    }
    push_("st_matmul", out, std::move(back));
    return out;
}

void Graph::run_backward_(const TensorPtr& loss) {
    if (!loss->is_scalar()) throw usage_error("backward: loss must be scalar");
    // Reset intermediate grads so repeated calls over the same graph are
    // reproducible. Leaf tensors keep theirs; callers zero those explicitly.
    for (auto& node : nodes_) node.out->grad.clear();
    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (size_t i = nodes_.size(); i-- > 0;) {
        Node& node = nodes_[i];
        if (!node.back) continue;
        if (node.out->grad.empty()) continue; // nothing flowed into this node
        node.back();
    }
}

void Graph::backward(const TensorPtr& loss) {
    sink_ = nullptr;
    run_backward_(loss);
}

void Graph::backward(const TensorPtr& loss, GradSink& sink) {
    sink_ = &sink;
    run_backward_(loss);
    sink_ = nullptr;
}

std::optional<std::string> Graph::find_nonfinite() const {
    for (size_t i = 0; i < nodes_.size(); ++i)
        if (!nodes_[i].out->all_finite())
            return std::string(nodes_[i].op) + " (node " + std::to_string(i) + ")";
    return std::nullopt;
}

FiniteDiffReport finite_diff_check(const std::function<double()>& f,
                                   const std::vector<TensorPtr>& params, double step, double tol,
                                   double floor, int64_t max_entries_per_param) {
    FiniteDiffReport rep;
    rep.tol = tol;
    const double base0 = f();
    const double base1 = f();
    if (base0 != base1)
        throw numeric_error("finite_diff_check: objective is not deterministic (" +
                            std::to_string(base0) + " vs " + std::to_string(base1) + ")");
    for (const auto& p : params) {
        if (p->grad.empty())
            throw usage_error("finite_diff_check: parameter '" + p->name +
                              "' has no analytic gradient");
        double param_max = 0.0;
        const int64_t limit = max_entries_per_param > 0
                                  ? std::min<int64_t>(p->size(), max_entries_per_param)
                                  : p->size();
        for (int64_t i = 0; i < limit; ++i) {
            const double saved = p->data[i];
            p->data[i] = saved + step;
            const double fp = f();
            p->data[i] = saved - step;
            const double fm = f();
            p->data[i] = saved;
            const double numeric = (fp - fm) / (2.0 * step);
            const double analytic = p->grad[i];
            if (std::abs(numeric) < 1e-10 && std::abs(analytic) < 1e-10) {
                ++rep.skipped;
                continue;
            }
            ++rep.checked;
            // The denominator floor keeps central-difference cancellation
            // noise from dominating entries whose true gradient is tiny; a
            // corrupted small gradient still exceeds floor * tol by orders
            // of magnitude.
            const double rel = std::abs(analytic - numeric) /
                               std::max({std::abs(analytic), std::abs(numeric), floor});
            param_max = std::max(param_max, rel);
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = p->name;
                rep.worst_index = static_cast<int>(i);
                rep.worst_analytic = analytic;
                rep.worst_numeric = numeric;
            }
        }
        rep.per_param_max[p->name] = param_max;
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

} // namespace w2vc
