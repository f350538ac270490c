#pragma once

// Reverse-mode autodiff over dense row-major tensors.
//
// The graph is define-by-run: while a Graph is in scope, every primitive
// applied to a tensor that requires grad appends a node (output, inputs,
// backward closure) to a tape. backward() seeds the scalar root with 1 and
// replays the tape in reverse, accumulating with += so shared subexpressions
// and duplicated leaves come out right. The tape is rebuilt from scratch each
// step; forwards that run with no graph in scope (or under NoGrad) record
// nothing, which is how teacher passes stay constant.
//
// Everything is sequential and allocation-order independent, so gradients are
// bit-identical across runs of the same build given the same seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "nute/common.hpp"

namespace nute {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

struct TensorImpl {
    Shape shape;
    std::vector<real> val;
    std::vector<real> grad;  // sized lazily by backward()
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, bool requires_grad = false)
        : p_(std::make_shared<TensorImpl>()) {
        p_->shape = std::move(shape);
        p_->val.assign(static_cast<size_t>(shape_numel(p_->shape)), real(0));
        p_->requires_grad = requires_grad;
    }

    static Tensor scalar(real v, bool requires_grad = false) {
        Tensor t(Shape{}, requires_grad);
        t.p_->val[0] = v;
        return t;
    }
    static Tensor from(Shape shape, std::vector<real> data, bool requires_grad = false) {
        Tensor t(std::move(shape), requires_grad);
        if (static_cast<int64_t>(data.size()) != t.numel())
            throw shape_error("Tensor::from: data size " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(t.shape()));
        t.p_->val = std::move(data);
        return t;
    }
    static Tensor full(Shape shape, real v, bool requires_grad = false) {
        Tensor t(std::move(shape), requires_grad);
        std::fill(t.p_->val.begin(), t.p_->val.end(), v);
        return t;
    }
    static Tensor randn(Shape shape, Rng& rng, real mean = 0, real stddev = 1,
                        bool requires_grad = false) {
        Tensor t(std::move(shape), requires_grad);
        for (auto& x : t.p_->val) x = normal(rng, mean, stddev);
        return t;
    }

    bool defined() const { return static_cast<bool>(p_); }
    const Shape& shape() const { return p_->shape; }
    int64_t numel() const { return static_cast<int64_t>(p_->val.size()); }
    int64_t dim(size_t i) const { return p_->shape[i]; }
    size_t rank() const { return p_->shape.size(); }

    std::vector<real>& val() { return p_->val; }
    const std::vector<real>& val() const { return p_->val; }
    std::vector<real>& grad() { return p_->grad; }
    const std::vector<real>& grad() const { return p_->grad; }

    real item() const {
        if (numel() != 1)
            throw shape_error("item: tensor " + shape_str(shape()) + " is not a scalar");
        return p_->val[0];
    }

    bool requires_grad() const { return p_->requires_grad; }
    void set_requires_grad(bool b) { p_->requires_grad = b; }

    std::shared_ptr<TensorImpl> impl() const { return p_; }

private:
    std::shared_ptr<TensorImpl> p_;
};

// ---------------------------------------------------------------------------
// Tape

class Graph {
public:
    Graph() : prev_(tls_current()) { tls_current() = this; }
    ~Graph() { tls_current() = prev_; }
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    static Graph* current() { return tls_current(); }

    struct Node {
        std::shared_ptr<TensorImpl> out;
        std::vector<std::shared_ptr<TensorImpl>> ins;
        std::function<void()> back;
    };

    void record(Node n) { tape_.push_back(std::move(n)); }
    size_t size() const { return tape_.size(); }

    // Seeds d root / d root = 1 and walks the tape in reverse. All tensors
    // referenced by the tape get their grad buffer (re)zeroed first, so
    // leaves that never influenced the root report zero rather than stale
    // values from a previous step.
    void backward(const Tensor& root) {
        if (root.numel() != 1)
            throw shape_error("backward: root must be a scalar, got " + shape_str(root.shape()));
        for (auto& n : tape_) {
            n.out->grad.assign(n.out->val.size(), real(0));
            for (auto& in : n.ins)
                if (in->requires_grad) in->grad.assign(in->val.size(), real(0));
        }
        auto rp = root.impl();
        rp->grad.assign(rp->val.size(), real(0));
        rp->grad[0] = real(1);
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) it->back();
    }

private:
    static Graph*& tls_current() {
        thread_local Graph* g = nullptr;
        return g;
    }
    Graph* prev_;
    std::vector<Node> tape_;
};

// Suspends recording for the enclosed scope (teacher forwards, evaluation).
class NoGrad {
public:
    NoGrad() : saved_(slot()) { slot() = true; }
    ~NoGrad() { slot() = saved_; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;
    static bool active() { return slot(); }

private:
    static bool& slot() {
        thread_local bool s = false;
        return s;
    }
    bool saved_;
};

namespace detail {

inline bool tracing(std::initializer_list<Tensor> ins) {
    if (!Graph::current() || NoGrad::active()) return false;
    for (const auto& t : ins)
        if (t.requires_grad()) return true;
    return false;
}

inline void record(Tensor out, std::initializer_list<Tensor> ins, std::function<void()> back) {
    Graph::Node n;
    n.out = out.impl();
    for (const auto& t : ins) n.ins.push_back(t.impl());
    n.back = std::move(back);
    Graph::current()->record(std::move(n));
}

// Right-aligned broadcast of b's shape against a's: returns, for every dim of
// a, the stride into b (0 where b is broadcast). Throws if b does not
// broadcast to a.
inline std::vector<int64_t> broadcast_strides(const Shape& a, const Shape& b, const char* op) {
    if (b.size() > a.size())
        throw shape_error(std::string(op) + ": second operand " + shape_str(b) +
                          " has higher rank than first " + shape_str(a));
    std::vector<int64_t> stride(a.size(), 0);
    int64_t run = 1;
    // Walk b from the last dim; record real strides, then check alignment.
    std::vector<int64_t> bstride(b.size());
    for (size_t i = b.size(); i-- > 0;) {
        bstride[i] = run;
        run *= b[i];
    }
    size_t off = a.size() - b.size();
    for (size_t i = 0; i < b.size(); ++i) {
        if (b[i] == a[off + i])
            stride[off + i] = bstride[i];
        else if (b[i] == 1)
            stride[off + i] = 0;
        else
            throw shape_error(std::string(op) + ": cannot broadcast " + shape_str(b) + " to " +
                              shape_str(a));
    }
    return stride;
}

// Applies f(ai, bi) over a's index space where bi follows broadcast strides.
template <class F>
inline void for_each_broadcast(const Shape& ashape, const std::vector<int64_t>& bstride, F&& f) {
    const size_t r = ashape.size();
    const int64_t n = shape_numel(ashape);
    std::vector<int64_t> idx(r, 0);
    int64_t bi = 0;
    for (int64_t ai = 0; ai < n; ++ai) {
        f(ai, bi);
        // odometer increment, updating bi incrementally
        for (size_t d = r; d-- > 0;) {
            ++idx[d];
            bi += bstride[d];
            if (idx[d] < ashape[d]) break;
            bi -= bstride[d] * ashape[d];
            idx[d] = 0;
            if (d == 0) break;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops. The second operand broadcasts to the first
// (numpy-style, right-aligned); its gradient is sum-reduced back over the
// broadcast dims by the same index walk run in reverse.

namespace detail {

template <class Fwd, class BackA, class BackB>
inline Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, BackA ba,
                        BackB bb) {
    auto bstride = broadcast_strides(a.shape(), b.shape(), name);
    Tensor out(a.shape());
    const auto& av = a.val();
    const auto& bv = b.val();
    auto& ov = out.val();
    for_each_broadcast(a.shape(), bstride,
                       [&](int64_t ai, int64_t bi) { ov[ai] = fwd(av[ai], bv[bi]); });
    if (tracing({a, b})) {
        out.set_requires_grad(true);
        // init-captures: a plain [=] would capture the const refs as const
        record(out, {a, b}, [=, a = a, b = b, out = out]() mutable {
            const auto& g = out.grad();
            for_each_broadcast(a.shape(), bstride, [&](int64_t ai, int64_t bi) {
                if (a.requires_grad()) a.grad()[ai] += ba(g[ai], a.val()[ai], b.val()[bi]);
                if (b.requires_grad()) b.grad()[bi] += bb(g[ai], a.val()[ai], b.val()[bi]);
            });
        });
    }
    return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "add", a, b, [](real x, real y) { return x + y; },
        [](real g, real, real) { return g; }, [](real g, real, real) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "sub", a, b, [](real x, real y) { return x - y; },
        [](real g, real, real) { return g; }, [](real g, real, real) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "mul", a, b, [](real x, real y) { return x * y; },
        [](real g, real, real y) { return g * y; }, [](real g, real x, real) { return g * x; });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.

namespace detail {

// dfn receives (output value, input value) so cheap forms like y*(1-y) apply.
template <class Fwd, class Back>
inline Tensor unary_op(const Tensor& a, Fwd fwd, Back dfn) {
    Tensor out(a.shape());
    const auto& av = a.val();
    auto& ov = out.val();
    for (int64_t i = 0; i < a.numel(); ++i) ov[i] = fwd(av[i]);
    if (tracing({a})) {
        out.set_requires_grad(true);
        record(out, {a}, [=, a = a, out = out]() mutable {
            const auto& g = out.grad();
            auto& ag = a.grad();
            for (int64_t i = 0; i < a.numel(); ++i) ag[i] += g[i] * dfn(out.val()[i], a.val()[i]);
        });
    }
    return out;
}

}  // namespace detail

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        a, [](real x) { return real(1) / (real(1) + std::exp(-x)); },
        [](real y, real) { return y * (real(1) - y); });
}

inline Tensor tanh(const Tensor& a) {
    return detail::unary_op(a, [](real x) { return std::tanh(x); },
                            [](real y, real) { return real(1) - y * y; });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(a, [](real x) { return std::exp(x); },
                            [](real y, real) { return y; });
}

inline Tensor log(const Tensor& a) {
    return detail::unary_op(a, [](real x) { return std::log(x); },
                            [](real, real x) { return real(1) / x; });
}

inline Tensor neg(const Tensor& a) {
    return detail::unary_op(a, [](real x) { return -x; }, [](real, real) { return real(-1); });
}

// Gradient passes through strictly inside (lo, hi) and is zero elsewhere,
// boundaries included — the convention the gate construction relies on.
inline Tensor clamp(const Tensor& a, real lo, real hi) {
    return detail::unary_op(
        a, [=](real x) { return std::min(std::max(x, lo), hi); },
        [=](real, real x) { return (x > lo && x < hi) ? real(1) : real(0); });
}

inline Tensor add_scalar(const Tensor& a, real c) {
    return detail::unary_op(a, [=](real x) { return x + c; }, [](real, real) { return real(1); });
}

inline Tensor mul_scalar(const Tensor& a, real c) {
    return detail::unary_op(a, [=](real x) { return x * c; }, [=](real, real) { return c; });
}

// True division (not multiplication by a reciprocal): integer-valued ratios
// like surviving/total parameter counts stay correctly rounded.
inline Tensor div_scalar(const Tensor& a, real c) {
    return detail::unary_op(a, [=](real x) { return x / c; },
                            [=](real, real) { return real(1) / c; });
}

// ---------------------------------------------------------------------------
// Shape ops (both take and produce contiguous copies).

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw shape_error("reshape: cannot view " + shape_str(a.shape()) + " as " +
                          shape_str(shape));
    Tensor out(std::move(shape));
    out.val() = a.val();
    if (detail::tracing({a})) {
        out.set_requires_grad(true);
        detail::record(out, {a}, [a = a, out = out]() mutable {
            auto& ag = a.grad();
            const auto& g = out.grad();
            for (int64_t i = 0; i < a.numel(); ++i) ag[i] += g[i];
        });
    }
    return out;
}

inline Tensor permute(const Tensor& a, std::vector<size_t> axes) {
    const size_t r = a.rank();
    if (axes.size() != r)
        throw shape_error("permute: got " + std::to_string(axes.size()) + " axes for rank " +
                          std::to_string(r) + " tensor " + shape_str(a.shape()));
    {
        std::vector<bool> seen(r, false);
        for (size_t ax : axes) {
            if (ax >= r || seen[ax]) throw shape_error("permute: invalid axis list");
            seen[ax] = true;
        }
    }
    Shape oshape(r);
    for (size_t i = 0; i < r; ++i) oshape[i] = a.dim(axes[i]);

    std::vector<int64_t> astride(r, 1);
    for (size_t i = r - 1; i-- > 0;) astride[i] = astride[i + 1] * a.dim(i + 1);
    // stride into a for each output dim
    std::vector<int64_t> ostride(r);
    for (size_t i = 0; i < r; ++i) ostride[i] = astride[axes[i]];

    Tensor out(oshape);
    const auto& av = a.val();
    auto& ov = out.val();
    detail::for_each_broadcast(oshape, ostride,
                               [&](int64_t oi, int64_t ai) { ov[oi] = av[ai]; });
    if (detail::tracing({a})) {
        out.set_requires_grad(true);
        detail::record(out, {a}, [=, a = a, out = out]() mutable {
            auto& ag = a.grad();
            const auto& g = out.grad();
            detail::for_each_broadcast(oshape, ostride,
                                       [&](int64_t oi, int64_t ai) { ag[ai] += g[oi]; });
        });
    }
    return out;
}

// Picks row r of a rank-2 tensor as a rank-1 view copy; backward scatters
// into that row only.
inline Tensor row(const Tensor& a, int64_t r) {
    if (a.rank() != 2)
        throw shape_error("row: expected rank-2 tensor, got " + shape_str(a.shape()));
    if (r < 0 || r >= a.dim(0))
        throw shape_error("row: index " + std::to_string(r) + " out of range for " +
                          shape_str(a.shape()));
    const int64_t D = a.dim(1);
    Tensor out(Shape{D});
    std::copy_n(a.val().data() + r * D, D, out.val().data());
    if (detail::tracing({a})) {
        out.set_requires_grad(true);
        detail::record(out, {a}, [=, a = a, out = out]() mutable {
            auto& ag = a.grad();
            const auto& g = out.grad();
            for (int64_t j = 0; j < D; ++j) ag[r * D + j] += g[j];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix multiply: a is [..., M, K]; b is [K, N] (shared across the batch) or
// [..., K, N] with leading dims equal to a's. Inner loops run in i-k-j order
// so the innermost accesses are contiguous.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw shape_error("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                          " and " + shape_str(b.shape()));
    const int64_t M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1);
    const int64_t Kb = b.dim(b.rank() - 2), N = b.dim(b.rank() - 1);
    const bool shared_b = (b.rank() == 2);
    if (Kb != K)
        throw shape_error("matmul: inner dims disagree, " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
    if (!shared_b) {
        if (b.rank() != a.rank())
            throw shape_error("matmul: batched operands must have equal rank, " +
                              shape_str(a.shape()) + " x " + shape_str(b.shape()));
        for (size_t i = 0; i + 2 < a.rank(); ++i)
            if (a.dim(i) != b.dim(i))
                throw shape_error("matmul: batch dims disagree, " + shape_str(a.shape()) + " x " +
                                  shape_str(b.shape()));
    }
    Shape oshape(a.shape());
    oshape[a.rank() - 1] = N;
    const int64_t batch = a.numel() / (M * K);

    Tensor out(oshape);
    {
        const real* A = a.val().data();
        const real* B = b.val().data();
        real* C = out.val().data();
        for (int64_t bb = 0; bb < batch; ++bb) {
            const real* Ab = A + bb * M * K;
            const real* Bb = shared_b ? B : B + bb * K * N;
            real* Cb = C + bb * M * N;
            for (int64_t i = 0; i < M; ++i) {
                real* c = Cb + i * N;
                for (int64_t k = 0; k < K; ++k) {
                    const real av = Ab[i * K + k];
                    const real* brow = Bb + k * N;
                    for (int64_t j = 0; j < N; ++j) c[j] += av * brow[j];
                }
            }
        }
    }
    if (detail::tracing({a, b})) {
        out.set_requires_grad(true);
        detail::record(out, {a, b}, [=, a = a, b = b, out = out]() mutable {
            const real* A = a.val().data();
            const real* B = b.val().data();
            const real* G = out.grad().data();
            for (int64_t bb = 0; bb < batch; ++bb) {
                const real* Ab = A + bb * M * K;
                const real* Bb = shared_b ? B : B + bb * K * N;
                const real* Gb = G + bb * M * N;
                if (a.requires_grad()) {
                    real* dA = a.grad().data() + bb * M * K;
                    // dA = G * B^T
                    for (int64_t i = 0; i < M; ++i)
                        for (int64_t k = 0; k < K; ++k) {
                            real s = 0;
                            const real* g = Gb + i * N;
                            const real* brow = Bb + k * N;
                            for (int64_t j = 0; j < N; ++j) s += g[j] * brow[j];
                            dA[i * K + k] += s;
                        }
                }
                if (b.requires_grad()) {
                    real* dB = b.grad().data() + (shared_b ? 0 : bb * K * N);
                    // dB += A^T * G
                    for (int64_t i = 0; i < M; ++i)
                        for (int64_t k = 0; k < K; ++k) {
                            const real av = Ab[i * K + k];
                            const real* g = Gb + i * N;
                            real* drow = dB + k * N;
                            for (int64_t j = 0; j < N; ++j) drow[j] += av * g[j];
                        }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and row-wise softmax family (always over the last dim).

inline Tensor sum_all(const Tensor& a) {
    Tensor out(Shape{});
    real s = 0;
    for (real x : a.val()) s += x;
    out.val()[0] = s;
    if (detail::tracing({a})) {
        out.set_requires_grad(true);
        detail::record(out, {a}, [a = a, out = out]() mutable {
            const real g = out.grad()[0];
            auto& ag = a.grad();
            for (int64_t i = 0; i < a.numel(); ++i) ag[i] += g;
        });
    }
    return out;
}

inline Tensor mean_all(const Tensor& a) {
    if (a.numel() == 0) throw shape_error("mean_all: empty tensor");
    return mul_scalar(sum_all(a), real(1) / real(a.numel()));
}

inline Tensor sum_last(const Tensor& a) {
    if (a.rank() < 1) throw shape_error("sum_last: scalar input");
    const int64_t D = a.dim(a.rank() - 1);
    Shape oshape(a.shape().begin(), a.shape().end() - 1);
    const int64_t rows = shape_numel(oshape);
    Tensor out(oshape);
    for (int64_t r = 0; r < rows; ++r) {
        real s = 0;
        for (int64_t j = 0; j < D; ++j) s += a.val()[r * D + j];
        out.val()[r] = s;
    }
    if (detail::tracing({a})) {
        out.set_requires_grad(true);
        detail::record(out, {a}, [=, a = a, out = out]() mutable {
            auto& ag = a.grad();
            const auto& g = out.grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < D; ++j) ag[r * D + j] += g[r];
        });
    }
    return out;
}

namespace detail {

// Row-stable softmax shared by softmax()/log_softmax(). Backward for
// softmax: dx = y * (g - sum(g*y)); for log_softmax: dx = g - softmax * sum(g).
inline Tensor softmax_impl(const Tensor& a, bool log_form) {
    if (a.rank() < 1) throw shape_error("softmax: scalar input");
    const int64_t D = a.dim(a.rank() - 1);
    const int64_t rows = a.numel() / D;
    Tensor out(a.shape());
    const auto& av = a.val();
    auto& ov = out.val();
    for (int64_t r = 0; r < rows; ++r) {
        const real* x = av.data() + r * D;
        real* y = ov.data() + r * D;
        real mx = x[0];
        for (int64_t j = 1; j < D; ++j) mx = std::max(mx, x[j]);
        real z = 0;
        for (int64_t j = 0; j < D; ++j) z += std::exp(x[j] - mx);
        const real lz = std::log(z);
        for (int64_t j = 0; j < D; ++j)
            y[j] = log_form ? (x[j] - mx - lz) : std::exp(x[j] - mx) / z;
    }
    if (tracing({a})) {
        out.set_requires_grad(true);
        record(out, {a}, [=, a = a, out = out]() mutable {
            auto& ag = a.grad();
            const auto& g = out.grad();
            const auto& y = out.val();
            for (int64_t r = 0; r < rows; ++r) {
                real dot = 0;
                if (log_form) {
                    for (int64_t j = 0; j < D; ++j) dot += g[r * D + j];
                    for (int64_t j = 0; j < D; ++j)
                        ag[r * D + j] += g[r * D + j] - std::exp(y[r * D + j]) * dot;
                } else {
                    for (int64_t j = 0; j < D; ++j) dot += g[r * D + j] * y[r * D + j];
                    for (int64_t j = 0; j < D; ++j)
                        ag[r * D + j] += y[r * D + j] * (g[r * D + j] - dot);
                }
            }
        });
    }
    return out;
}

}  // namespace detail

inline Tensor softmax(const Tensor& a) { return detail::softmax_impl(a, false); }
inline Tensor log_softmax(const Tensor& a) { return detail::softmax_impl(a, true); }

// ---------------------------------------------------------------------------
// Integer id array (token ids, targets). Not differentiable.

struct IdArray {
    Shape shape;
    std::vector<int32_t> v;
    int64_t numel() const { return static_cast<int64_t>(v.size()); }
};

// Row lookup: table [V, D], ids [...] -> [..., D]. Backward scatter-adds into
// the looked-up rows.
inline Tensor embedding(const Tensor& table, const IdArray& ids) {
    if (table.rank() != 2)
        throw shape_error("embedding: table must be [V,D], got " + shape_str(table.shape()));
    const int64_t V = table.dim(0), D = table.dim(1);
    Shape oshape = ids.shape;
    oshape.push_back(D);
    Tensor out(oshape);
    for (int64_t i = 0; i < ids.numel(); ++i) {
        const int32_t id = ids.v[i];
        if (id < 0 || id >= V)
            throw shape_error("embedding: id " + std::to_string(id) + " out of range for table " +
                              shape_str(table.shape()));
        std::copy_n(table.val().data() + int64_t(id) * D, D, out.val().data() + i * D);
    }
    if (detail::tracing({table})) {
        out.set_requires_grad(true);
        auto idv = ids.v;  // copy: ids outlive via closure
        detail::record(out, {table}, [=, table = table, out = out]() mutable {
            auto& tg = table.grad();
            const auto& g = out.grad();
            for (size_t i = 0; i < idv.size(); ++i) {
                real* row = tg.data() + int64_t(idv[i]) * D;
                const real* go = g.data() + int64_t(i) * D;
                for (int64_t j = 0; j < D; ++j) row[j] += go[j];
            }
        });
    }
    return out;
}

// Picks -x[..., id] per row from row-wise log-probabilities: the building
// block for cross-entropy. ids must have exactly the leading shape of x.
inline Tensor nll_last(const Tensor& logp, const IdArray& ids) {
    if (logp.rank() < 1) throw shape_error("nll_last: scalar input");
    const int64_t D = logp.dim(logp.rank() - 1);
    const int64_t rows = logp.numel() / D;
    if (ids.numel() != rows)
        throw shape_error("nll_last: ids count " + std::to_string(ids.numel()) +
                          " does not match rows of " + shape_str(logp.shape()));
    Shape oshape(logp.shape().begin(), logp.shape().end() - 1);
    Tensor out(oshape);
    for (int64_t r = 0; r < rows; ++r) {
        const int32_t id = ids.v[r];
        if (id < 0 || id >= D)
            throw shape_error("nll_last: id " + std::to_string(id) + " out of range " +
                              std::to_string(D));
        out.val()[r] = -logp.val()[r * D + id];
    }
    if (detail::tracing({logp})) {
        out.set_requires_grad(true);
        auto idv = ids.v;
        detail::record(out, {logp}, [=, logp = logp, out = out]() mutable {
            auto& lg = logp.grad();
            const auto& g = out.grad();
            for (int64_t r = 0; r < rows; ++r) lg[r * D + idv[r]] -= g[r];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// RMS normalization over the last dim with a learnable gain, fused into one
// node. The mean square uses an explicit divisor rather than the dim size:
// a network sliced down to fewer channels keeps the original divisor so its
// activations match the masked network it came from.
inline Tensor rmsnorm(const Tensor& x, const Tensor& gain, real divisor, real eps = 1e-6) {
    if (x.rank() < 1 || gain.rank() != 1 || gain.dim(0) != x.dim(x.rank() - 1))
        throw shape_error("rmsnorm: gain " + shape_str(gain.shape()) + " does not match input " +
                          shape_str(x.shape()));
    if (divisor <= 0) throw shape_error("rmsnorm: divisor must be positive");
    const int64_t D = x.dim(x.rank() - 1);
    const int64_t rows = x.numel() / D;
    Tensor out(x.shape());
    std::vector<real> inv_rms(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const real* xr = x.val().data() + r * D;
        real ss = 0;
        for (int64_t j = 0; j < D; ++j) ss += xr[j] * xr[j];
        const real inv = real(1) / std::sqrt(ss / divisor + eps);
        inv_rms[r] = inv;
        real* yr = out.val().data() + r * D;
        for (int64_t j = 0; j < D; ++j) yr[j] = xr[j] * inv * gain.val()[j];
    }
    if (detail::tracing({x, gain})) {
        out.set_requires_grad(true);
        detail::record(out, {x, gain}, [=, x = x, gain = gain, out = out]() mutable {
            const auto& g = out.grad();
            for (int64_t r = 0; r < rows; ++r) {
                const real* xr = x.val().data() + r * D;
                const real* gr = g.data() + r * D;
                const real inv = inv_rms[r];
                if (gain.requires_grad()) {
                    auto& gg = gain.grad();
                    for (int64_t j = 0; j < D; ++j) gg[j] += gr[j] * xr[j] * inv;
                }
                if (x.requires_grad()) {
                    // y_j = x_j * inv * w_j, inv = (sum x^2 / divisor + eps)^-1/2
                    // dx_k = inv * w_k * g_k - (inv^3 / divisor) * x_k * sum_j(g_j w_j x_j)
                    real dot = 0;
                    for (int64_t j = 0; j < D; ++j) dot += gr[j] * gain.val()[j] * xr[j];
                    const real c = inv * inv * inv / divisor * dot;
                    auto& xg = x.grad();
                    for (int64_t j = 0; j < D; ++j)
                        xg[r * D + j] += inv * gain.val()[j] * gr[j] - c * xr[j];
                }
            }
        });
    }
    return out;
}

// x * sigmoid(x), composed so it stays a two-node subgraph.
inline Tensor silu(const Tensor& x) { return mul(x, sigmoid(x)); }

}  // namespace nute
