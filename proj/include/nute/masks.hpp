#pragma once

// Hard-concrete structural gates over heads, FFN intermediate columns and
// hidden channels, the expected-sparsity accounting they induce, the
// learnable Lagrangian constraint, and end-of-training binarization.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nute/model_config.hpp"
#include "nute/tensor.hpp"

namespace nute {

struct MaskSet {
    Tensor logalpha_head;  // [L, n_head]
    Tensor logalpha_int;   // [L, d_int]
    Tensor logalpha_hid;   // [d], shared by every layer
    real beta = real(2) / real(3);
    real l = real(-0.1);
    real r = real(1.1);

    // Gates start near-open (deterministic z ~= 1): sparsity grows from 0.
    static MaskSet init(const ModelConfig& cfg, real logalpha0 = real(2.5)) {
        MaskSet m;
        m.logalpha_head = Tensor::full({cfg.L, cfg.n_head}, logalpha0, true);
        m.logalpha_int = Tensor::full({cfg.L, cfg.d_int}, logalpha0, true);
        m.logalpha_hid = Tensor::full({cfg.d}, logalpha0, true);
        return m;
    }

    std::vector<Tensor> params() const { return {logalpha_head, logalpha_int, logalpha_hid}; }

    void validate() const {
        if (!(beta > 0)) throw config_error("MaskSet: beta must be > 0");
        if (!(l < 0)) throw config_error("MaskSet: l must be < 0");
        if (!(r > 1)) throw config_error("MaskSet: r must be > 1");
    }
};

// Gate values z in [0,1] for the three groups, differentiable w.r.t. the
// logalpha parameters they came from.
struct MaskValues {
    Tensor head;          // [L, n_head]
    Tensor intermediate;  // [L, d_int]
    Tensor hidden;        // [d]
};

namespace detail {

// u is clamped into [1e-6, 1-1e-6] so the logistic noise stays within about
// +-20.7 at beta=2/3; gates saturated to |logalpha| >= 40 then stay exactly
// 0/1 under any draw, which binarize() relies on.
inline constexpr real kGateNoiseClamp = real(1e-6);

inline Tensor gate_noise(const Shape& shape, real beta, Rng& rng) {
    Tensor n(shape);
    for (auto& x : n.val()) {
        real u = uniform01(rng);
        u = std::min(std::max(u, kGateNoiseClamp), real(1) - kGateNoiseClamp);
        x = std::log(u / (real(1) - u)) / beta;
    }
    return n;
}

// The stretch-and-clamp tail shared by both sampling paths:
// s = sigmoid(logits), stilde = s*(r-l)+l, z = clamp(stilde, 0, 1).
inline Tensor gate_from_logits(const Tensor& logits, real l, real r) {
    Tensor s = sigmoid(logits);
    Tensor stilde = add_scalar(mul_scalar(s, r - l), l);
    return clamp(stilde, 0, 1);
}

}  // namespace detail

// Fresh logistic noise per entry per call; draw order is fixed (head, then
// intermediate, then hidden, each row-major) so runs are reproducible.
inline MaskValues sample_masks(const MaskSet& m, Rng& rng) {
    auto gate = [&](const Tensor& la) {
        Tensor noise = detail::gate_noise(la.shape(), m.beta, rng);
        return detail::gate_from_logits(add(la, noise), m.l, m.r);
    };
    MaskValues z;
    z.head = gate(m.logalpha_head);
    z.intermediate = gate(m.logalpha_int);
    z.hidden = gate(m.logalpha_hid);
    return z;
}

// Noise-free path (u = 0.5): z = clamp(sigmoid(logalpha)*(r-l)+l, 0, 1).
inline MaskValues deterministic_masks(const MaskSet& m) {
    MaskValues z;
    z.head = detail::gate_from_logits(m.logalpha_head, m.l, m.r);
    z.intermediate = detail::gate_from_logits(m.logalpha_int, m.l, m.r);
    z.hidden = detail::gate_from_logits(m.logalpha_hid, m.l, m.r);
    return z;
}

// Probability that each gate lands strictly above zero under the sampling
// noise: P(z > 0) = sigmoid(beta*logalpha - beta*log(-l/r)). The sparsity
// penalty is computed on these expected-alive values rather than on one
// noisy draw: the probability is smooth in logalpha everywhere, so gates
// that have saturated (and would clamp to exactly 0/1 on almost every draw,
// starving a sampled penalty of gradient) still feel constraint pressure.
// It agrees with the deterministic gates in the limit |logalpha| -> inf.
inline MaskValues expected_alive_masks(const MaskSet& m) {
    const real shift = m.beta * std::log(-m.l / m.r);
    auto alive = [&](const Tensor& la) {
        return sigmoid(add_scalar(mul_scalar(la, m.beta), -shift));
    };
    MaskValues z;
    z.head = alive(m.logalpha_head);
    z.intermediate = alive(m.logalpha_int);
    z.hidden = alive(m.logalpha_hid);
    return z;
}

// Fraction of maskable weights still alive: each head costs 4*d_h weights
// per surviving hidden channel, each intermediate column 3. The factored
// form below equals the literal triple sum because z_hid distributes over
// both groups. With all-binary gates the numerator is an exact integer, so
// the result is the correctly rounded survivor/total ratio.
inline Tensor remaining_ratio(const MaskValues& z, const ModelConfig& cfg) {
    Tensor sh = sum_all(z.head);
    Tensor si = sum_all(z.intermediate);
    Tensor sk = sum_all(z.hidden);
    Tensor inner = add(mul_scalar(sh, real(4 * cfg.d_h)), mul_scalar(si, real(3)));
    return div_scalar(mul(inner, sk), real(maskable_param_count(cfg)));
}

// Learnable multipliers of the sparsity constraint. Updated by gradient
// ascent (the trainer negates their gradients), starting from zero.
struct LagrangianState {
    Tensor lambda1 = Tensor::scalar(0, true);
    Tensor lambda2 = Tensor::scalar(0, true);
    real t_current = 0;  // warmup-scaled target sparsity

    std::vector<Tensor> params() const { return {lambda1, lambda2}; }
    void validate() const {
        if (t_current < 0 || t_current > 1)
            throw config_error("LagrangianState: t_current must be in [0,1]");
    }
};

// lambda1*(s_hat - t) + lambda2*(s_hat - t)^2 where s_hat = 1 - remaining
// ratio is the achieved (removed) sparsity. Gradient reaches the gate
// parameters through rr and the multipliers directly.
inline Tensor lagrangian_loss(const Tensor& rr, const LagrangianState& lag) {
    Tensor shat = add_scalar(neg(rr), real(1));
    Tensor diff = add_scalar(shat, -lag.t_current);
    return add(mul(lag.lambda1, diff), mul(lag.lambda2, mul(diff, diff)));
}

// ---------------------------------------------------------------------------
// Binarization

namespace detail {

inline real det_gate_value(real logalpha, real beta, real l, real r) {
    (void)beta;  // the noise-free path does not involve the temperature
    const real s = real(1) / (real(1) + std::exp(-logalpha));
    return std::min(real(1), std::max(real(0), s * (r - l) + l));
}

}  // namespace detail

// Hard 0/1 gates: entries with deterministic z >= 0.5 survive. If the exact
// structural sparsity then misses the target by more than one percentage
// point, entries are greedily flipped toward the target — candidates ranked
// by |z - 0.5| scaled by the parameter count the flip moves (a whole head
// outweighs one FFN column), ties broken by lowest flat index, flips that
// do not bring the sparsity strictly closer are skipped. The result encodes
// survivors as logalpha = +40 and pruned entries as -40, which stay exactly
// 1/0 under both mask paths, and is frozen (requires_grad off).
inline MaskSet binarize(const MaskSet& m, real target, const ModelConfig& cfg) {
    const int64_t L = cfg.L, NH = cfg.n_head, DI = cfg.d_int, D = cfg.d;
    const int64_t n_head_entries = L * NH, n_int_entries = L * DI;

    // Deterministic gate values and initial survivor flags, in flat-index
    // order: heads, then intermediate columns, then hidden channels.
    const int64_t total = n_head_entries + n_int_entries + D;
    std::vector<real> zval(total);
    std::vector<char> alive(total);
    auto fill = [&](const Tensor& la, int64_t base) {
        for (int64_t i = 0; i < la.numel(); ++i) {
            zval[base + i] = detail::det_gate_value(la.val()[i], m.beta, m.l, m.r);
            alive[base + i] = zval[base + i] >= real(0.5) ? 1 : 0;
        }
    };
    fill(m.logalpha_head, 0);
    fill(m.logalpha_int, n_head_entries);
    fill(m.logalpha_hid, n_head_entries + n_int_entries);

    auto counts = [&]() {
        int64_t H = 0, I = 0, K = 0;
        for (int64_t i = 0; i < n_head_entries; ++i) H += alive[i];
        for (int64_t i = 0; i < n_int_entries; ++i) I += alive[n_head_entries + i];
        for (int64_t i = 0; i < D; ++i) K += alive[n_head_entries + n_int_entries + i];
        return std::array<int64_t, 3>{H, I, K};
    };
    const real M = real(maskable_param_count(cfg));
    auto sparsity_of = [&](int64_t H, int64_t I, int64_t K) {
        return real(1) - real((4 * cfg.d_h * H + 3 * I) * K) / M;
    };

    auto [H, I, K] = counts();
    real spars = sparsity_of(H, I, K);
    const real tol = real(0.01);

    // Up-front feasibility: some (heads, intermediate, hidden >= 1) count
    // triple must land inside the tolerance band, otherwise no sequence of
    // flips can and we reject rather than walk in circles.
    if (std::abs(spars - target) > tol) {
        const real Slo = real(maskable_param_count(cfg)) * (real(1) - target - tol);
        const real Shi = real(maskable_param_count(cfg)) * (real(1) - target + tol);
        bool feasible = false;
        for (int64_t h = 0; h <= L * NH && !feasible; ++h)
            for (int64_t k = 1; k <= D && !feasible; ++k) {
                // need 4*d_h*h*k + 3*i*k in [Slo, Shi] for some 0 <= i <= L*DI
                const real ilo = (Slo / real(k) - real(4 * cfg.d_h * h)) / real(3);
                const real ihi = (Shi / real(k) - real(4 * cfg.d_h * h)) / real(3);
                const int64_t a = std::max<int64_t>(0, int64_t(std::ceil(ilo)));
                const int64_t b = std::min<int64_t>(L * DI, int64_t(std::floor(ihi)));
                feasible = a <= b;
            }
        if (!feasible)
            throw train_error(
                "binarize: no head/intermediate/hidden structure within one point of the "
                "target sparsity (without pruning every hidden channel)");
    }

    // Greedy walk toward the target. Each iteration flips the cheapest entry
    // in whichever direction the sparsity is off; a coarse flip (a whole
    // head) may overshoot and is then compensated by finer flips back. Every
    // entry may flip at most once per direction, which bounds the walk and
    // rules out ping-pong.
    std::vector<char> used_prune(total, 0), used_revive(total, 0);
    while (std::abs(spars - target) > tol) {
        const bool prune_more = spars < target;
        int64_t best = -1;
        real best_key = 0;
        real best_new_spars = spars;
        for (int64_t i = 0; i < total; ++i) {
            if (alive[i] != (prune_more ? 1 : 0)) continue;  // wrong direction
            if ((prune_more ? used_prune : used_revive)[i]) continue;
            const bool is_hid = i >= n_head_entries + n_int_entries;
            if (prune_more && is_hid && K == 1) continue;  // never empty the residual stream
            // marginal parameter count this flip moves, at current counts
            int64_t delta;
            if (i < n_head_entries)
                delta = 4 * cfg.d_h * K;
            else if (!is_hid)
                delta = 3 * K;
            else
                delta = 4 * cfg.d_h * H + 3 * I;
            if (delta == 0) continue;  // flip would move nothing
            int64_t nH = H, nI = I, nK = K;
            const int dir = prune_more ? -1 : +1;
            if (i < n_head_entries)
                nH += dir;
            else if (!is_hid)
                nI += dir;
            else
                nK += dir;
            const real key = std::abs(zval[i] - real(0.5)) * real(delta);
            if (best < 0 || key < best_key) {
                best = i;
                best_key = key;
                best_new_spars = sparsity_of(nH, nI, nK);
            }
        }
        if (best < 0)
            throw train_error("binarize: greedy flips exhausted outside the target band");
        (prune_more ? used_prune : used_revive)[best] = 1;
        alive[best] ^= 1;
        auto c = counts();
        H = c[0];
        I = c[1];
        K = c[2];
        spars = best_new_spars;
    }
    if (K == 0) throw train_error("binarize: all hidden channels pruned");

    MaskSet out;
    out.beta = m.beta;
    out.l = m.l;
    out.r = m.r;
    auto emit = [&](const Shape& shape, int64_t base) {
        Tensor t(shape);
        for (int64_t i = 0; i < t.numel(); ++i)
            t.val()[i] = alive[base + i] ? real(40) : real(-40);
        return t;
    };
    out.logalpha_head = emit(m.logalpha_head.shape(), 0);
    out.logalpha_int = emit(m.logalpha_int.shape(), n_head_entries);
    out.logalpha_hid = emit(m.logalpha_hid.shape(), n_head_entries + n_int_entries);
    return out;
}

}  // namespace nute
