#pragma once

// AdamW with bias correction and decoupled weight decay. Per-parameter state
// lives alongside the parameter list and is visited strictly in list order,
// so updates are bit-deterministic.

#include <cmath>
#include <cstdint>
#include <vector>

#include "nute/tensor.hpp"

namespace nute {

class AdamW {
public:
    struct Options {
        real lr = real(1e-3);
        real beta1 = real(0.9);
        real beta2 = real(0.999);
        real eps = real(1e-8);
        real weight_decay = 0;
        bool maximize = false;  // gradient ascent (the Lagrangian multipliers)
    };

    AdamW(std::vector<Tensor> params, Options opt) : params_(std::move(params)), opt_(opt) {
        state_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            state_[i].m.assign(size_t(params_[i].numel()), 0);
            state_[i].v.assign(size_t(params_[i].numel()), 0);
        }
    }

    const std::vector<Tensor>& params() const { return params_; }
    int64_t step_count() const { return t_; }

    // Applies one update from the gradients currently stored on the
    // parameters. Parameters whose gradient buffer is empty (not touched by
    // the last backward) are skipped.
    void step() {
        ++t_;
        const real bc1 = real(1) - std::pow(opt_.beta1, real(t_));
        const real bc2 = real(1) - std::pow(opt_.beta2, real(t_));
        for (size_t p = 0; p < params_.size(); ++p) {
            Tensor& par = params_[p];
            if (par.grad().empty()) continue;
            auto& st = state_[p];
            for (int64_t i = 0; i < par.numel(); ++i) {
                const real g = opt_.maximize ? -par.grad()[i] : par.grad()[i];
                st.m[i] = opt_.beta1 * st.m[i] + (real(1) - opt_.beta1) * g;
                st.v[i] = opt_.beta2 * st.v[i] + (real(1) - opt_.beta2) * g * g;
                const real mhat = st.m[i] / bc1;
                const real vhat = st.v[i] / bc2;
                par.val()[i] -=
                    opt_.lr * (mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * par.val()[i]);
            }
        }
    }

private:
    struct State {
        std::vector<real> m, v;
    };
    std::vector<Tensor> params_;
    std::vector<State> state_;
    Options opt_;
    int64_t t_ = 0;
};

// Global L2-norm gradient clip over a parameter group. Returns the norm seen
// before clipping (callers log it or test against it).
inline real clip_grad_norm(const std::vector<Tensor>& params, real max_norm) {
    real sq = 0;
    for (const Tensor& p : params)
        for (real g : p.grad()) sq += g * g;
    const real norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        const real scale = max_norm / norm;
        for (const Tensor& p : params) {
            Tensor t = p;
            for (auto& g : t.grad()) g *= scale;
        }
    }
    return norm;
}

// True when every gradient entry of every parameter is finite.
inline bool grads_finite(const std::vector<Tensor>& params) {
    for (const Tensor& p : params)
        for (real g : p.grad())
            if (!std::isfinite(g)) return false;
    return true;
}

}  // namespace nute
