#pragma once

// Low-rank adapters: the only trainable dense parameters. Each adapted
// projection computes W(X) + W_B(W_A(X)); merge() folds the pair back into a
// dense matrix when a snapshot is sliced into a standalone model.

#include <array>
#include <cstdint>
#include <vector>

#include "nute/model_config.hpp"
#include "nute/tensor.hpp"

namespace nute {

// A: [n, r], B: [r, m] for a base projection W: [n, m] applied as X*W.
struct LoraPair {
    Tensor A, B;
};

// X*W + scale * (X*A)*B. W is expected to be frozen; gradients then reach
// only the pair.
inline Tensor lora_apply(const Tensor& W, const LoraPair& p, const Tensor& X, real scale = 1) {
    Tensor low = matmul(matmul(X, p.A), p.B);
    if (scale != real(1)) low = mul_scalar(low, scale);
    return add(matmul(X, W), low);
}

// W + scale * A*B as a plain dense tensor (no recording).
inline Tensor lora_merge(const Tensor& W, const LoraPair& p, real scale = 1) {
    NoGrad ng;
    Tensor ab = matmul(p.A, p.B);
    if (scale != real(1)) ab = mul_scalar(ab, scale);
    return add(W, ab);
}

// Adapters for every projection of every layer, in a fixed target order that
// the serialization format and the parameter vector both follow.
struct LoraSet {
    enum Target { kQ = 0, kK, kV, kO, kGate, kUp, kDown, kTargetCount };

    int64_t rank = 1;
    real scale = 1;
    std::vector<std::array<LoraPair, kTargetCount>> layers;

    // W_A small Gaussian, W_B zero: the adapted model starts exactly at the
    // base model. Draw order is layer-major then target-major.
    static LoraSet init(const ModelConfig& cfg, int64_t rank, Rng& rng, real scale = 1,
                        real init_std = real(0.02)) {
        if (rank <= 0) throw config_error("LoraSet: rank must be positive");
        LoraSet s;
        s.rank = rank;
        s.scale = scale;
        s.layers.resize(size_t(cfg.L));
        for (auto& layer : s.layers)
            for (int tgt = 0; tgt < kTargetCount; ++tgt) {
                const auto [n, m] = target_dims(cfg, Target(tgt));
                layer[tgt].A = Tensor::randn({n, rank}, rng, 0, init_std, true);
                layer[tgt].B = Tensor::full({rank, m}, 0, true);
            }
        return s;
    }

    static std::pair<int64_t, int64_t> target_dims(const ModelConfig& cfg, Target t) {
        switch (t) {
            case kQ:
            case kK:
            case kV:
                return {cfg.d, cfg.n_head * cfg.d_h};
            case kO:  // concatenated heads back to the residual stream
                return {cfg.n_head * cfg.d_h, cfg.d};
            case kGate:
            case kUp:
                return {cfg.d, cfg.d_int};
            case kDown:
                return {cfg.d_int, cfg.d};
            default:
                throw config_error("LoraSet: unknown target");
        }
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> out;
        for (const auto& layer : layers)
            for (const auto& p : layer) {
                out.push_back(p.A);
                out.push_back(p.B);
            }
        return out;
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& layer : layers)
            for (const auto& p : layer) n += p.A.numel() + p.B.numel();
        return n;
    }
};

}  // namespace nute
