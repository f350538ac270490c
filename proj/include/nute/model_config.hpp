#pragma once

// Structural description of the transformer, shared by the model, the gate
// accounting, and the on-disk containers.

#include <cstdint>
#include <string>
#include <vector>

#include "nute/common.hpp"

namespace nute {

struct ModelConfig {
    int64_t L = 4;            // layer count
    int64_t d = 128;          // hidden (residual) dimension
    int64_t n_head = 4;       // heads per layer
    int64_t d_h = 32;         // per-head dimension
    int64_t d_int = 344;      // FFN intermediate dimension
    int64_t V = 256;          // vocabulary size (bytes)
    int64_t context_len = 256;

    // A model produced by slicing away pruned structure: per-layer counts
    // replace the uniform n_head/d_int, d may be smaller than n_head*d_h, and
    // norm_divisor keeps the original hidden dimension so RMS statistics
    // match the masked network the slice came from.
    bool sliced = false;
    std::vector<int64_t> heads_per_layer;  // empty = uniform n_head
    std::vector<int64_t> dint_per_layer;   // empty = uniform d_int
    real norm_divisor = 0;                 // 0 = use d

    int64_t heads_in(int64_t l) const {
        return heads_per_layer.empty() ? n_head : heads_per_layer[l];
    }
    int64_t dint_in(int64_t l) const {
        return dint_per_layer.empty() ? d_int : dint_per_layer[l];
    }
    real rms_divisor() const { return norm_divisor > 0 ? norm_divisor : real(d); }

    void validate() const {
        if (L <= 0 || d <= 0 || n_head <= 0 || d_h <= 0 || d_int <= 0 || V <= 0 ||
            context_len <= 0)
            throw config_error("ModelConfig: all dimensions must be positive");
        if (!sliced && d != n_head * d_h)
            throw config_error("ModelConfig: d (" + std::to_string(d) + ") != n_head*d_h (" +
                               std::to_string(n_head * d_h) + ")");
        if (!heads_per_layer.empty() && int64_t(heads_per_layer.size()) != L)
            throw config_error("ModelConfig: heads_per_layer length != L");
        if (!dint_per_layer.empty() && int64_t(dint_per_layer.size()) != L)
            throw config_error("ModelConfig: dint_per_layer length != L");
    }

    // Identity of the architecture for container compatibility checks.
    uint64_t fingerprint() const {
        int64_t fields[] = {L, d, n_head, d_h, d_int, V, context_len, sliced ? 1 : 0};
        uint64_t h = fnv1a64(fields, sizeof(fields));
        if (!heads_per_layer.empty())
            h = fnv1a64(heads_per_layer.data(), heads_per_layer.size() * 8, h);
        if (!dint_per_layer.empty())
            h = fnv1a64(dint_per_layer.data(), dint_per_layer.size() * 8, h);
        return h;
    }
};

// Count of weights the structural gates range over (attention Q,K,V,O plus
// the three FFN projections); the denominator of the sparsity ratio.
inline int64_t maskable_param_count(const ModelConfig& c) {
    return 4 * c.d_h * c.L * c.n_head * c.d + 3 * c.L * c.d_int * c.d;
}

}  // namespace nute
