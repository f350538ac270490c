#pragma once

// Decoder-only transformer with a gated FFN. One frozen set of base weights
// can run either as the student (learnable gate + adapter module) or as a
// teacher (frozen snapshot module); the gates z_head / z_int / z_hid and the
// low-rank adapters are injected at fixed points in the forward pass.
//
// The hidden-channel gate z_hid also multiplies the embedding output, and the
// RMS normalization always divides by the configured full hidden width (not
// the live tensor width). Together these make the gated forward agree with
// the structurally sliced model: pruned channels carry exact zeros through
// the residual stream, so removing them changes nothing but rounding.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nute/common.hpp"
#include "nute/lora.hpp"
#include "nute/masks.hpp"
#include "nute/model_config.hpp"
#include "nute/tensor.hpp"

namespace nute {

// ---------------------------------------------------------------------------
// Frozen base weights.

struct BaseWeights {
    ModelConfig cfg;

    Tensor tok_emb;  // [V, d]
    Tensor pos_emb;  // [context_len, d]

    struct Layer {
        Tensor wq, wk, wv;  // [d, H_l*d_h]; wq/wk/wv map into head space
        Tensor wo;          // [H_l*d_h, d]
        Tensor wgate, wup;  // [d, d_int_l]
        Tensor wdown;       // [d_int_l, d]
        Tensor gain_attn;   // [d]
        Tensor gain_ffn;    // [d]
    };
    std::vector<Layer> layers;

    Tensor gain_final;  // [d]
    Tensor head;        // [d, V]

    LiveCounter<BaseWeights> live_;

    static BaseWeights init(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        BaseWeights w;
        w.cfg = cfg;
        const real s = real(0.02);
        w.tok_emb = Tensor::randn({cfg.V, cfg.d}, rng, s);
        w.pos_emb = Tensor::randn({cfg.context_len, cfg.d}, rng, s);
        w.layers.resize(size_t(cfg.L));
        for (int64_t l = 0; l < cfg.L; ++l) {
            auto& ly = w.layers[size_t(l)];
            const int64_t hw = cfg.heads_in(l) * cfg.d_h;
            const int64_t iw = cfg.dint_in(l);
            ly.wq = Tensor::randn({cfg.d, hw}, rng, s);
            ly.wk = Tensor::randn({cfg.d, hw}, rng, s);
            ly.wv = Tensor::randn({cfg.d, hw}, rng, s);
            ly.wo = Tensor::randn({hw, cfg.d}, rng, s);
            ly.wgate = Tensor::randn({cfg.d, iw}, rng, s);
            ly.wup = Tensor::randn({cfg.d, iw}, rng, s);
            ly.wdown = Tensor::randn({iw, cfg.d}, rng, s);
            ly.gain_attn = Tensor::full({cfg.d}, real(1));
            ly.gain_ffn = Tensor::full({cfg.d}, real(1));
        }
        w.gain_final = Tensor::full({cfg.d}, real(1));
        w.head = Tensor::randn({cfg.d, cfg.V}, rng, s);
        return w;
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> out{tok_emb, pos_emb};
        for (const auto& ly : layers)
            for (const auto& t : {ly.wq, ly.wk, ly.wv, ly.wo, ly.wgate, ly.wup,
                                  ly.wdown, ly.gain_attn, ly.gain_ffn})
                out.push_back(t);
        out.push_back(gain_final);
        out.push_back(head);
        return out;
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& t : params()) n += t.numel();
        return n;
    }

    // Hash of every weight value in serialization order; pruning and
    // fine-tuning must leave this unchanged.
    uint64_t checksum() const {
        uint64_t h = fnv1a64(nullptr, 0);
        for (const auto& t : params()) h = fnv1a64(t.val().data(), t.numel() * sizeof(real), h);
        return h;
    }

    void set_requires_grad(bool on) {
        for (auto& t : params()) t.set_requires_grad(on);
    }
};

// ---------------------------------------------------------------------------
// The learnable unit: gates plus adapters. This is all that training updates
// and all that a teacher snapshot stores.

struct LightweightModule {
    MaskSet masks;
    LoraSet lora;

    LiveCounter<LightweightModule> live_;

    static LightweightModule init(const ModelConfig& cfg, Rng& rng,
                                  int64_t rank = 1, real logalpha0 = real(2.5)) {
        LightweightModule m;
        m.masks = MaskSet::init(cfg, logalpha0);
        m.lora = LoraSet::init(cfg, rank, rng);
        return m;
    }

    // An identity module: gates saturated fully open, adapters exact no-ops.
    static LightweightModule identity(const ModelConfig& cfg, Rng& rng, int64_t rank = 1) {
        LightweightModule m = init(cfg, rng, rank, real(40));
        for (auto& t : m.masks.params()) t.set_requires_grad(false);
        return m;
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> out = masks.params();
        for (const auto& t : lora.params()) out.push_back(t);
        return out;
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& t : params()) n += t.numel();
        return n;
    }
};

inline void check_module_shapes(const ModelConfig& cfg, const LightweightModule& m) {
    const auto& mk = m.masks;
    if (mk.logalpha_head.dim(0) != cfg.L || mk.logalpha_head.dim(1) != cfg.n_head ||
        mk.logalpha_int.dim(0) != cfg.L || mk.logalpha_int.dim(1) != cfg.d_int ||
        mk.logalpha_hid.dim(0) != cfg.d)
        throw shape_error("module gate shapes do not match model config");
    if (int64_t(m.lora.layers.size()) != cfg.L)
        throw shape_error("module adapter layer count does not match model config");
    for (int64_t l = 0; l < cfg.L; ++l)
        for (int t = 0; t < LoraSet::kTargetCount; ++t) {
            auto [n, mm] = m.lora.target_dims(cfg, LoraSet::Target(t));
            const auto& p = m.lora.layers[size_t(l)][size_t(t)];
            if (p.A.dim(0) != n || p.B.dim(1) != mm)
                throw shape_error("module adapter shapes do not match model config");
        }
}

// ---------------------------------------------------------------------------
// Forward pass.

struct ForwardOutput {
    Tensor logits;                      // [B, T, V]
    std::vector<Tensor> hidden_states;  // L tensors [B, T, d], post-residual
};

namespace detail {

// Projection helper: dense when no adapter is given, else dense + low-rank.
inline Tensor project(const Tensor& w, const LoraPair* p, const Tensor& x, real scale) {
    if (p == nullptr) return matmul(x, w);
    return lora_apply(w, *p, x, scale);
}

// Core forward shared by the gated (student/teacher) and plain (bare base,
// sliced) paths. `z` and `lora` may independently be null.
inline ForwardOutput forward_impl(const BaseWeights& base, const MaskValues* z,
                                  const LoraSet* lora, const IdArray& ids) {
    const ModelConfig& cfg = base.cfg;
    if (ids.shape.size() != 2)
        throw shape_error("forward: token ids must be [batch, seq], got " +
                          shape_str(ids.shape));
    const int64_t B = ids.shape[0], T = ids.shape[1];
    if (T > cfg.context_len)
        throw shape_error("forward: sequence length " + std::to_string(T) +
                          " exceeds context length " + std::to_string(cfg.context_len));
    const real inv_norm = real(1) / std::sqrt(real(cfg.d_h));
    const real norm_div = real(cfg.rms_divisor());

    // Token + position embeddings. Positions broadcast over the batch.
    Tensor pos_rows(Shape{T, cfg.d});
    std::copy_n(base.pos_emb.val().data(), size_t(T * cfg.d), pos_rows.val().data());
    if (base.pos_emb.requires_grad() && detail::tracing({base.pos_emb})) {
        pos_rows.set_requires_grad(true);
        detail::record(pos_rows, {base.pos_emb},
                       [=, src = base.pos_emb, out = pos_rows]() mutable {
                           auto& g = src.grad();
                           const auto& og = out.grad();
                           for (int64_t i = 0; i < T * cfg.d; ++i) g[i] += og[i];
                       });
    }
    Tensor x = add(embedding(base.tok_emb, ids), pos_rows);
    if (z != nullptr) x = mul(x, z->hidden);  // zero pruned channels at the source

    // Additive causal mask, shared by every layer.
    Tensor causal(Shape{T, T});
    for (int64_t i = 0; i < T; ++i)
        for (int64_t j = i + 1; j < T; ++j) causal.val()[i * T + j] = real(-1e30);

    ForwardOutput out;
    out.hidden_states.reserve(size_t(cfg.L));

    for (int64_t l = 0; l < cfg.L; ++l) {
        const auto& ly = base.layers[size_t(l)];
        const auto* lp = lora ? &lora->layers[size_t(l)] : nullptr;
        const real ls = lora ? lora->scale : real(1);
        const int64_t H = cfg.heads_in(l);

        if (H > 0) {
            Tensor h = rmsnorm(x, ly.gain_attn, norm_div);
            Tensor q = project(ly.wq, lp ? &(*lp)[LoraSet::kQ] : nullptr, h, ls);
            Tensor k = project(ly.wk, lp ? &(*lp)[LoraSet::kK] : nullptr, h, ls);
            Tensor v = project(ly.wv, lp ? &(*lp)[LoraSet::kV] : nullptr, h, ls);
            // [B,T,H*d_h] -> [B,H,T,d_h]
            auto heads = [&](const Tensor& t) {
                return permute(reshape(t, {B, T, H, cfg.d_h}), {0, 2, 1, 3});
            };
            Tensor qh = heads(q), kh = heads(k), vh = heads(v);
            Tensor att = mul_scalar(matmul(qh, permute(kh, {0, 1, 3, 2})), inv_norm);
            att = add(att, causal);
            Tensor o = matmul(softmax(att), vh);  // [B,H,T,d_h]
            if (z != nullptr) o = mul(o, reshape(row(z->head, l), {H, 1, 1}));
            o = reshape(permute(o, {0, 2, 1, 3}), {B, T, H * cfg.d_h});
            Tensor attn_out = project(ly.wo, lp ? &(*lp)[LoraSet::kO] : nullptr, o, ls);
            if (z != nullptr) attn_out = mul(attn_out, z->hidden);
            x = add(x, attn_out);
        }

        if (cfg.dint_in(l) > 0) {
            Tensor h = rmsnorm(x, ly.gain_ffn, norm_div);
            Tensor g = silu(project(ly.wgate, lp ? &(*lp)[LoraSet::kGate] : nullptr, h, ls));
            Tensor u = project(ly.wup, lp ? &(*lp)[LoraSet::kUp] : nullptr, h, ls);
            Tensor prod = mul(g, u);
            if (z != nullptr) prod = mul(prod, row(z->intermediate, l));
            Tensor ffn = project(ly.wdown, lp ? &(*lp)[LoraSet::kDown] : nullptr, prod, ls);
            if (z != nullptr) ffn = mul(ffn, z->hidden);
            x = add(x, ffn);
        }

        out.hidden_states.push_back(x);
    }

    out.logits = matmul(rmsnorm(x, base.gain_final, norm_div), base.head);
    return out;
}

}  // namespace detail

enum class MaskMode { kSampled, kDeterministic };

// Student or teacher forward: gates and adapters injected. Sampled mode draws
// fresh gate noise from `rng`; deterministic mode uses the noise-free gates.
inline ForwardOutput forward(const BaseWeights& base, const LightweightModule& module,
                             const IdArray& ids, MaskMode mode, Rng* rng = nullptr) {
    check_module_shapes(base.cfg, module);
    MaskValues z;
    if (mode == MaskMode::kSampled) {
        if (rng == nullptr)
            throw config_error("forward: sampled mask mode needs a random generator");
        z = sample_masks(module.masks, *rng);
    } else {
        z = deterministic_masks(module.masks);
    }
    return detail::forward_impl(base, &z, &module.lora, ids);
}

// Forward with explicit gate values (used by tests and the slicer's oracle).
inline ForwardOutput forward_with_masks(const BaseWeights& base, const MaskValues& z,
                                        const LoraSet& lora, const IdArray& ids) {
    return detail::forward_impl(base, &z, &lora, ids);
}

// Bare forward: no gates, no adapters. Used for pretraining the base and for
// running sliced models.
inline ForwardOutput forward_plain(const BaseWeights& base, const IdArray& ids) {
    return detail::forward_impl(base, nullptr, nullptr, ids);
}

// ---------------------------------------------------------------------------
// Structural slicing: materialize the pruned architecture.

namespace detail {

inline bool gate_is_binary(const Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i)
        if (t.val()[i] != real(0) && t.val()[i] != real(1)) return false;
    return true;
}

// Copy the rows/columns of `w` named by the index lists.
inline Tensor take(const Tensor& w, const std::vector<int64_t>& rows,
                   const std::vector<int64_t>& cols) {
    const int64_t C = w.dim(1);
    Tensor out(Shape{int64_t(rows.size()), int64_t(cols.size())});
    real* dst = out.val().data();
    for (int64_t r : rows)
        for (int64_t c : cols) *dst++ = w.val()[r * C + c];
    return out;
}

inline std::vector<int64_t> kept_indices(const real* z, int64_t n) {
    std::vector<int64_t> keep;
    for (int64_t i = 0; i < n; ++i)
        if (z[i] == real(1)) keep.push_back(i);
    return keep;
}

inline std::vector<int64_t> iota_indices(int64_t n) {
    std::vector<int64_t> v(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] = i;
    return v;
}

}  // namespace detail

// Drops every structure whose gate is 0 and merges the low-rank adapters into
// the surviving dense weights. The result is a smaller self-contained model
// whose plain forward matches the gated forward of (base, module).
inline BaseWeights slice_pruned(const BaseWeights& base, const LightweightModule& module) {
    check_module_shapes(base.cfg, module);
    const ModelConfig& cfg = base.cfg;
    MaskValues z = deterministic_masks(module.masks);
    if (!detail::gate_is_binary(z.head) || !detail::gate_is_binary(z.intermediate) ||
        !detail::gate_is_binary(z.hidden))
        throw train_error("slice_pruned: gates are not binary; binarize the masks first");

    const std::vector<int64_t> hid = detail::kept_indices(z.hidden.val().data(), cfg.d);
    if (hid.empty()) throw train_error("slice_pruned: all hidden channels pruned");

    ModelConfig out_cfg = cfg;
    out_cfg.sliced = true;
    out_cfg.d = int64_t(hid.size());
    out_cfg.norm_divisor = cfg.rms_divisor();
    out_cfg.heads_per_layer.assign(size_t(cfg.L), 0);
    out_cfg.dint_per_layer.assign(size_t(cfg.L), 0);

    BaseWeights out;
    NoGrad ng;

    auto take_vec = [&](const Tensor& t, const std::vector<int64_t>& idx) {
        Tensor r(Shape{int64_t(idx.size())});
        for (size_t i = 0; i < idx.size(); ++i) r.val()[i] = t.val()[size_t(idx[i])];
        return r;
    };

    out.tok_emb = detail::take(base.tok_emb, detail::iota_indices(cfg.V), hid);
    out.pos_emb = detail::take(base.pos_emb, detail::iota_indices(cfg.context_len), hid);
    out.layers.resize(size_t(cfg.L));
    for (int64_t l = 0; l < cfg.L; ++l) {
        const auto& ly = base.layers[size_t(l)];
        const auto& lp = module.lora.layers[size_t(l)];
        const real ls = module.lora.scale;
        auto merged = [&](LoraSet::Target t, const Tensor& w) {
            return lora_merge(w, lp[size_t(t)], ls);
        };

        std::vector<int64_t> head_cols;  // kept columns in head space
        const real* zh = z.head.val().data() + l * cfg.n_head;
        int64_t kept_heads = 0;
        for (int64_t h = 0; h < cfg.n_head; ++h)
            if (zh[h] == real(1)) {
                ++kept_heads;
                for (int64_t c = 0; c < cfg.d_h; ++c) head_cols.push_back(h * cfg.d_h + c);
            }
        const std::vector<int64_t> ints =
            detail::kept_indices(z.intermediate.val().data() + l * cfg.d_int, cfg.d_int);
        out_cfg.heads_per_layer[size_t(l)] = kept_heads;
        out_cfg.dint_per_layer[size_t(l)] = int64_t(ints.size());

        auto& oly = out.layers[size_t(l)];
        oly.wq = detail::take(merged(LoraSet::kQ, ly.wq), hid, head_cols);
        oly.wk = detail::take(merged(LoraSet::kK, ly.wk), hid, head_cols);
        oly.wv = detail::take(merged(LoraSet::kV, ly.wv), hid, head_cols);
        oly.wo = detail::take(merged(LoraSet::kO, ly.wo), head_cols, hid);
        oly.wgate = detail::take(merged(LoraSet::kGate, ly.wgate), hid, ints);
        oly.wup = detail::take(merged(LoraSet::kUp, ly.wup), hid, ints);
        oly.wdown = detail::take(merged(LoraSet::kDown, ly.wdown), ints, hid);
        oly.gain_attn = take_vec(ly.gain_attn, hid);
        oly.gain_ffn = take_vec(ly.gain_ffn, hid);
    }
    out.gain_final = take_vec(base.gain_final, hid);
    out.head = detail::take(base.head, hid, detail::iota_indices(cfg.V));

    out_cfg.validate();
    out.cfg = out_cfg;
    return out;
}

}  // namespace nute
