#pragma once

// End-to-end training loops: base pretraining, pruning with progressive
// knowledge distillation, and post fine-tuning with frozen masks. Owns the
// optimizers and the dual learning-rate regime (fast masks, slow adapters).

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nute/data.hpp"
#include "nute/distill.hpp"
#include "nute/masks.hpp"
#include "nute/model.hpp"
#include "nute/optim.hpp"
#include "nute/scheduler.hpp"
#include "nute/snapshot.hpp"

namespace nute {

struct TrainConfig {
    real lr_mask = real(0.1);
    real lr_lora = real(1e-3);  // also the pretraining rate
    int64_t batch_size = 16;
    int64_t seq_len = 128;
    int64_t prune_steps = 5000;  // must equal warmup_steps + stage2_steps
    int64_t ft_steps = 1500;
    real beta1 = real(0.9);
    real beta2 = real(0.999);
    real eps = real(1e-8);
    real weight_decay = 0;
    real clip_norm = real(1.0);
    uint64_t seed = 1;
    int64_t eval_every = 0;  // 0 = no periodic perplexity evaluation
    int64_t lora_rank = 1;
    real logalpha0 = real(2.5);
    // Ablation switches.
    bool no_kd = false;          // replace distillation with next-token loss
    bool no_progressive = false; // intact teacher throughout
    bool no_layer_loss = false;  // drop the hidden-state term
    bool masks_only = false;     // freeze adapters, train gates alone

    void validate() const {
        if (lr_mask < 0 || lr_lora < 0) throw config_error("TrainConfig: negative learning rate");
        if (batch_size <= 0 || seq_len <= 0) throw config_error("TrainConfig: batch and sequence sizes must be positive");
        if (prune_steps < 0 || ft_steps < 0) throw config_error("TrainConfig: negative step count");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw config_error("TrainConfig: betas must be in [0,1)");
        if (eps <= 0 || clip_norm <= 0) throw config_error("TrainConfig: eps and clip_norm must be positive");
        if (weight_decay < 0) throw config_error("TrainConfig: negative weight decay");
        if (eval_every < 0) throw config_error("TrainConfig: negative eval interval");
        if (lora_rank <= 0) throw config_error("TrainConfig: adapter rank must be positive");
    }

    AdamW::Options adam(real lr, bool maximize = false) const {
        AdamW::Options o;
        o.lr = lr;
        o.beta1 = beta1;
        o.beta2 = beta2;
        o.eps = eps;
        o.weight_decay = weight_decay;
        o.maximize = maximize;
        return o;
    }
};

struct StepRecord {
    int64_t step = 0;
    real t_current = 0;
    real s_hat = 0;  // deterministic structural sparsity after the update
    TeacherRef teacher = TeacherRef::Intact();
    real kl = 0;      // data term: KL to the teacher (or plain CE when KD is off)
    real layer = 0;
    real l0 = 0;
    real total = 0;
    real lambda1 = 0;
    real lambda2 = 0;
    double eval_ppl = 0;
    bool has_eval = false;
    bool skipped = false;  // non-finite gradients: parameters were not updated
};

struct RunLog {
    std::vector<StepRecord> rows;          // append-only, one per step
    std::vector<std::string> incidents;    // skipped steps, fallbacks, warnings
};

// Aborts after a run of consecutive non-finite losses.
class DivergenceGuard {
public:
    explicit DivergenceGuard(int64_t limit = 10) : limit_(limit) {}
    int64_t consecutive() const { return consecutive_; }
    void observe(bool finite_loss, int64_t step) {
        if (finite_loss) {
            consecutive_ = 0;
            return;
        }
        if (++consecutive_ >= limit_)
            throw train_error("training diverged: loss non-finite for " +
                              std::to_string(consecutive_) + " consecutive steps, last at step " +
                              std::to_string(step));
    }

private:
    int64_t limit_;
    int64_t consecutive_ = 0;
};

// Mean next-token cross-entropy; targets are the inputs shifted by one.
inline Tensor next_token_loss(const Tensor& logits, const IdArray& targets) {
    if (logits.rank() < 2)
        throw shape_error("next_token_loss: logits must be [..., T, V], got " +
                          shape_str(logits.shape()));
    Shape lead(logits.shape().begin(), logits.shape().end() - 1);
    if (targets.shape != lead)
        throw shape_error("next_token_loss: targets " + shape_str(targets.shape) +
                          " do not match logits " + shape_str(logits.shape()));
    return mean_all(nll_last(log_softmax(logits), targets));
}

namespace detail {

inline real scalar_value(const Tensor& t) { return t.val()[0]; }

// Post-update bound on gate parameters during pruning; see the clamp in
// prune() for why gates must stay recoverable.
inline constexpr real kLogalphaRange = real(6);

// Deterministic structural sparsity of the module's current gates.
inline real det_sparsity(const LightweightModule& m, const ModelConfig& cfg) {
    NoGrad ng;
    MaskValues z = deterministic_masks(m.masks);
    return real(1) - scalar_value(remaining_ratio(z, cfg));
}

}  // namespace detail

// Plain next-token pretraining of the base model (all parameters trainable
// for the duration of the call, frozen again on return).
inline RunLog pretrain(BaseWeights& base, const Corpus& corpus, const TrainConfig& tc,
                       int64_t steps) {
    tc.validate();
    if (steps < 0) throw config_error("pretrain: negative step count");
    if (tc.eval_every > 0 && corpus.valid_size() <= tc.seq_len)
        throw config_error("pretrain: validation split too short for evaluation windows");
    base.set_requires_grad(true);
    AdamW optim(base.params(), tc.adam(tc.lr_lora));
    Rng data_rng(tc.seed);
    RunLog log;
    DivergenceGuard guard;
    for (int64_t step = 0; step < steps; ++step) {
        Batch b = sample_batch(corpus, data_rng, tc.batch_size, tc.seq_len);
        Graph g;
        Tensor loss = next_token_loss(forward_plain(base, b.inputs).logits, b.targets);
        g.backward(loss);

        StepRecord row;
        row.step = step;
        row.total = detail::scalar_value(loss);
        if (!grads_finite(base.params())) {
            row.skipped = true;
            log.incidents.push_back("step " + std::to_string(step) +
                                    ": non-finite gradient, update skipped");
        } else {
            clip_grad_norm(base.params(), tc.clip_norm);
            optim.step();
        }
        if (tc.eval_every > 0 && (step + 1) % tc.eval_every == 0) {
            row.eval_ppl = perplexity_plain(base, corpus.valid_data(), corpus.valid_size(),
                                            tc.seq_len);
            row.has_eval = true;
        }
        log.rows.push_back(row);
        guard.observe(std::isfinite(row.total), step);
    }
    base.set_requires_grad(false);
    return log;
}

struct PruneResult {
    LightweightModule module;
    RunLog log;
};

// Progressive pruning with numerous teachers. Per step: sample a batch,
// advance the sparsity target, pick the stage-appropriate teacher, run the
// teacher noise-free and detached and the student with sampled gates, take
// the combined distillation + sparsity objective, update gates and adapters
// at their own rates and the multipliers by ascent, then snapshot any newly
// crossed sparsity levels. After warmup the stored snapshots are replayed
// weak-to-strong, ending with the intact model.
inline PruneResult prune(const BaseWeights& base, const Corpus& corpus, const TrainConfig& tc,
                         const ScheduleConfig& sc, const DistillConfig& dc,
                         SnapshotStore& store) {
    tc.validate();
    sc.validate();
    dc.validate();
    if (tc.prune_steps != sc.warmup_steps + sc.stage2_steps)
        throw config_error("prune: prune_steps must equal warmup_steps + stage2_steps");
    if (!store.keys().empty()) throw config_error("prune: snapshot store must start empty");
    if (tc.eval_every > 0 && corpus.valid_size() <= tc.seq_len)
        throw config_error("prune: validation split too short for evaluation windows");

    Rng student_rng(tc.seed ^ 0x9e3779b97f4a7c15ull);
    LightweightModule student =
        LightweightModule::init(base.cfg, student_rng, tc.lora_rank, tc.logalpha0);
    if (tc.masks_only)
        for (auto& p : student.lora.params()) p.set_requires_grad(false);

    LagrangianState lag;
    AdamW opt_mask(student.masks.params(), tc.adam(tc.lr_mask));
    std::optional<AdamW> opt_lora;
    if (!tc.masks_only) opt_lora.emplace(student.lora.params(), tc.adam(tc.lr_lora));
    AdamW opt_lambda(lag.params(), tc.adam(tc.lr_mask, /*maximize=*/true));

    std::vector<Tensor> clip_group = student.masks.params();
    if (!tc.masks_only)
        for (const auto& p : student.lora.params()) clip_group.push_back(p);
    std::vector<Tensor> grad_group = clip_group;
    for (const auto& p : lag.params()) grad_group.push_back(p);

    Rng data_rng(tc.seed);
    Rng mask_rng(tc.seed ^ 0xc2b2ae3d27d4eb4full);
    RunLog log;
    DivergenceGuard guard;

    // Teacher slot: at most one snapshot resident besides the student.
    std::optional<LightweightModule> teacher;
    TeacherRef teacher_ref = TeacherRef::Intact();
    auto set_teacher = [&](const TeacherRef& ref) {
        if (ref == teacher_ref && (ref.intact || teacher.has_value())) return;
        teacher.reset();
        if (!ref.intact) teacher = store.load(ref.key_bp, base.cfg);
        teacher_ref = ref;
    };

    // Stage-2 replay schedule, expanded once warmup ends.
    std::vector<TeacherRef> replay;
    real prev_shat = detail::det_sparsity(student, base.cfg);
    const int64_t total_steps = sc.warmup_steps + sc.stage2_steps;

    for (int64_t step = 0; step < total_steps; ++step) {
        const bool stage2 = step >= sc.warmup_steps;
        if (stage2 && replay.empty()) {
            for (const auto& [ref, n] : stage2_playlist(store.keys(), sc))
                replay.insert(replay.end(), size_t(n), ref);
        }
        const real t_current = target_at(step, sc);
        lag.t_current = t_current;

        TeacherRef ref = TeacherRef::Intact();
        if (!tc.no_kd && !tc.no_progressive) {
            if (stage2) {
                ref = replay[size_t(step - sc.warmup_steps)];
            } else {
                std::string warn;
                ref = select_teacher_stage1(prev_shat, sc, store.keys(), &warn);
                if (!warn.empty())
                    log.incidents.push_back("step " + std::to_string(step) + ": " + warn);
            }
        }

        Batch b = sample_batch(corpus, data_rng, tc.batch_size, tc.seq_len);

        // Teacher pass: noise-free gates, no tape, values detached.
        ForwardOutput tout;
        if (!tc.no_kd) {
            NoGrad ng;
            set_teacher(ref);
            tout = ref.intact ? forward_plain(base, b.inputs)
                              : forward(base, *teacher, b.inputs, MaskMode::kDeterministic);
        }

        Graph g;
        MaskValues z = sample_masks(student.masks, mask_rng);
        ForwardOutput sout = forward_with_masks(base, z, student.lora, b.inputs);

        Tensor data_term = tc.no_kd ? next_token_loss(sout.logits, b.targets)
                                    : kl_loss(sout.logits, tout.logits, dc.direction);
        Tensor layer = (tc.no_kd || tc.no_layer_loss)
                           ? Tensor::scalar(0)
                           : layer_loss(sout.hidden_states, tout.hidden_states);
        // The constraint is driven by the noise-free sparsity (the quantity
        // the run is contracted to hit), with gradients routed through the
        // smooth alive-probability gates: a single sampled draw clamps
        // saturated gates to exactly 0/1 and starves the penalty of gradient,
        // while the alive-probability value alone settles visibly off target
        // because a fully closed gate still carries a few percent alive mass.
        // Shifting the smooth ratio by a constant to the noise-free value
        // keeps the gradient path and fixes the measured level.
        Tensor rr_smooth =
            remaining_ratio(expected_alive_masks(student.masks), base.cfg);
        real rr_det;
        {
            NoGrad ng;
            rr_det = detail::scalar_value(
                remaining_ratio(deterministic_masks(student.masks), base.cfg));
        }
        Tensor l0 = lagrangian_loss(
            add_scalar(rr_smooth, rr_det - detail::scalar_value(rr_smooth)), lag);
        Tensor total = total_loss(data_term, layer, l0, dc);
        g.backward(total);

        StepRecord row;
        row.step = step;
        row.t_current = t_current;
        row.teacher = tc.no_kd ? TeacherRef::Intact() : ref;
        row.kl = detail::scalar_value(data_term);
        row.layer = detail::scalar_value(layer);
        row.l0 = detail::scalar_value(l0);
        row.total = detail::scalar_value(total);

        if (!grads_finite(grad_group)) {
            row.skipped = true;
            log.incidents.push_back("step " + std::to_string(step) +
                                    ": non-finite gradient, update skipped");
        } else {
            clip_grad_norm(clip_group, tc.clip_norm);
            opt_mask.step();
            if (opt_lora) opt_lora->step();
            opt_lambda.step();
            // Keep gate parameters inside a recoverable range. Outside ±6 a
            // gate samples 0/1 on >92% of draws and its alive-probability
            // gradient underflows past Adam's epsilon, so a gate pushed far
            // enough out could never be pulled back by the constraint; ±6
            // still makes the noise-free gate exactly 0 or 1 (that needs
            // only |logalpha| > 2.4).
            for (auto& p : student.masks.params())
                for (auto& v : p.val())
                    v = std::min(std::max(v, -detail::kLogalphaRange),
                                 detail::kLogalphaRange);
        }
        row.lambda1 = detail::scalar_value(lag.lambda1);
        row.lambda2 = detail::scalar_value(lag.lambda2);

        const real shat = detail::det_sparsity(student, base.cfg);
        row.s_hat = shat;

        // Snapshot every newly crossed level (store failures abort the run:
        // later stages depend on these artifacts).
        if (!tc.no_progressive)
            for (int64_t key : snapshot_keys_due(prev_shat, shat, sc, store.keys()))
                store.save(key, student, step);
        prev_shat = shat;

        if (tc.eval_every > 0 && (step + 1) % tc.eval_every == 0) {
            row.eval_ppl =
                perplexity(base, student, corpus.valid_data(), corpus.valid_size(), tc.seq_len);
            row.has_eval = true;
        }
        log.rows.push_back(row);
        guard.observe(std::isfinite(row.total), step);
    }
    return PruneResult{std::move(student), std::move(log)};
}

// LoRA-only fine-tuning with the gates binarized and frozen. The mask
// parameters are bit-identical before and after.
inline RunLog post_finetune(const BaseWeights& base, LightweightModule& module,
                            const Corpus& corpus, const TrainConfig& tc) {
    tc.validate();
    if (tc.eval_every > 0 && corpus.valid_size() <= tc.seq_len)
        throw config_error("post_finetune: validation split too short for evaluation windows");
    for (const auto& la : module.masks.params()) {
        if (la.requires_grad())
            throw train_error("post_finetune: mask parameters must be frozen");
        for (int64_t i = 0; i < la.numel(); ++i) {
            const real zv =
                detail::det_gate_value(la.val()[i], module.masks.beta, module.masks.l,
                                       module.masks.r);
            if (zv != real(0) && zv != real(1))
                throw train_error("post_finetune: gates must be binarized first");
        }
    }
    for (auto& p : module.lora.params()) p.set_requires_grad(true);
    AdamW optim(module.lora.params(), tc.adam(tc.lr_lora));
    Rng data_rng(tc.seed ^ 0xa0761d6478bd642full);
    RunLog log;
    DivergenceGuard guard;
    MaskValues z;
    {
        NoGrad ng;
        z = deterministic_masks(module.masks);
    }
    for (int64_t step = 0; step < tc.ft_steps; ++step) {
        Batch b = sample_batch(corpus, data_rng, tc.batch_size, tc.seq_len);
        Graph g;
        Tensor loss =
            next_token_loss(forward_with_masks(base, z, module.lora, b.inputs).logits, b.targets);
        g.backward(loss);

        StepRecord row;
        row.step = step;
        row.s_hat = detail::det_sparsity(module, base.cfg);
        row.total = detail::scalar_value(loss);
        if (!grads_finite(module.lora.params())) {
            row.skipped = true;
            log.incidents.push_back("step " + std::to_string(step) +
                                    ": non-finite gradient, update skipped");
        } else {
            clip_grad_norm(module.lora.params(), tc.clip_norm);
            optim.step();
        }
        if (tc.eval_every > 0 && (step + 1) % tc.eval_every == 0) {
            row.eval_ppl =
                perplexity(base, module, corpus.valid_data(), corpus.valid_size(), tc.seq_len);
            row.has_eval = true;
        }
        log.rows.push_back(row);
        guard.observe(std::isfinite(row.total), step);
    }
    return log;
}

}  // namespace nute
