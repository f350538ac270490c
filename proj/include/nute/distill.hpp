#pragma once

// Knowledge-distillation objective: output-distribution KL against the
// teacher, layer-wise MSE on the residual-stream states, and the weighted
// combination with the sparsity penalty.

#include <string>
#include <vector>

#include "nute/common.hpp"
#include "nute/tensor.hpp"

namespace nute {

enum class KlDirection {
    kStudentFirst,  // D_KL(student || teacher)
    kTeacherFirst,  // D_KL(teacher || student), kept for ablations
};

struct DistillConfig {
    real alpha1 = real(0.01);  // layer-loss weight
    real alpha2 = real(1);     // sparsity-penalty weight
    KlDirection direction = KlDirection::kStudentFirst;

    void validate() const {
        if (alpha1 < 0 || alpha2 < 0)
            throw config_error("DistillConfig: loss weights must be nonnegative");
    }
};

// Per-token KL divergence between the two softmax distributions (temperature
// 1), averaged over batch and sequence. The teacher side is expected to be
// detached; gradients flow only into `student`.
inline Tensor kl_loss(const Tensor& student, const Tensor& teacher,
                      KlDirection direction = KlDirection::kStudentFirst) {
    if (student.shape() != teacher.shape())
        throw shape_error("kl_loss: logit shapes disagree, " + shape_str(student.shape()) +
                          " vs " + shape_str(teacher.shape()));
    if (student.rank() < 2)
        throw shape_error("kl_loss: expected [..., tokens, vocab] logits");
    const Tensor& first = direction == KlDirection::kStudentFirst ? student : teacher;
    const Tensor& second = direction == KlDirection::kStudentFirst ? teacher : student;
    Tensor log_p = log_softmax(first);
    Tensor log_q = log_softmax(second);
    Tensor per_token = sum_last(mul(softmax(first), sub(log_p, log_q)));
    return mean_all(per_token);
}

// Sum over layers of the mean squared difference between student and teacher
// hidden states.
inline Tensor layer_loss(const std::vector<Tensor>& student_hiddens,
                         const std::vector<Tensor>& teacher_hiddens) {
    if (student_hiddens.size() != teacher_hiddens.size())
        throw shape_error("layer_loss: hidden-state lists have different lengths, " +
                          std::to_string(student_hiddens.size()) + " vs " +
                          std::to_string(teacher_hiddens.size()));
    if (student_hiddens.empty()) throw shape_error("layer_loss: empty hidden-state lists");
    Tensor total;
    for (size_t l = 0; l < student_hiddens.size(); ++l) {
        const Tensor& hs = student_hiddens[l];
        const Tensor& ht = teacher_hiddens[l];
        if (hs.shape() != ht.shape())
            throw shape_error("layer_loss: layer " + std::to_string(l) + " shapes disagree, " +
                              shape_str(hs.shape()) + " vs " + shape_str(ht.shape()));
        Tensor d = sub(hs, ht);
        Tensor mse = mean_all(mul(d, d));
        total = (l == 0) ? mse : add(total, mse);
    }
    return total;
}

// L = kl + alpha1 * layer + alpha2 * l0.
inline Tensor total_loss(const Tensor& kl, const Tensor& layer, const Tensor& l0,
                         const DistillConfig& cfg) {
    cfg.validate();
    if (kl.numel() != 1 || layer.numel() != 1 || l0.numel() != 1)
        throw shape_error("total_loss: components must be scalars");
    return add(kl, add(mul_scalar(layer, cfg.alpha1), mul_scalar(l0, cfg.alpha2)));
}

}  // namespace nute
