#pragma once

#include <cstdint>

#include "distillfss/autograd.hpp"
#include "distillfss/decoder.hpp"

namespace distillfss {

inline constexpr double kFocalEps = 1e-7;

// Mean over pixels of -alpha (1 - p_t)^gamma log(p_t), where p_t = p on
// target foreground and 1 - p elsewhere, clamped to [eps, 1 - eps].
Var focal_loss(const Var& prob, const Tensor& target, double gamma, double alpha);

// Pixel-mean squared error.
Var mse_loss(const Var& a, const Var& b);

// Mean over layers of the per-layer MSE between teacher attention maps and
// student distilled maps.
Var distill_loss(const AttentionMapSet& teacher, const AttentionMapSet& student);

// How many times distill_loss has run on this thread.
std::uint64_t distill_loss_evaluations();

struct LossWeights {
    double dist = 1.0;
    double seg_student = 1.0;
    double seg_teacher = 1.0;
};

struct FocalParams {
    double gamma = 2.0;
    double alpha = 1.0;
};

struct CompositeLoss {
    Var total;
    Var dist;  // undefined when the distillation term is disabled
    Var seg_student;
    Var seg_teacher;
};

// L = L_dist + L_seg(student) + L_seg(teacher), each term scaled by its
// weight. With use_dist off the distillation term is never computed.
CompositeLoss composite_loss(const Var& teacher_prob, const Var& student_prob, const Tensor& target,
                             const AttentionMapSet& teacher_maps, const AttentionMapSet& student_maps,
                             const FocalParams& focal, const LossWeights& weights, bool use_dist);

}  // namespace distillfss
