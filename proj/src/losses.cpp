#include "distillfss/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "distillfss/ops.hpp"

namespace distillfss {

namespace {
thread_local std::uint64_t t_distill_evals = 0;
}

Var focal_loss(const Var& prob, const Tensor& target, double gamma, double alpha) {
    if (!prob.value().same_shape(target)) {
        throw std::invalid_argument("focal_loss: prediction " + shape_str(prob.shape()) + " vs target " +
                                    shape_str(target.shape()));
    }
    if (gamma < 0) throw std::invalid_argument("focal_loss: gamma must be non-negative");
    const Tensor& p = prob.value();
    const std::size_t n = p.size();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double raw = target[i] > 0.5 ? p[i] : 1.0 - p[i];
        const double pt = std::clamp(raw, kFocalEps, 1.0 - kFocalEps);
        total += -alpha * std::pow(1.0 - pt, gamma) * std::log(pt);
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    Tensor tgt = target;
    return make_result(Tensor({1}, total * inv_n), {prob},
                       [tgt, gamma, alpha, inv_n](const Tensor& g, std::span<const NodePtr> parents) {
                           const Tensor& pv = parents[0]->value;
                           Tensor& gp = parents[0]->grad_buffer();
                           for (std::size_t i = 0; i < pv.size(); ++i) {
                               const bool fg = tgt[i] > 0.5;
                               const double raw = fg ? pv[i] : 1.0 - pv[i];
                               if (raw < kFocalEps || raw > 1.0 - kFocalEps) continue;  // clamped: flat
                               const double q = 1.0 - raw;
                               double d = -alpha * std::pow(q, gamma) / raw;
                               if (gamma != 0.0) d += alpha * gamma * std::pow(q, gamma - 1.0) * std::log(raw);
                               gp[i] += g[0] * inv_n * (fg ? d : -d);
                           }
                       });
}

Var mse_loss(const Var& a, const Var& b) {
    if (a.value().size() != b.value().size()) {
        throw std::invalid_argument("mse_loss: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t n = a.value().size();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.value()[i] - b.value()[i];
        s += d * d;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    return make_result(Tensor({1}, s * inv_n), {a, b}, [inv_n](const Tensor& g, std::span<const NodePtr> p) {
        const Tensor& av = p[0]->value;
        const Tensor& bv = p[1]->value;
        const double k = 2.0 * inv_n * g[0];
        if (p[0]->requires_grad) {
            Tensor& ga = p[0]->grad_buffer();
            for (std::size_t i = 0; i < av.size(); ++i) ga[i] += k * (av[i] - bv[i]);
        }
        if (p[1]->requires_grad) {
            Tensor& gb = p[1]->grad_buffer();
            for (std::size_t i = 0; i < av.size(); ++i) gb[i] += k * (bv[i] - av[i]);
        }
    });
}

Var distill_loss(const AttentionMapSet& teacher, const AttentionMapSet& student) {
    ++t_distill_evals;
    if (teacher.size() != student.size() || teacher.size() == 0) {
        throw std::invalid_argument("distill_loss: teacher has " + std::to_string(teacher.size()) +
                                    " layers, student has " + std::to_string(student.size()));
    }
    std::vector<Var> terms;
    for (std::size_t i = 0; i < teacher.size(); ++i) {
        if (teacher.maps()[i].shape() != student.maps()[i].shape()) {
            throw std::invalid_argument("distill_loss: layer " + std::to_string(i) + " shape " +
                                        shape_str(teacher.maps()[i].shape()) + " vs " +
                                        shape_str(student.maps()[i].shape()));
        }
        terms.push_back(mse_loss(teacher.maps()[i], student.maps()[i]));
    }
    return ops::scale(ops::sum_scalars(terms), 1.0 / static_cast<double>(terms.size()));
}

std::uint64_t distill_loss_evaluations() { return t_distill_evals; }

CompositeLoss composite_loss(const Var& teacher_prob, const Var& student_prob, const Tensor& target,
                             const AttentionMapSet& teacher_maps, const AttentionMapSet& student_maps,
                             const FocalParams& focal, const LossWeights& weights, bool use_dist) {
    CompositeLoss out;
    out.seg_student = focal_loss(student_prob, target, focal.gamma, focal.alpha);
    out.seg_teacher = focal_loss(teacher_prob, target, focal.gamma, focal.alpha);
    std::vector<Var> terms{ops::scale(out.seg_student, weights.seg_student),
                           ops::scale(out.seg_teacher, weights.seg_teacher)};
    if (use_dist) {
        out.dist = distill_loss(teacher_maps, student_maps);
        terms.insert(terms.begin(), ops::scale(out.dist, weights.dist));
    }
    out.total = ops::sum_scalars(terms);
    return out;
}

}  // namespace distillfss
