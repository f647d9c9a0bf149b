#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "distillfss/autograd.hpp"
#include "distillfss/rng.hpp"

namespace testutil {

using distillfss::Tensor;
using distillfss::Var;

inline Tensor random_tensor(distillfss::Shape shape, distillfss::Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// Largest relative error between backprop gradients and central differences
// of `f` with respect to every element of every leaf.
inline double gradcheck(const std::function<Var(const std::vector<Var>&)>& f, std::vector<Var> leaves,
                        double h = 1e-6) {
    for (auto& l : leaves) {
        l.set_requires_grad(true);
        l.zero_grad();
    }
    distillfss::backward(f(leaves));
    double worst = 0.0;
    for (auto& l : leaves) {
        const Tensor analytic = l.has_grad() ? l.grad() : Tensor(l.shape());
        Tensor& w = l.mutable_value();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double orig = w[i];
            double up, down;
            {
                distillfss::NoGradGuard ng;
                w[i] = orig + h;
                up = f(leaves).value()[0];
                w[i] = orig - h;
                down = f(leaves).value()[0];
            }
            w[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-3});
            worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
        }
    }
    return worst;
}

}  // namespace testutil
