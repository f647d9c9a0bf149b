#include <cmath>

#include "distillfss/losses.hpp"
#include "distillfss/ops.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace distillfss;
using testutil::gradcheck;
using testutil::random_tensor;

namespace {

AttentionMapSet constant_maps(const std::vector<int>& sizes, double v) {
    std::vector<Var> maps;
    std::vector<int> slots;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        maps.push_back(Var::constant(Tensor({1, sizes[i], sizes[i]}, v)));
        slots.push_back(static_cast<int>(i / 2));
    }
    return AttentionMapSet(std::move(maps), std::move(slots));
}

}  // namespace

TEST_CASE("focal loss at p_t = 0.5") {
    Var p = Var::constant(Tensor({1, 2, 2}, 0.5));
    Tensor fg({1, 2, 2}, 1.0), bg({1, 2, 2}, 0.0);
    const double expected = 0.25 * std::log(2.0);
    CHECK(std::abs(focal_loss(p, fg, 2.0, 1.0).value()[0] - expected) < 1e-9);
    CHECK(std::abs(focal_loss(p, bg, 2.0, 1.0).value()[0] - expected) < 1e-9);
    CHECK(std::abs(focal_loss(p, fg, 2.0, 0.5).value()[0] - 0.5 * expected) < 1e-9);
}

TEST_CASE("focal loss with gamma 0 is binary cross-entropy") {
    Rng rng(3);
    Tensor prob = random_tensor({1, 6, 6}, rng, 0.01, 0.99);
    Tensor target({1, 6, 6});
    for (std::size_t i = 0; i < target.size(); ++i) target[i] = rng.uniform_int(0, 1);
    double bce = 0.0;
    for (std::size_t i = 0; i < prob.size(); ++i)
        bce -= target[i] * std::log(prob[i]) + (1.0 - target[i]) * std::log(1.0 - prob[i]);
    bce /= static_cast<double>(prob.size());
    CHECK(std::abs(focal_loss(Var::constant(prob), target, 0.0, 1.0).value()[0] - bce) < 1e-9);
}

TEST_CASE("focal loss clamps saturated probabilities") {
    Tensor target({1, 1, 2});
    target[0] = 1.0;
    Tensor prob({1, 1, 2});
    prob[0] = 0.0;
    prob[1] = 1.0;
    const double v = focal_loss(Var::constant(prob), target, 0.0, 1.0).value()[0];
    CHECK(std::isfinite(v));
    CHECK(v == doctest::Approx(-std::log(kFocalEps)).epsilon(1e-6));
    CHECK_THROWS(focal_loss(Var::constant(prob), Tensor({1, 2, 1}), 2.0, 1.0));
}

TEST_CASE("mse and distillation loss") {
    Tensor a({1, 1, 2}), b({1, 1, 2}, 0.5);
    a[1] = 1.0;
    CHECK(mse_loss(Var::constant(a), Var::constant(b)).value()[0] == doctest::Approx(0.25).epsilon(1e-12));

    const std::vector<int> sizes{8, 8, 4, 4, 2, 2};
    AttentionMapSet ones = constant_maps(sizes, 1.0), halves = constant_maps(sizes, 0.5);
    CHECK(std::abs(distill_loss(ones, halves).value()[0] - 0.25) < 1e-12);
    CHECK(distill_loss(ones, ones).value()[0] == 0.0);

    // Every layer weighs the same regardless of its resolution.
    std::vector<Var> t{Var::constant(Tensor({1, 2, 2}, 1.0)), Var::constant(Tensor({1, 1, 1}, 0.0))};
    std::vector<Var> s{Var::constant(Tensor({1, 2, 2}, 0.0)), Var::constant(Tensor({1, 1, 1}, 0.0))};
    CHECK(distill_loss(AttentionMapSet(t, {0, 1}), AttentionMapSet(s, {0, 1})).value()[0] == doctest::Approx(0.5));

    AttentionMapSet short_set = constant_maps({8, 8}, 1.0);
    CHECK_THROWS(distill_loss(ones, short_set));
}

TEST_CASE("composite loss is the sum of its terms") {
    Rng rng(5);
    Var tp = Var::constant(random_tensor({1, 4, 4}, rng, 0.1, 0.9));
    Var sp = Var::constant(random_tensor({1, 4, 4}, rng, 0.1, 0.9));
    Tensor target({1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) target[i] = i % 3 == 0;
    const std::vector<int> sizes{4, 4, 2, 2, 1, 1};
    AttentionMapSet tm = constant_maps(sizes, 0.8), sm = constant_maps(sizes, 0.3);

    const auto before = distill_loss_evaluations();
    CompositeLoss on = composite_loss(tp, sp, target, tm, sm, FocalParams{}, LossWeights{}, true);
    CHECK(distill_loss_evaluations() == before + 1);
    CHECK(on.total.value()[0] ==
          doctest::Approx(on.dist.value()[0] + on.seg_student.value()[0] + on.seg_teacher.value()[0]).epsilon(1e-12));
    CHECK(on.dist.value()[0] == doctest::Approx(0.25).epsilon(1e-12));

    CompositeLoss off = composite_loss(tp, sp, target, tm, sm, FocalParams{}, LossWeights{}, false);
    CHECK(distill_loss_evaluations() == before + 1);
    CHECK_FALSE(off.dist.defined());
    CHECK(off.total.value()[0] ==
          doctest::Approx(off.seg_student.value()[0] + off.seg_teacher.value()[0]).epsilon(1e-12));
}

TEST_CASE("composite loss gradients match central differences") {
    Rng rng(9);
    Tensor target({1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) target[i] = i % 2 == 0;
    std::vector<Var> probes{Var::leaf(random_tensor({1, 4, 4}, rng, -2, 2), true),
                            Var::leaf(random_tensor({1, 4, 4}, rng, -2, 2), true),
                            Var::leaf(random_tensor({1, 2, 2}, rng, -2, 2), true),
                            Var::leaf(random_tensor({1, 2, 2}, rng, -2, 2), true)};
    auto f = [&target](const std::vector<Var>& v) {
        AttentionMapSet tm({ops::sigmoid(v[2])}, {0});
        AttentionMapSet sm({ops::sigmoid(v[3])}, {0});
        return composite_loss(ops::sigmoid(v[0]), ops::sigmoid(v[1]), target, tm, sm, FocalParams{}, LossWeights{}, true)
            .total;
    };
    CHECK(gradcheck(f, probes) < 1e-4);
}
