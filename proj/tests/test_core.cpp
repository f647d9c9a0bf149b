#include <cmath>
#include <set>

#include "distillfss/autograd.hpp"
#include "distillfss/flops.hpp"
#include "distillfss/ops.hpp"
#include "distillfss/params.hpp"
#include "distillfss/rng.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace distillfss;
using testutil::gradcheck;
using testutil::random_tensor;

TEST_CASE("tensor shape and indexing") {
    Tensor t({2, 3, 4}, 1.5);
    CHECK(t.size() == 24);
    CHECK(t.rank() == 3);
    t.at(1, 2, 3) = 7.0;
    CHECK(t[23] == 7.0);
    CHECK(shape_str(t.shape()) == "[2x3x4]");
    Tensor r = t.reshaped({6, 4});
    CHECK(r.at(5, 3) == 7.0);
    CHECK_THROWS_AS(t.reshaped({5, 5}), std::invalid_argument);
}

TEST_CASE("memory tracker follows live tensor bytes") {
    const std::size_t before = memory::current_bytes();
    memory::reset_peak();
    {
        Tensor a({1000});
        CHECK(memory::current_bytes() == before + 8000);
        {
            Tensor b({500});
            CHECK(memory::peak_bytes() == before + 12000);
        }
        CHECK(memory::current_bytes() == before + 8000);
    }
    CHECK(memory::current_bytes() == before);
    CHECK(memory::peak_bytes() == before + 12000);
}

TEST_CASE("rng streams are reproducible and distinct") {
    Rng a(42), b(42), c(derive_seed(42, 1));
    for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng d(42);
    CHECK(d.next_u64() != c.next_u64());
    Rng e(3);
    for (int i = 0; i < 1000; ++i) {
        const int v = e.uniform_int(-2, 2);
        CHECK(v >= -2);
        CHECK(v <= 2);
        const double u = e.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
    std::vector<int> xs{1, 2, 3, 4, 5, 6};
    Rng f(9);
    f.shuffle(xs);
    CHECK(std::multiset<int>(xs.begin(), xs.end()) == std::multiset<int>{1, 2, 3, 4, 5, 6});
}

TEST_CASE("backward accumulates through shared subexpressions") {
    Var x = Var::leaf(Tensor({1}, 3.0), true);
    Var y = ops::add(ops::scale(x, 2.0), ops::scale(x, 5.0));  // 7x
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("no graph is recorded under NoGradGuard or for frozen leaves") {
    Var x = Var::leaf(Tensor({2}, 1.0), true);
    {
        NoGradGuard ng;
        Var y = ops::scale(x, 2.0);
        CHECK_FALSE(y.requires_grad());
    }
    Var frozen = Var::leaf(Tensor({2}, 1.0), false);
    CHECK_FALSE(ops::scale(frozen, 2.0).requires_grad());
}

TEST_CASE("op gradients match central differences") {
    Rng rng(5);
    SUBCASE("conv2d stride 1 and 2") {
        for (int stride : {1, 2}) {
            Var x = Var::leaf(random_tensor({2, 5, 6}, rng), true);
            Var w = Var::leaf(random_tensor({3, 2, 3, 3}, rng), true);
            Var b = Var::leaf(random_tensor({3}, rng), true);
            auto f = [stride](const std::vector<Var>& v) {
                return ops::mean_all(ops::sigmoid(ops::conv2d(v[0], v[1], v[2], stride)));
            };
            CHECK(gradcheck(f, {x, w, b}) < 1e-6);
        }
    }
    SUBCASE("1x1 conv") {
        Var x = Var::leaf(random_tensor({3, 4, 4}, rng), true);
        Var w = Var::leaf(random_tensor({2, 3, 1, 1}, rng), true);
        Var b = Var::leaf(random_tensor({2}, rng), true);
        auto f = [](const std::vector<Var>& v) { return ops::mean_all(ops::sigmoid(ops::conv2d(v[0], v[1], v[2]))); };
        CHECK(gradcheck(f, {x, w, b}) < 1e-6);
    }
    SUBCASE("bilinear upsample") {
        Var x = Var::leaf(random_tensor({2, 3, 4}, rng), true);
        auto f = [](const std::vector<Var>& v) { return ops::mean_all(ops::sigmoid(ops::upsample_bilinear(v[0], 7, 9))); };
        CHECK(gradcheck(f, {x}) < 1e-6);
    }
    SUBCASE("matmul, transposed matmul and row softmax") {
        Var a = Var::leaf(random_tensor({4, 3}, rng), true);
        Var b = Var::leaf(random_tensor({3, 5}, rng), true);
        Var c = Var::leaf(random_tensor({6, 5}, rng), true);
        auto f = [](const std::vector<Var>& v) {
            Var s = ops::softmax_rows(ops::matmul_nt(ops::matmul(v[0], v[1]), v[2]));
            return ops::mean_all(ops::sigmoid(ops::scale(s, 3.0)));
        };
        CHECK(gradcheck(f, {a, b, c}) < 1e-6);
    }
    SUBCASE("concat, mean and reshape") {
        Var a = Var::leaf(random_tensor({1, 3, 3}, rng), true);
        Var b = Var::leaf(random_tensor({2, 3, 3}, rng), true);
        Var c = Var::leaf(random_tensor({3, 3, 3}, rng), true);
        auto f = [](const std::vector<Var>& v) {
            std::vector<Var> parts{v[0], v[1]};
            Var cat = ops::concat_channels(parts);
            std::vector<Var> both{cat, v[2]};
            Var m = ops::mean_of(both);
            Var t = ops::map_to_tokens(m);
            std::vector<Var> rows{t, ops::relu(t)};
            return ops::mean_all(ops::sigmoid(ops::concat_rows(rows)));
        };
        CHECK(gradcheck(f, {a, b, c}) < 1e-5);
    }
}

TEST_CASE("conv2d keeps constant maps constant under replicate padding") {
    Rng rng(2);
    Var x = Var::constant(Tensor({3, 8, 8}, 0.7));
    Var w = Var::constant(random_tensor({4, 3, 3, 3}, rng));
    Var b = Var::constant(random_tensor({4}, rng));
    Tensor y = ops::conv2d(x, w, b).value();
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 64; ++i) CHECK(y[c * 64 + i] == doctest::Approx(y[c * 64]).epsilon(1e-12));
}

TEST_CASE("conv2d matches a direct loop") {
    Rng rng(8);
    Tensor x = random_tensor({2, 5, 5}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Tensor b = random_tensor({3}, rng);
    Tensor y = ops::conv2d(Var::constant(x), Var::constant(w), Var::constant(b)).value();
    auto clampi = [](int v) { return std::clamp(v, 0, 4); };
    double worst = 0.0;
    for (int o = 0; o < 3; ++o)
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 5; ++j) {
                double s = b[o];
                for (int c = 0; c < 2; ++c)
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx)
                            s += w[((o * 2 + c) * 3 + dy + 1) * 3 + dx + 1] * x.at(c, clampi(i + dy), clampi(j + dx));
                worst = std::max(worst, std::abs(s - y.at(o, i, j)));
            }
    CHECK(worst < 1e-12);
}

TEST_CASE("nearest resize picks floor(dst * in / out)") {
    Tensor x({1, 4, 4});
    for (int i = 0; i < 16; ++i) x[i] = i;
    Tensor y = ops::resize_nearest(x, 2, 2);
    CHECK(y[0] == 0);
    CHECK(y[1] == 2);
    CHECK(y[2] == 8);
    CHECK(y[3] == 10);
}

TEST_CASE("flop counter attributes work to the active category") {
    flops::reset();
    Var a = Var::constant(Tensor({4, 3}, 1.0));
    Var b = Var::constant(Tensor({3, 5}, 1.0));
    {
        flops::Scope s(flops::Category::Attention);
        ops::matmul(a, b);
    }
    CHECK(flops::count(flops::Category::Attention) == 2ull * 4 * 3 * 5);
    CHECK(flops::total() == flops::count(flops::Category::Attention));
    flops::reset();
    CHECK(flops::total() == 0);
}

TEST_CASE("parameter store: freeze, snapshot, AdamW") {
    ParamStore store;
    Rng rng(1);
    store.add("decoder.mapper.s0.conv0.weight", he_normal({2, 2}, 2, rng));
    store.add("decoder.classifier.weight", Tensor({2}, 0.5));
    CHECK_THROWS_WITH_AS(store.get("nope"), doctest::Contains("nope"), std::out_of_range);
    CHECK(block_of("decoder.classifier.weight") == Block::Classifier);
    CHECK_THROWS(block_of("mystery.weight"));

    store.freeze_all();
    store.set_trainable(Block::Classifier, true);
    CHECK_FALSE(store.get("decoder.mapper.s0.conv0.weight").requires_grad());
    CHECK(store.get("decoder.classifier.weight").requires_grad());

    const Snapshot before = store.snapshot();
    Var w = store.get("decoder.classifier.weight");
    backward(ops::mean_all(ops::scale(w, 2.0)));
    AdamWConfig cfg;
    AdamW opt(cfg);
    opt.step(store);
    const Snapshot after = store.snapshot();
    CHECK(bit_equal(before.at("decoder.mapper.s0.conv0.weight"), after.at("decoder.mapper.s0.conv0.weight")));
    // First Adam step moves each weight by about lr against the gradient sign.
    CHECK(after.at("decoder.classifier.weight")[0] == doctest::Approx(0.5 - 1e-3 - 1e-3 * 1e-2 * 0.5).epsilon(1e-5));
    for (std::size_t i = 0; i < 2; ++i) {
        const double v = after.at("decoder.classifier.weight")[i];
        CHECK(static_cast<double>(static_cast<float>(v)) == v);
    }
    store.restore(before);
    CHECK(bit_equal(store.get("decoder.classifier.weight").value(), before.at("decoder.classifier.weight")));
}
