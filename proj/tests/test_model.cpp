#include <cmath>
#include <set>
#include <type_traits>

#include "distillfss/flops.hpp"
#include "distillfss/ops.hpp"
#include "distillfss/student.hpp"
#include "distillfss/teacher.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace distillfss;
using testutil::random_tensor;

// The decoder's skip input can only be minted from query features.
static_assert(!std::is_constructible_v<QuerySkip, Var>);
static_assert(!std::is_constructible_v<QuerySkip, Tensor>);
static_assert(!std::is_constructible_v<QuerySkip, MultiScaleFeatures>);
// Support encodings carry tokens and labels only.
static_assert(sizeof(EncodedSupport) == sizeof(std::vector<Var>) + sizeof(std::vector<Tensor>));
// The student forward takes the query image and a class, nothing else.
static_assert(std::is_same_v<decltype(&student_forward), StudentOutput (*)(const Student&, const Image&, int)>);
static_assert(std::is_same_v<decltype(&student_multiclass_forward),
                             MulticlassPrediction (*)(const Student&, const Image&, int)>);

namespace {

Image random_image(int size, Rng& rng) {
    Image img;
    img.height = img.width = size;
    img.rgb.resize(static_cast<std::size_t>(size) * size * 3);
    for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    return img;
}

// softmax(Q K^T / sqrt(d)) m computed one query pixel at a time.
std::vector<double> naive_attention(const Tensor& q, const Tensor& s, const Tensor& mask, const Tensor& wq,
                                    const Tensor& wk) {
    const int nq = q.dim(0), ns = s.dim(0), c = q.dim(1), d = wq.dim(1);
    std::vector<double> out(static_cast<std::size_t>(nq));
    for (int i = 0; i < nq; ++i) {
        std::vector<double> qi(static_cast<std::size_t>(d), 0.0);
        for (int a = 0; a < d; ++a)
            for (int b = 0; b < c; ++b) qi[a] += q.at(i, b) * wq.at(b, a);
        std::vector<double> logits(static_cast<std::size_t>(ns));
        double mx = -1e300;
        for (int j = 0; j < ns; ++j) {
            double dot = 0.0;
            for (int a = 0; a < d; ++a) {
                double kj = 0.0;
                for (int b = 0; b < c; ++b) kj += s.at(j, b) * wk.at(b, a);
                dot += qi[a] * kj;
            }
            logits[j] = dot / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, logits[j]);
        }
        double z = 0.0, acc = 0.0;
        for (int j = 0; j < ns; ++j) {
            const double e = std::exp(logits[j] - mx);
            z += e;
            acc += e * mask[j];
        }
        out[i] = acc / z;
    }
    return out;
}

AttentionParams single_slot(const Tensor& wq, const Tensor& wk) {
    AttentionParams p;
    p.wq.push_back(Var::constant(wq));
    p.wk.push_back(Var::constant(wk));
    return p;
}

}  // namespace

TEST_CASE("scale spec and feature shapes") {
    ArchConfig arch = default_arch();
    CHECK(arch.backbone.scales.total_layers() == 6);
    CHECK(arch.backbone.scales.required_multiple() == 32);
    Teacher t = Teacher::create(arch, 1);
    MultiScaleFeatures f = t.backbone().extract(Tensor({3, 64, 64}, 0.1));
    REQUIRE(f.layers.size() == 6);
    const int expect[6] = {8, 8, 4, 4, 2, 2};
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(f.layers[i].map.dim(1) == expect[i]);
        CHECK(f.layers[i].map.dim(2) == expect[i]);
    }
    CHECK(f.skip.dim(1) == 16);
    CHECK(f.skip.dim(0) == 16);
    CHECK_THROWS_WITH(t.backbone().extract(Tensor({3, 48, 64})), doctest::Contains("multiple of 32"));
}

TEST_CASE("feature pyramid covers 16, 8, 4 and 2") {
    Teacher t = Teacher::create(default_arch(), 1);
    MultiScaleFeatures f = t.backbone().extract(Tensor({3, 64, 64}, 0.0));
    std::set<int> sizes{f.skip.dim(1)};
    for (const auto& l : f.layers) sizes.insert(l.map.dim(1));
    CHECK(sizes == std::set<int>{2, 4, 8, 16});
}

TEST_CASE("backbone is deterministic and spatially uniform on constant input") {
    Teacher t = Teacher::create(default_arch(), 3);
    Rng rng(1);
    Tensor img = random_tensor({3, 64, 64}, rng);
    MultiScaleFeatures a = t.backbone().extract(img);
    MultiScaleFeatures b = t.backbone().extract(img);
    for (std::size_t i = 0; i < a.layers.size(); ++i) CHECK(bit_equal(a.layers[i].map.value(), b.layers[i].map.value()));

    MultiScaleFeatures z = t.backbone().extract(Tensor({3, 64, 64}, 0.0));
    for (const auto& l : z.layers) {
        const Tensor& m = l.map.value();
        const int hw = m.dim(1) * m.dim(2);
        for (int c = 0; c < m.dim(0); ++c)
            for (int p = 0; p < hw; ++p) CHECK(m[c * hw + p] == doctest::Approx(m[c * hw]).epsilon(1e-12));
    }
}

TEST_CASE("toy backbone stays under a million parameters") {
    Teacher t = Teacher::create(default_arch(), 1);
    std::size_t n = 0;
    for (const auto& [name, v] : t.params().entries())
        if (block_of(name) == Block::Backbone) n += v.value().size();
    CHECK(n < 1000000);
    CHECK(n > 0);
}

TEST_CASE("tokens and positional encoding") {
    Tensor pe = positional_encoding(2, 3, 8);
    TokenSequence zero = flatten_with_pe(Var::constant(Tensor({8, 2, 3}, 0.0)));
    CHECK(zero.tokens.shape() == Shape{6, 8});
    CHECK(bit_equal(zero.tokens.value(), pe));

    Rng rng(4);
    Tensor map = random_tensor({8, 4, 4}, rng);
    TokenSequence seq = flatten_with_pe(Var::constant(map));
    Tensor back = unflatten(seq);
    Tensor pe_map = unflatten(flatten_with_pe(Var::constant(Tensor({8, 4, 4}, 0.0))));
    double worst = 0.0;
    for (std::size_t i = 0; i < map.size(); ++i) worst = std::max(worst, std::abs(back[i] - pe_map[i] - map[i]));
    CHECK(worst < 1e-15);

    // Equal features at every position still give distinct tokens.
    TokenSequence flat = flatten_with_pe(Var::constant(Tensor({8, 4, 4}, 0.3)));
    for (int a = 0; a < 16; ++a)
        for (int b = a + 1; b < 16; ++b) {
            double d = 0.0;
            for (int c = 0; c < 8; ++c) d += std::abs(flat.tokens.value().at(a, c) - flat.tokens.value().at(b, c));
            CHECK(d > 1e-6);
        }
}

TEST_CASE("mask downsampling") {
    Tensor ones({1, 8, 8}, 1.0);
    Tensor col = downsample_mask(ones, 4, 4);
    CHECK(col.shape() == Shape{16, 1});
    for (std::size_t i = 0; i < 16; ++i) CHECK(col[i] == 1.0);
    Tensor zeros_col = downsample_mask(Tensor({1, 8, 8}, 0.0), 2, 2);
    for (std::size_t i = 0; i < 4; ++i) CHECK(zeros_col[i] == 0.0);

    Tensor block({1, 4, 4}, 0.0);
    block.at(0, 2, 2) = block.at(0, 2, 3) = block.at(0, 3, 2) = block.at(0, 3, 3) = 1.0;
    Tensor small = downsample_mask(block, 2, 2);
    CHECK(small[0] == 0.0);
    CHECK(small[1] == 0.0);
    CHECK(small[2] == 0.0);
    CHECK(small[3] == 1.0);
}

TEST_CASE("cross attention equals the naive loop") {
    Rng rng(11);
    for (int d : {4, 16}) {
        Tensor q = random_tensor({4, d}, rng), s = random_tensor({4, d}, rng);
        Tensor wq = random_tensor({d, d}, rng), wk = random_tensor({d, d}, rng);
        Tensor mask({4, 1});
        for (int i = 0; i < 4; ++i) mask[i] = rng.uniform_int(0, 1);
        Var out = cross_attention(TokenSequence{Var::constant(q), 2, 2}, Var::constant(s), mask, single_slot(wq, wk), 0);
        CHECK(out.shape() == Shape{1, 2, 2});
        const auto ref = naive_attention(q, s, mask, wq, wk);
        for (int i = 0; i < 4; ++i) CHECK(std::abs(out.value()[i] - ref[i]) < 1e-6);
    }
}

TEST_CASE("attention mask invariants") {
    Rng rng(12);
    Tensor q = random_tensor({16, 8}, rng, -3, 3), s = random_tensor({32, 8}, rng, -3, 3);
    AttentionParams p = single_slot(random_tensor({8, 8}, rng), random_tensor({8, 8}, rng));
    TokenSequence qs{Var::constant(q), 4, 4};
    Tensor ones({32, 1}, 1.0), zeros({32, 1}, 0.0), binary({32, 1});
    for (int i = 0; i < 32; ++i) binary[i] = i % 3 == 0;
    for (std::size_t i = 0; i < 16; ++i) {
        CHECK(std::abs(cross_attention(qs, Var::constant(s), ones, p, 0).value()[i] - 1.0) < 1e-6);
        CHECK(cross_attention(qs, Var::constant(s), zeros, p, 0).value()[i] == 0.0);
        const double v = cross_attention(qs, Var::constant(s), binary, p, 0).value()[i];
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("attention shape errors name the axis") {
    Rng rng(1);
    AttentionParams p = single_slot(random_tensor({8, 8}, rng), random_tensor({8, 8}, rng));
    TokenSequence bad_q{Var::constant(Tensor({5, 8})), 2, 2};
    CHECK_THROWS_WITH(cross_attention(bad_q, Var::constant(Tensor({4, 8})), Tensor({4, 1}), p, 0),
                      doctest::Contains("query token axis"));
    TokenSequence q{Var::constant(Tensor({4, 8})), 2, 2};
    CHECK_THROWS_WITH(cross_attention(q, Var::constant(Tensor({4, 8})), Tensor({3, 1}), p, 0),
                      doctest::Contains("support token axis"));
    CHECK_THROWS_WITH(cross_attention(q, Var::constant(Tensor({4, 6})), Tensor({4, 1}), p, 0),
                      doctest::Contains("channel axis"));
}

TEST_CASE("multi-shot keys") {
    Rng rng(3);
    Tensor t = random_tensor({4, 8}, rng);
    Tensor m({4, 1});
    m[1] = 1.0;
    std::vector<Var> one{Var::constant(t)};
    std::vector<Tensor> one_m{m};
    SupportKeys k1 = multi_shot_keys(one, one_m);
    CHECK(bit_equal(k1.tokens.value(), t));
    CHECK(bit_equal(k1.mask, m));

    std::vector<Var> three{Var::constant(t), Var::constant(t), Var::constant(t)};
    std::vector<Tensor> three_m{m, m, m};
    CHECK(multi_shot_keys(three, three_m).mask.dim(0) == 12);

    AttentionParams p = single_slot(random_tensor({8, 8}, rng), random_tensor({8, 8}, rng));
    TokenSequence q{Var::constant(random_tensor({4, 8}, rng)), 2, 2};
    std::vector<Var> two{Var::constant(t), Var::constant(t)};
    std::vector<Tensor> two_m{m, m};
    SupportKeys k2 = multi_shot_keys(two, two_m);
    Tensor a1 = cross_attention(q, k1.tokens, k1.mask, p, 0).value();
    Tensor a2 = cross_attention(q, k2.tokens, k2.mask, p, 0).value();
    CHECK(max_abs_diff(a1, a2) < 1e-6);
}

TEST_CASE("teacher attention maps are invariant to shot order") {
    Teacher t = Teacher::create(default_arch(), 2);
    Dataset ds = synth_shapes(4, 64, 2, 5);
    EncodedQuery q = encode_query(t.backbone(), ds.items[0].image);
    std::vector<EncodedSupport> enc;
    for (std::size_t i = 1; i < 4; ++i) enc.push_back(encode_support(t.backbone(), ds.items[i]));
    std::vector<const EncodedSupport*> fwd{&enc[0], &enc[1], &enc[2]}, rev{&enc[2], &enc[0], &enc[1]};
    for (int c = 1; c <= 2; ++c) {
        AttentionMapSet a = attend(t, q, fwd, c), b = attend(t, q, rev, c);
        for (std::size_t l = 0; l < a.size(); ++l) CHECK(max_abs_diff(a.maps()[l].value(), b.maps()[l].value()) < 1e-6);
    }
    // A class with no foreground in any shot attends to nothing.
    LabeledImage blank = ds.items[1];
    blank.mask = MultiClassMask(64, 64, 2, std::vector<std::uint8_t>(64 * 64, 0));
    EncodedSupport eb = encode_support(t.backbone(), blank);
    std::vector<const EncodedSupport*> only{&eb};
    const AttentionMapSet empty = attend(t, q, only, 1);
    for (const auto& m : empty.maps())
        for (std::size_t i = 0; i < m.value().size(); ++i) CHECK(m.value()[i] == 0.0);
}

TEST_CASE("teacher forward shape, batching and class checks") {
    Teacher t = Teacher::create(default_arch(), 2);
    Dataset ds = synth_shapes(6, 64, 2, 5);
    SupportSet support(std::vector<LabeledImage>(ds.items.begin() + 1, ds.items.end()), 2);
    Episode ep(ds.items[0].image, ds.items[0].mask, support);
    TeacherOutput out = teacher_forward(t, ep, 1);
    CHECK(out.logits.shape() == Shape{1, 64, 64});
    CHECK(out.maps.size() == 6);
    TeacherOutput batched = teacher_forward(t, ep, 1, 10);
    CHECK(bit_equal(out.logits.value(), batched.logits.value()));
    CHECK_THROWS(teacher_forward(t, ep, 3));

    MulticlassPrediction a = multiclass_forward(t, ep, 0);
    MulticlassPrediction b = multiclass_forward(t, ep, 5);
    CHECK(a.mask == b.mask);
}

TEST_CASE("decoder contracts") {
    Teacher t = Teacher::create(default_arch(), 4);
    const Decoder& dec = t.decoder();
    SUBCASE("mapper keeps spatial size and uses the configured width") {
        std::vector<Var> stacks{Var::constant(Tensor({2, 8, 8}, 0.0)), Var::constant(Tensor({2, 4, 4}, 0.0)),
                                Var::constant(Tensor({2, 2, 2}, 0.0))};
        auto mapped = dec.conv_mapper(stacks);
        REQUIRE(mapped.size() == 3);
        for (std::size_t s = 0; s < 3; ++s) {
            CHECK(mapped[s].dim(0) == 64);
            CHECK(mapped[s].dim(1) == stacks[s].dim(1));
            const Tensor& v = mapped[s].value();
            for (std::size_t i = 0; i < v.size(); ++i) {
                const std::size_t hw = static_cast<std::size_t>(v.dim(1) * v.dim(2));
                CHECK(v[i] == doctest::Approx(v[(i / hw) * hw]).epsilon(1e-12));
            }
        }
        Var merged = dec.conv_merge(mapped);
        CHECK(merged.dim(1) == 8);
        std::vector<Var> bad{Var::constant(Tensor({3, 8, 8})), stacks[1], stacks[2]};
        CHECK_THROWS_WITH(dec.conv_mapper(bad), doctest::Contains("scale 0"));
    }
    SUBCASE("merge output changes when the input doubles") {
        Rng rng(2);
        std::vector<Var> in{Var::constant(random_tensor({64, 8, 8}, rng)), Var::constant(random_tensor({64, 4, 4}, rng)),
                            Var::constant(random_tensor({64, 2, 2}, rng))};
        std::vector<Var> twice;
        for (const auto& v : in) twice.push_back(ops::scale(v, 2.0));
        Tensor a = dec.conv_merge(in).value(), b = dec.conv_merge(twice).value();
        CHECK(max_abs_diff(a, b) > 1e-6);
    }
    SUBCASE("mixer input width comes from configuration alone") {
        CHECK(dec.mixer_input_channels() == dec.config().merge_width + dec.config().skip_width);
    }
    SUBCASE("zero inputs decode to a constant logit map of the query size") {
        QueryFeatures qf;
        qf.features.skip = Var::constant(Tensor({16, 16, 16}, 0.0));
        Var logits = dec.mixer(Var::constant(Tensor({64, 8, 8}, 0.0)), qf.skip(), 64, 64);
        CHECK(logits.shape() == Shape{1, 64, 64});
        for (std::size_t i = 0; i < logits.value().size(); ++i)
            CHECK(logits.value()[i] == doctest::Approx(logits.value()[0]).epsilon(1e-12));
    }
}

TEST_CASE("single-scale merge is a passthrough convolution") {
    ArchConfig arch = default_arch();
    arch.backbone.scales = ScaleSpec{2, 4, 5, {0, 2}};
    arch.backbone.stage_channels = {16, 32};
    arch.sync();
    Teacher t = Teacher::create(arch, 1);
    std::vector<Var> mapped{Var::constant(Tensor({64, 2, 2}, 0.5))};
    CHECK(t.decoder().conv_merge(mapped).shape() == Shape{64, 2, 2});
}

TEST_CASE("prediction assembly") {
    Tensor p1({1, 1, 4}), p2({1, 1, 4});
    const double a[4] = {0.7, 0.3, 0.5, 0.9}, b[4] = {0.7, 0.4, 0.6, 0.2};
    for (int i = 0; i < 4; ++i) {
        p1[i] = a[i];
        p2[i] = b[i];
    }
    std::vector<Tensor> both{p1, p2};
    MultiClassMask m = assemble_prediction(both);
    CHECK(m.labels() == std::vector<std::uint8_t>{1, 0, 2, 1});
    std::vector<Tensor> single{p1};
    CHECK(assemble_prediction(single).labels() == std::vector<std::uint8_t>{1, 0, 0, 1});
}

TEST_CASE("ConvDist heads") {
    Teacher t = Teacher::create(default_arch(), 5);
    Student s = Student::from_teacher(t, 2, 9);
    Rng rng(1);
    for (std::size_t l = 0; l < 6; ++l) {
        const int c = t.backbone().layer_channels()[l];
        Var out = conv_dist(Var::constant(random_tensor({c, 4, 4}, rng, -5, 5)), s.head(1, l));
        CHECK(out.shape() == Shape{1, 4, 4});
        for (std::size_t i = 0; i < out.value().size(); ++i) CHECK(out.value()[i] == 0.5);
    }
    ConvDistLayer zero{Var::constant(Tensor({8, 8, 3, 3})), Var::constant(Tensor({8})),
                       Var::constant(Tensor({1, 8, 1, 1})), Var::constant(Tensor({1}))};
    Var z = conv_dist(Var::constant(Tensor({8, 5, 5}, 0.0)), zero);
    for (std::size_t i = 0; i < z.value().size(); ++i) CHECK(z.value()[i] == 0.5);

    ConvDistLayer rnd{Var::constant(random_tensor({8, 8, 3, 3}, rng)), Var::constant(random_tensor({8}, rng)),
                      Var::constant(random_tensor({1, 8, 1, 1}, rng, -0.2, 0.2)), Var::constant(random_tensor({1}, rng))};
    Var r = conv_dist(Var::constant(random_tensor({8, 5, 5}, rng, -3, 3)), rnd);
    for (std::size_t i = 0; i < r.value().size(); ++i) {
        CHECK(r.value()[i] > 0.0);
        CHECK(r.value()[i] < 1.0);
    }
    CHECK_THROWS_WITH(conv_dist(Var::constant(Tensor({7, 5, 5})), rnd), doctest::Contains("8 input channels"));
}

TEST_CASE("student shares backbone and decoder with its teacher") {
    Teacher t = Teacher::create(default_arch(), 5);
    Student s = Student::from_teacher(t, 2, 9);
    for (const auto& [name, v] : s.params().entries()) {
        const Block b = block_of(name);
        CHECK(b != Block::AttentionWeights);
        if (b != Block::ConvDist) CHECK(v.node() == t.params().get(name).node());
    }
    CHECK_THROWS(s.head(3, 0));
}

TEST_CASE("student forward needs only the query") {
    Teacher t = Teacher::create(default_arch(), 5);
    Student s = Student::from_teacher(t, 2, 9);
    Rng rng(2);
    Image img = random_image(64, rng);
    StudentOutput out = student_forward(s, img, 1);
    CHECK(out.logits.shape() == Shape{1, 64, 64});
    CHECK(out.maps.size() == 6);

    flops::reset();
    student_multiclass_forward(s, img);
    const auto base_flops = flops::total();
    Student tagged = s.clone();
    tagged.metadata["support_size"] = "50";
    flops::reset();
    student_multiclass_forward(tagged, img);
    CHECK(flops::total() == base_flops);
    CHECK(flops::count(flops::Category::Attention) == 0);
}

TEST_CASE("batched support encoding matches one image at a time") {
    Teacher t = Teacher::create(default_arch(), 31);
    Dataset ds = synth_shapes(3, 64, 2, 4);
    std::vector<EncodedSupport> group = encode_support_group(t.backbone(), ds.items);
    REQUIRE(group.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        EncodedSupport one = encode_support(t.backbone(), ds.items[i]);
        REQUIRE(one.tokens.size() == group[i].tokens.size());
        for (std::size_t l = 0; l < one.tokens.size(); ++l) {
            CHECK(bit_equal(one.tokens[l].value(), group[i].tokens[l].value()));
            CHECK(bit_equal(one.labels[l], group[i].labels[l]));
        }
    }
}
