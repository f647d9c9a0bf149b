#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "distillfss/checkpoint.hpp"
#include "distillfss/config.hpp"
#include "distillfss/eval.hpp"
#include "distillfss/metrics.hpp"
#include "distillfss/training.hpp"
#include "doctest.h"

using namespace distillfss;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("distillfss_io_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

MultiClassMask row(int n, std::vector<std::uint8_t> labels) {
    const int w = static_cast<int>(labels.size());
    return MultiClassMask(1, w, n, std::move(labels));
}

}  // namespace

TEST_CASE("config parsing") {
    Config c = Config::parse("top = 1\n# comment\n[train]\nlr = 0.01  # trailing\nepochs=7\n\n[policy]\nblocks = a,b\n");
    CHECK(c.get_int("top", 0) == 1);
    CHECK(c.get_double("train.lr", 0) == doctest::Approx(0.01));
    CHECK(c.get_int("train.epochs", 0) == 7);
    CHECK(c.get_string("policy.blocks", "") == "a,b");
    CHECK(c.get_int("missing", 42) == 42);
    CHECK_THROWS_WITH(Config::parse("a = 1\nnot a pair\n"), doctest::Contains("line 2"));
    CHECK_THROWS_WITH(Config::parse("[open\n"), doctest::Contains("line 1"));
    Config bad = Config::parse("train.epochs = many\n");
    CHECK_THROWS_WITH(bad.get_int("train.epochs", 0), doctest::Contains("train.epochs"));

    Config again = Config::parse(c.serialize());
    CHECK(again.values() == c.values());

    Config over = Config::parse("train.lr = 0.5\n");
    c.merge(over);
    CHECK(c.get_double("train.lr", 0) == 0.5);
    CHECK(c.get_ints("x", {1, 2}) == std::vector<int>{1, 2});
    c.set("x", join_ints({3, 4, 5}));
    CHECK(c.get_ints("x", {}) == std::vector<int>{3, 4, 5});
    c.set("flag", "true");
    CHECK(c.get_bool("flag", false));
}

TEST_CASE("train config validation names the field") {
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("learning_rate"), std::invalid_argument);
    cfg.learning_rate = -1.0;
    CHECK_THROWS_WITH(cfg.validate(), doctest::Contains("learning_rate"));
    cfg = TrainConfig{};
    cfg.patience = 0;
    CHECK_THROWS_WITH(cfg.validate(), doctest::Contains("patience"));
    cfg = TrainConfig{};
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.conditioning_for(10) == 5);
    CHECK(cfg.conditioning_for(3) == 2);
    CHECK(cfg.conditioning_for(2) == 1);
}

TEST_CASE("IoU oracles") {
    SUBCASE("hand-computed 1/3") {
        Metrics m = miou(row(1, {1, 1, 0, 0}), row(1, {1, 0, 1, 0}), {1});
        CHECK(m.per_class[0].tp == 1);
        CHECK(m.per_class[0].fp == 1);
        CHECK(m.per_class[0].fn == 1);
        CHECK(m.miou == doctest::Approx(1.0 / 3.0));
    }
    SUBCASE("identity and disjoint") {
        MultiClassMask t = row(2, {0, 1, 2, 2, 1});
        CHECK(miou(t, t, {1, 2}).miou == 1.0);
        CHECK(miou(row(2, {2, 2, 1, 1, 0}), t, {1, 2}).miou == 0.0);
    }
    SUBCASE("classes absent from both masks are skipped") {
        Metrics m = miou(row(2, {1, 0}), row(2, {1, 0}), {1, 2});
        CHECK(std::isnan(m.per_class[1].iou()));
        CHECK(m.miou == 1.0);
        CHECK(std::isnan(miou(row(2, {0, 0}), row(2, {0, 0}), {1, 2}).miou));
    }
    SUBCASE("accumulation is global, not a per-image mean") {
        IouAccumulator acc = IouAccumulator::for_classes(1);
        acc.add(row(1, {1, 0, 0, 0}), row(1, {1, 0, 0, 0}));
        acc.add(row(1, {1, 0, 0, 0}), row(1, {0, 1, 1, 0}));
        Metrics m = acc.result();
        CHECK(m.images == 2);
        CHECK(m.miou == doctest::Approx(0.25));
        CHECK_THROWS(acc.add(row(1, {1}), row(1, {1, 0})));
    }
}

TEST_CASE("checkpoint round trip is bit exact") {
    const fs::path dir = scratch("roundtrip");
    Teacher t = Teacher::create(default_arch(), 21);
    Config run;
    run.set("train.seed", "21");
    save_checkpoint(make_checkpoint(t, run, "miou 0.5\n"), dir / "t.ckpt");
    CHECK_FALSE(fs::exists(dir / "t.ckpt.tmp"));
    Checkpoint ck = load_checkpoint(dir / "t.ckpt");
    CHECK(ck.kind == CheckpointKind::Teacher);
    CHECK(ck.metrics == "miou 0.5\n");
    CHECK(ck.config.get_string("train.seed", "") == "21");
    Teacher back = teacher_from_checkpoint(ck);
    for (const auto& [name, v] : t.params().entries()) CHECK(bit_equal(v.value(), back.params().get(name).value()));

    save_checkpoint(make_checkpoint(back, run, "miou 0.5\n"), dir / "t2.ckpt");
    CHECK(slurp(dir / "t.ckpt") == slurp(dir / "t2.ckpt"));

    CHECK_THROWS_WITH(save_checkpoint(ck, dir / "nowhere" / "x.ckpt"), doctest::Contains("does not exist"));
    std::ofstream(dir / "junk.ckpt") << "hello\n";
    CHECK_THROWS(load_checkpoint(dir / "junk.ckpt"));
}

TEST_CASE("student checkpoints load and run without support data") {
    const fs::path dir = scratch("student");
    Teacher t = Teacher::create(default_arch(), 22);
    Student s = Student::from_teacher(t, 2, 5);
    s.metadata["support_size"] = "10";
    save_checkpoint(make_checkpoint(s, Config{}, ""), dir / "s.ckpt");
    Checkpoint ck = load_checkpoint(dir / "s.ckpt");
    CHECK(ck.kind == CheckpointKind::Student);
    for (const auto& [name, tensor] : ck.blocks) CHECK(block_of(name) != Block::AttentionWeights);

    Student back = student_from_checkpoint(ck);
    CHECK(back.num_classes() == 2);
    CHECK(back.metadata.at("support_size") == "10");
    Dataset test = synth_shapes(2, 64, 2, 3, Split::Test);
    Metrics m = evaluate(&back, test, nullptr);
    CHECK(m.images == 2);

    Image img = test.items[0].image;
    CHECK(student_multiclass_forward(back, img).mask == student_multiclass_forward(s, img).mask);

    CHECK_THROWS_WITH(student_from_checkpoint(make_checkpoint(t, Config{}, "")), doctest::Contains("ConvDist"));
    CHECK_THROWS(teacher_from_checkpoint(ck));
}

TEST_CASE("evaluate argument checks") {
    Teacher t = Teacher::create(default_arch(), 2);
    Student s = Student::from_teacher(t, 2, 1);
    Dataset train = synth_shapes(8, 64, 2, 1);
    Dataset test = synth_shapes(2, 64, 2, 1, Split::Test);
    SupportSet support = build_support_set(train, 4, 0);
    CHECK_THROWS_WITH(evaluate(&s, test, &support), doctest::Contains("no support set"));
    CHECK_THROWS_WITH(evaluate(&t, test, nullptr), doctest::Contains("needs a support set"));
    Dataset three = synth_shapes(2, 64, 3, 1, Split::Test);
    CHECK_THROWS(evaluate(&s, three, nullptr));

    Metrics a = evaluate(&t, test, &support, 4);
    Metrics b = evaluate(&t, test, &support, 100);
    Metrics c = evaluate(&t, test, &support, 0);
    CHECK(a.miou == b.miou);
    CHECK(a.miou == c.miou);
}

TEST_CASE("bench report") {
    Teacher t = Teacher::create(default_arch(), 3);
    Student s = Student::from_teacher(t, 1, 1);
    BenchOptions opt;
    opt.shots = {1, 2, 3, 4};
    opt.image_size = 32;
    std::vector<BenchRecord> recs = bench_inference(&t, opt);
    const auto student_recs = bench_inference(&s, opt);
    recs.insert(recs.end(), student_recs.begin(), student_recs.end());
    REQUIRE(recs.size() == 8);
    for (const auto& r : student_recs) CHECK(r.flops == student_recs[0].flops);
    for (std::size_t i = 1; i < 4; ++i) CHECK(recs[i].flops > recs[i - 1].flops);

    const fs::path a = scratch("report_a"), b = scratch("report_b");
    std::vector<MiouPoint> points{{"student", 5, 0.5}, {"student", 10, 0.6}};
    ReportFiles fa = emit_report(recs, points, a);
    emit_report(recs, points, b);
    CHECK(fa.plots.size() == 3);
    const std::string csv = slurp(a / "bench.csv");
    CHECK(csv.rfind(std::string(kBenchCsvHeader) + "\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);
    for (const char* f : {"bench.csv", "latency_vs_k.png", "memory_vs_k.png", "miou_vs_m.png"})
        CHECK(slurp(a / f) == slurp(b / f));

    ReportFiles without_points = emit_report(recs, {}, scratch("report_c"));
    CHECK(without_points.plots.size() == 2);

    const fs::path e = scratch("report_empty");
    ReportFiles fe = emit_report({}, {}, e);
    CHECK(fe.plots.empty());
    CHECK(slurp(e / "bench.csv") == std::string(kBenchCsvHeader) + "\n");

    BenchOptions few;
    few.repeats = 5;
    CHECK_THROWS_WITH(few.validate(), doctest::Contains("repeats"));
}
