#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "distillfss/checkpoint.hpp"
#include "distillfss/config.hpp"
#include "distillfss/eval.hpp"
#include "distillfss/training.hpp"

namespace fs = std::filesystem;
using namespace distillfss;

namespace {

// Flags shared by every subcommand. Unset flags leave the config untouched.
struct CommonFlags {
    std::string config_path;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs;
    std::optional<double> lr;
    std::optional<double> gamma;
    std::optional<double> alpha;
    std::optional<std::string> policy;
    std::optional<int> support_batch;
    bool no_dist_loss = false;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool training) {
    cmd->add_option("--config", f.config_path, "key = value config file");
    cmd->add_option("--out", f.out, "output directory")->required();
    cmd->add_option("--seed", f.seed, "random seed");
    if (!training) return;
    cmd->add_option("--epochs", f.epochs, "training epochs");
    cmd->add_option("--lr", f.lr, "AdamW learning rate");
    cmd->add_option("--gamma", f.gamma, "focal loss gamma");
    cmd->add_option("--alpha", f.alpha, "focal loss alpha");
}

template <class T>
std::string str(const T& v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

Config resolve(const CommonFlags& f, Config defaults) {
    if (!f.config_path.empty()) defaults.merge(Config::load(f.config_path));
    if (f.seed) defaults.set("seed", str(*f.seed));
    if (f.epochs) defaults.set("train.epochs", str(*f.epochs));
    if (f.lr) defaults.set("train.learning_rate", str(*f.lr));
    if (f.gamma) defaults.set("train.gamma", str(*f.gamma));
    if (f.alpha) defaults.set("train.alpha", str(*f.alpha));
    if (f.policy) defaults.set("train.policy", *f.policy);
    if (f.support_batch) defaults.set("train.support_batch", str(*f.support_batch));
    if (f.no_dist_loss) defaults.set("train.dist_loss", "false");
    return defaults;
}

TrainConfig train_config(const Config& c) {
    TrainConfig t;
    t.learning_rate = c.get_double("train.learning_rate", t.learning_rate);
    t.weight_decay = c.get_double("train.weight_decay", t.weight_decay);
    t.focal.gamma = c.get_double("train.gamma", t.focal.gamma);
    t.focal.alpha = c.get_double("train.alpha", t.focal.alpha);
    t.weights.dist = c.get_double("train.dist_weight", t.weights.dist);
    t.weights.seg_student = c.get_double("train.seg_student_weight", t.weights.seg_student);
    t.weights.seg_teacher = c.get_double("train.seg_teacher_weight", t.weights.seg_teacher);
    t.epochs = static_cast<int>(c.get_int("train.epochs", t.epochs));
    t.conditioning_count = static_cast<int>(c.get_int("train.conditioning_count", t.conditioning_count));
    t.patience = static_cast<int>(c.get_int("train.patience", t.patience));
    t.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
    t.support_batch = static_cast<int>(c.get_int("train.support_batch", t.support_batch));
    t.include_absent_classes = c.get_bool("train.include_absent_classes", t.include_absent_classes);
    t.validate();
    return t;
}

void echo(const std::string& command, const Config& c) {
    std::cout << "# " << command << " resolved config\n" << c.serialize() << std::flush;
}

fs::path prepare_out(const std::string& out) {
    fs::path p(out);
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec || !fs::is_directory(p)) throw std::runtime_error("cannot create output directory " + out);
    return p;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

void require_dir(const std::string& path, const char* what) {
    if (path.empty() || !fs::is_directory(path)) throw std::runtime_error(std::string(what) + " directory not found: " + path);
}

void require_file(const std::string& path, const char* what) {
    if (path.empty() || !fs::is_regular_file(path)) throw std::runtime_error(std::string(what) + " not found: " + path);
}

// Class count from the flag, else from the dataset.txt written by `synth`.
int dataset_classes(const std::string& dir, int flag) {
    if (flag > 0) return flag;
    const fs::path meta = fs::path(dir) / "dataset.txt";
    if (!fs::exists(meta)) throw std::runtime_error("pass --classes; no dataset.txt in " + dir);
    return static_cast<int>(Config::load(meta).get_int("num_classes", 0));
}

SupportSet load_support(const std::string& dir, int classes, int select, std::uint64_t seed) {
    require_dir(dir, "support");
    Dataset ds = load_dataset(dir, dataset_classes(dir, classes));
    if (select > 0) return build_support_set(ds, select, seed);
    return SupportSet(ds.items, ds.num_classes);
}

std::string metrics_text(const Metrics& m) {
    std::ostringstream os;
    os.precision(6);
    os << "miou = " << m.miou << "\nimages = " << m.images << "\n";
    for (const auto& c : m.per_class) {
        os << "class" << c.class_id << ".iou = " << c.iou() << "\nclass" << c.class_id << ".tp = " << c.tp << "\nclass"
           << c.class_id << ".fp = " << c.fp << "\nclass" << c.class_id << ".fn = " << c.fn << "\n";
    }
    return os.str();
}

std::string history_summary(const TrainHistory& h) {
    std::ostringstream os;
    os.precision(6);
    os << "best_epoch = " << h.best_epoch << "\nbest_support_miou = " << h.best_miou
       << "\nepochs_run = " << (h.epochs.empty() ? 0 : h.epochs.back().epoch)
       << "\nstopped_early = " << (h.stopped_early ? "true" : "false") << "\n";
    return os.str();
}

void check_device() {
    const char* dev = std::getenv("DISTILLFSS_DEVICE");
    if (dev && std::string(dev) != "cpu" && std::string(dev) != "CPU" && std::string(dev) != "") {
        throw std::runtime_error(std::string("DISTILLFSS_DEVICE=") + dev + " is not available; only cpu is supported");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot segmentation with support-free distilled students"};
    app.require_subcommand(1);

    CommonFlags f;

    auto* synth = app.add_subcommand("synth", "generate a synthetic shapes dataset");
    int num_items = 40, image_size = 64, classes = 2;
    std::string split = "train", domain = "target";
    add_common(synth, f, false);
    synth->add_option("--num-items", num_items, "number of images");
    synth->add_option("--image-size", image_size, "square image side");
    synth->add_option("--classes", classes, "foreground classes (1..3)");
    synth->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
    synth->add_option("--domain", domain, "target or source shape families")->check(CLI::IsMember({"target", "source"}));

    auto* base = app.add_subcommand("train-base", "episodic base training of the teacher");
    std::string data_dir;
    int data_classes = 0, max_shots = 2, val_queries = 24;
    add_common(base, f, true);
    base->add_option("--data", data_dir, "source dataset directory")->required();
    base->add_option("--classes", data_classes, "class count (default: from dataset.txt)");
    base->add_option("--max-shots", max_shots, "support images per episode, upper bound");
    base->add_option("--val-queries", val_queries, "held-out validation queries");

    auto* transfer = app.add_subcommand("transfer", "fine-tune a teacher on the support set");
    std::string ckpt_path, support_dir;
    int select = 0;
    add_common(transfer, f, true);
    transfer->add_option("--base", ckpt_path, "base teacher checkpoint")->required();

    auto* distill = app.add_subcommand("distill", "distill a support-free student");
    add_common(distill, f, true);
    distill->add_option("--teacher", ckpt_path, "teacher checkpoint")->required();
    distill->add_flag("--no-dist-loss", f.no_dist_loss, "drop the distillation term");

    for (auto* cmd : {transfer, distill}) {
        cmd->add_option("--support", support_dir, "support dataset directory")->required();
        cmd->add_option("--classes", data_classes, "class count (default: from dataset.txt)");
        cmd->add_option("--select", select, "pick M support images from the directory (default: all)");
        cmd->add_option("--policy", f.policy, "comma-separated blocks to unfreeze");
        cmd->add_option("--support-batch", f.support_batch, "support group size for evaluation");
    }

    auto* eval = app.add_subcommand("eval", "test-set mIoU of a checkpoint");
    std::string test_dir;
    add_common(eval, f, false);
    eval->add_option("--ckpt", ckpt_path, "teacher or student checkpoint")->required();
    eval->add_option("--test", test_dir, "test dataset directory")->required();
    eval->add_option("--support", support_dir, "support dataset directory (teachers only)");
    eval->add_option("--classes", data_classes, "class count (default: from dataset.txt)");
    eval->add_option("--select", select, "pick M support images from the directory (default: all)");
    eval->add_option("--support-batch", f.support_batch, "support group size");

    auto* bench = app.add_subcommand("bench", "latency, memory and FLOPs versus support size");
    std::vector<std::string> ckpts;
    std::string miou_csv;
    BenchOptions bopt;
    add_common(bench, f, false);
    bench->add_option("--ckpt", ckpts, "checkpoints to benchmark")->required();
    bench->add_option("--shots", bopt.shots, "K values")->delimiter(',');
    bench->add_option("--ways", bopt.ways, "N values")->delimiter(',');
    bench->add_option("--image-size", bopt.image_size, "square input side");
    bench->add_option("--repeats", bopt.repeats, "timed forwards per point (>= 20)");
    bench->add_option("--warmup", bopt.warmup, "untimed forwards per point (>= 3)");
    bench->add_option("--support-batch", f.support_batch, "support group size");
    bench->add_option("--miou-csv", miou_csv, "model,M,miou rows for the mIoU-vs-M plot");

    CLI11_PARSE(app, argc, argv);

    try {
        check_device();
        if (*synth) {
            Config c = resolve(f, {});
            c.set("data.num_items", std::to_string(num_items));
            c.set("data.image_size", std::to_string(image_size));
            c.set("data.num_classes", std::to_string(classes));
            c.set("data.split", split);
            c.set("data.domain", domain);
            echo("synth", c);
            const fs::path out = prepare_out(f.out);
            Dataset ds = synth_shapes(num_items, image_size, classes, static_cast<std::uint64_t>(c.get_int("seed", 0)),
                                      split == "train" ? Split::Train : Split::Test,
                                      domain == "target" ? ShapeDomain::Target : ShapeDomain::Source);
            save_dataset(ds, out);
            write_text(out / "dataset.txt", "num_classes = " + std::to_string(classes) + "\n" + c.serialize());
            std::cout << "wrote " << ds.size() << " items to " << out.string() << "\n";
        } else if (*base) {
            Config defaults;
            defaults.set("train.epochs", "20");
            defaults.set("train.patience", "100");
            Config c = resolve(f, defaults);
            c.set("base.max_shots", std::to_string(max_shots));
            c.set("base.val_queries", std::to_string(val_queries));
            BaseTrainConfig bc;
            bc.train = train_config(c);
            bc.max_shots = max_shots;
            bc.val_queries = val_queries;
            require_dir(data_dir, "data");
            echo("train-base", c);
            Dataset src = load_dataset(data_dir, dataset_classes(data_dir, data_classes));
            const fs::path out = prepare_out(f.out);
            BaseResult r = train_base(src, read_arch(c), bc);
            const std::string summary = history_summary(r.history);
            save_checkpoint(make_checkpoint(r.teacher, c, summary), out / "teacher_base.ckpt");
            write_text(out / "history.csv", r.history.to_csv());
            write_text(out / "config.txt", c.serialize());
            std::cout << summary << "wrote " << (out / "teacher_base.ckpt").string() << "\n";
        } else if (*transfer || *distill) {
            const bool is_transfer = transfer->parsed();
            Config c = resolve(f, {});
            if (!c.contains("train.policy")) c.set("train.policy", default_policy().str());
            if (select > 0) c.set("support.select", std::to_string(select));
            const TrainConfig tc = train_config(c);
            const UnfreezePolicy policy = UnfreezePolicy::parse(c.get_string("train.policy", ""));
            require_file(ckpt_path, "checkpoint");
            echo(is_transfer ? "transfer" : "distill", c);
            Checkpoint in = load_checkpoint(ckpt_path);
            Teacher teacher = teacher_from_checkpoint(in);
            SupportSet support = load_support(support_dir, data_classes, select, tc.seed);
            const fs::path out = prepare_out(f.out);
            Config embed = in.config;
            embed.merge(c);
            if (is_transfer) {
                TransferResult r = transfer_fss(teacher, support, policy, tc);
                const std::string summary = history_summary(r.history);
                save_checkpoint(make_checkpoint(r.teacher, embed, summary), out / "teacher_transfer.ckpt");
                write_text(out / "history.csv", r.history.to_csv());
                std::cout << summary << "wrote " << (out / "teacher_transfer.ckpt").string() << "\n";
            } else {
                const bool use_dist = c.get_bool("train.dist_loss", true);
                DistillResult r = distill_fss(teacher, support, tc, use_dist, policy);
                const std::string summary = history_summary(r.history) +
                                            "dist_loss_evaluations = " + std::to_string(r.dist_loss_evaluations) + "\n";
                save_checkpoint(make_checkpoint(r.student, embed, summary), out / "student.ckpt");
                write_text(out / "history.csv", r.history.to_csv());
                std::cout << summary << "wrote " << (out / "student.ckpt").string() << "\n";
            }
            write_text(out / "config.txt", c.serialize());
        } else if (*eval) {
            Config c = resolve(f, {});
            c.set("eval.ckpt", ckpt_path);
            c.set("eval.test", test_dir);
            if (!support_dir.empty()) c.set("eval.support", support_dir);
            require_file(ckpt_path, "checkpoint");
            require_dir(test_dir, "test");
            echo("eval", c);
            Checkpoint ck = load_checkpoint(ckpt_path);
            Dataset test = load_dataset(test_dir, dataset_classes(test_dir, data_classes));
            const int batch = static_cast<int>(c.get_int("train.support_batch", 10));
            Metrics m;
            if (ck.kind == CheckpointKind::Student) {
                if (!support_dir.empty()) throw std::invalid_argument("student checkpoints take no support set");
                Student s = student_from_checkpoint(ck);
                m = evaluate(&s, test, nullptr, batch);
            } else {
                if (support_dir.empty()) throw std::invalid_argument("teacher evaluation needs --support");
                Teacher t = teacher_from_checkpoint(ck);
                SupportSet support = load_support(support_dir, test.num_classes, select,
                                                  static_cast<std::uint64_t>(c.get_int("seed", 0)));
                m = evaluate(&t, test, &support, batch);
            }
            const fs::path out = prepare_out(f.out);
            const std::string text = metrics_text(m);
            write_text(out / "metrics.txt", text + "\n# config\n" + c.serialize());
            std::cout << text;
        } else if (*bench) {
            Config c = resolve(f, {});
            bopt.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
            bopt.support_batch = static_cast<int>(c.get_int("train.support_batch", bopt.support_batch));
            c.set("bench.shots", join_ints(bopt.shots));
            c.set("bench.ways", join_ints(bopt.ways));
            c.set("bench.image_size", std::to_string(bopt.image_size));
            c.set("bench.repeats", std::to_string(bopt.repeats));
            c.set("bench.warmup", std::to_string(bopt.warmup));
            c.set("bench.support_batch", std::to_string(bopt.support_batch));
            bopt.validate();
            for (const auto& p : ckpts) require_file(p, "checkpoint");
            echo("bench", c);
            std::vector<BenchRecord> records;
            for (const auto& p : ckpts) {
                Checkpoint ck = load_checkpoint(p);
                std::vector<BenchRecord> part;
                if (ck.kind == CheckpointKind::Student) {
                    Student s = student_from_checkpoint(ck);
                    part = bench_inference(&s, bopt);
                } else {
                    Teacher t = teacher_from_checkpoint(ck);
                    part = bench_inference(&t, bopt);
                }
                records.insert(records.end(), part.begin(), part.end());
            }
            std::vector<MiouPoint> points;
            if (!miou_csv.empty()) {
                require_file(miou_csv, "mIoU table");
                std::ifstream in(miou_csv);
                std::string line;
                while (std::getline(in, line)) {
                    if (line.empty() || line.rfind("model", 0) == 0) continue;
                    std::istringstream ls(line);
                    MiouPoint pt;
                    std::string m, v;
                    if (!std::getline(ls, pt.model, ',') || !std::getline(ls, m, ',') || !std::getline(ls, v)) {
                        throw std::runtime_error("bad mIoU row: " + line);
                    }
                    pt.m = std::stoi(m);
                    pt.miou = std::stod(v);
                    points.push_back(pt);
                }
            }
            const fs::path out = prepare_out(f.out);
            ReportFiles files = emit_report(records, points, out);
            write_text(out / "config.txt", c.serialize());
            std::cout << bench_csv(records);
            for (const auto& p : files.plots) std::cout << "wrote " << p.string() << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
