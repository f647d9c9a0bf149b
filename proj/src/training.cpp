#include "distillfss/training.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "distillfss/ops.hpp"

namespace distillfss {

UnfreezePolicy::UnfreezePolicy(std::initializer_list<Block> blocks) : blocks_(blocks) {}

UnfreezePolicy UnfreezePolicy::parse(std::string_view csv) {
    UnfreezePolicy p;
    std::size_t start = 0;
    while (start <= csv.size()) {
        std::size_t end = csv.find(',', start);
        if (end == std::string_view::npos) end = csv.size();
        std::string_view tok = csv.substr(start, end - start);
        while (!tok.empty() && tok.front() == ' ') tok.remove_prefix(1);
        while (!tok.empty() && tok.back() == ' ') tok.remove_suffix(1);
        if (!tok.empty()) {
            auto b = parse_block(tok);
            if (!b) throw std::invalid_argument("unknown block '" + std::string(tok) + "' in policy");
            if (*b == Block::Backbone) throw std::invalid_argument("policy may not unfreeze the backbone");
            p.blocks_.insert(*b);
        }
        start = end + 1;
    }
    if (p.blocks_.empty()) throw std::invalid_argument("policy must name at least one block");
    return p;
}

std::string UnfreezePolicy::str() const {
    std::string out;
    for (Block b : blocks_) {
        if (!out.empty()) out += ',';
        out += block_name(b);
    }
    return out;
}

UnfreezePolicy default_policy() { return {Block::ConvMapper, Block::ConvSkip, Block::Classifier}; }

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw std::invalid_argument("learning_rate must be positive");
    }
    if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
    if (focal.gamma < 0.0) throw std::invalid_argument("gamma must be non-negative");
    if (!(focal.alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
    if (epochs < 0) throw std::invalid_argument("epochs must be non-negative");
    if (conditioning_count < 0) throw std::invalid_argument("conditioning_count must be non-negative");
    if (patience < 1) throw std::invalid_argument("patience must be at least 1");
    if (support_batch < 0) throw std::invalid_argument("support_batch must be non-negative");
}

int TrainConfig::conditioning_for(std::size_t support_size) const {
    if (conditioning_count > 0) return conditioning_count;
    const int others = static_cast<int>(support_size) - 1;
    return std::max(1, std::min(others, 5));
}

std::string TrainHistory::to_csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "epoch,loss,dist_loss,seg_student,seg_teacher,support_miou\n";
    for (const auto& e : epochs) {
        os << e.epoch << ',' << e.loss << ',' << e.dist_loss << ',' << e.seg_student << ',' << e.seg_teacher << ','
           << e.support_miou << '\n';
    }
    return os.str();
}

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct EncodedSupportSet {
    std::vector<EncodedQuery> queries;
    std::vector<EncodedSupport> keys;
};

EncodedSupportSet encode_all(const Backbone& backbone, const SupportSet& support) {
    NoGradGuard no_grad;
    EncodedSupportSet out;
    for (const auto& e : support.entries()) {
        out.queries.push_back(encode_query(backbone, e.image));
        out.keys.push_back(encode_support(backbone, e));
    }
    return out;
}

// Other entries drawn for the pseudo-query `self`; with replacement only when
// there are fewer others than requested.
std::vector<std::size_t> sample_conditioning(std::size_t self, std::size_t m, int count, Rng& rng) {
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < m; ++j)
        if (j != self) others.push_back(j);
    const auto r = static_cast<std::size_t>(count);
    if (others.size() >= r) {
        rng.shuffle(others);
        others.resize(r);
        return others;
    }
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < r; ++i) {
        out.push_back(others[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(others.size()) - 1))]);
    }
    return out;
}

bool any_shot_has(const std::vector<const EncodedSupport*>& shots, int class_id) {
    for (const auto* s : shots)
        for (std::size_t i = 0; i < s->labels.back().size(); ++i)
            if (s->labels.back()[i] == class_id) return true;
    return false;
}

// Classes trained for one pseudo-query step.
std::vector<int> step_classes(const MultiClassMask& query_mask, const std::vector<const EncodedSupport*>& shots,
                              int num_classes, bool include_absent) {
    std::vector<int> out;
    for (int c = 1; c <= num_classes; ++c) {
        if (!include_absent && !query_mask.has_class(c)) continue;
        if (!any_shot_has(shots, c)) continue;
        out.push_back(c);
    }
    return out;
}

std::vector<const EncodedSupport*> pointers(const EncodedSupportSet& enc, const std::vector<std::size_t>& idx) {
    std::vector<const EncodedSupport*> out;
    for (std::size_t i : idx) out.push_back(&enc.keys[i]);
    return out;
}

MultiClassMask teacher_predict_cached(const Teacher& teacher, const EncodedQuery& q,
                                      const std::vector<const EncodedSupport*>& shots, int num_classes,
                                      int support_batch) {
    std::vector<Tensor> probs;
    for (int c = 1; c <= num_classes; ++c) {
        AttentionMapSet maps = attend_batched(teacher, q, shots, c, support_batch);
        probs.push_back(ops::sigmoid(teacher_decode(teacher, q, std::move(maps)).logits).value());
    }
    return assemble_prediction(probs);
}

double teacher_support_miou_cached(const Teacher& teacher, const EncodedSupportSet& enc, const SupportSet& support,
                                   int support_batch) {
    NoGradGuard no_grad;
    IouAccumulator acc = IouAccumulator::for_classes(support.num_classes());
    for (std::size_t i = 0; i < support.size(); ++i) {
        std::vector<std::size_t> others;
        for (std::size_t j = 0; j < support.size(); ++j)
            if (j != i) others.push_back(j);
        MultiClassMask pred =
            teacher_predict_cached(teacher, enc.queries[i], pointers(enc, others), support.num_classes(), support_batch);
        acc.add(pred, support[i].mask);
    }
    return acc.result().miou;
}

MultiClassMask student_predict_cached(const Student& student, const QueryFeatures& f) {
    NoGradGuard no_grad;
    std::vector<Tensor> probs;
    for (int c = 1; c <= student.num_classes(); ++c) {
        probs.push_back(ops::sigmoid(student_forward_features(student, f, c).logits).value());
    }
    return assemble_prediction(probs);
}

double student_support_miou_cached(const Student& student, const EncodedSupportSet& enc, const SupportSet& support) {
    IouAccumulator acc = IouAccumulator::for_classes(support.num_classes());
    for (std::size_t i = 0; i < support.size(); ++i) acc.add(student_predict_cached(student, enc.queries[i].features), support[i].mask);
    return acc.result().miou;
}

AdamWConfig optimizer_config(const TrainConfig& cfg) {
    AdamWConfig a;
    a.learning_rate = cfg.learning_rate;
    a.weight_decay = cfg.weight_decay;
    return a;
}

// Runs `epochs` epochs of `train_epoch`, evaluating with `evaluate` before the
// first update and after each epoch. Restores the best-scoring snapshot.
TrainHistory run_with_early_stopping(const TrainConfig& cfg, ParamStore& store,
                                     const std::function<EpochRecord(int)>& train_epoch,
                                     const std::function<EpochRecord()>& initial,
                                     const std::function<double()>& evaluate) {
    TrainHistory h;
    EpochRecord first = initial();
    first.epoch = 0;
    first.support_miou = evaluate();
    h.epochs.push_back(first);
    h.best_epoch = 0;
    h.best_miou = first.support_miou;
    Snapshot best = store.snapshot();
    int stale = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        EpochRecord rec = train_epoch(epoch);
        rec.epoch = epoch;
        rec.support_miou = evaluate();
        h.epochs.push_back(rec);
        if (rec.support_miou > h.best_miou || std::isnan(h.best_miou)) {
            h.best_miou = rec.support_miou;
            h.best_epoch = epoch;
            best = store.snapshot();
            stale = 0;
        } else if (++stale >= cfg.patience) {
            h.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    store.restore(best);
    return h;
}

struct LossMeans {
    double total = 0, dist = 0, seg_s = 0, seg_t = 0;
    int steps = 0;
    bool has_dist = false;

    EpochRecord record() const {
        EpochRecord r;
        const double n = steps ? static_cast<double>(steps) : 1.0;
        r.loss = steps ? total / n : kNaN;
        r.dist_loss = has_dist && steps ? dist / n : kNaN;
        r.seg_student = steps ? seg_s / n : kNaN;
        r.seg_teacher = steps ? seg_t / n : kNaN;
        return r;
    }
};

}  // namespace

double teacher_support_miou(const Teacher& teacher, const SupportSet& support, int support_batch) {
    if (support.size() < 2) throw std::invalid_argument("support mIoU needs at least two support images");
    return teacher_support_miou_cached(teacher, encode_all(teacher.backbone(), support), support, support_batch);
}

double student_support_miou(const Student& student, const SupportSet& support) {
    return student_support_miou_cached(student, encode_all(student.backbone(), support), support);
}

TransferResult transfer_fss(const Teacher& base, const SupportSet& support, const UnfreezePolicy& policy,
                            const TrainConfig& cfg) {
    cfg.validate();
    if (support.size() < 2) {
        throw std::invalid_argument("transfer_fss needs M >= 2 support images, got " + std::to_string(support.size()));
    }
    if (policy.empty()) throw std::invalid_argument("transfer_fss: empty unfreeze policy");
    Teacher teacher = base.clone();
    ParamStore& store = teacher.params();
    store.freeze_all();
    for (Block b : policy.blocks()) store.set_trainable(b, true);

    const EncodedSupportSet enc = encode_all(teacher.backbone(), support);
    const std::size_t m = support.size();
    const int n = support.num_classes();
    const int r = cfg.conditioning_for(m);
    Rng rng(derive_seed(cfg.seed, 0x7a11));
    AdamW opt(optimizer_config(cfg));

    auto train_epoch = [&](int) {
        std::vector<std::size_t> order(m);
        for (std::size_t i = 0; i < m; ++i) order[i] = i;
        rng.shuffle(order);
        LossMeans means;
        for (std::size_t qi : order) {
            auto shots = pointers(enc, sample_conditioning(qi, m, r, rng));
            const auto classes = step_classes(support[qi].mask, shots, n, cfg.include_absent_classes);
            if (classes.empty()) continue;
            std::vector<Var> terms;
            for (int c : classes) {
                AttentionMapSet maps = attend(teacher, enc.queries[qi], shots, c);
                Var prob = ops::sigmoid(teacher_decode(teacher, enc.queries[qi], std::move(maps)).logits);
                terms.push_back(focal_loss(prob, binarize_mask(support[qi].mask, c), cfg.focal.gamma, cfg.focal.alpha));
            }
            Var loss = ops::sum_scalars(terms);
            backward(loss);
            opt.step(store);
            store.zero_grad();
            means.total += loss.value()[0];
            means.seg_t += loss.value()[0];
            ++means.steps;
        }
        EpochRecord rec = means.record();
        rec.seg_student = kNaN;
        return rec;
    };
    auto initial = [&] {
        EpochRecord rec;
        rec.loss = rec.dist_loss = rec.seg_student = rec.seg_teacher = kNaN;
        return rec;
    };
    auto evaluate = [&] { return teacher_support_miou_cached(teacher, enc, support, cfg.support_batch); };

    TrainHistory h = run_with_early_stopping(cfg, store, train_epoch, initial, evaluate);
    store.freeze_all();
    return TransferResult{std::move(teacher), std::move(h)};
}

DistillResult distill_fss(const Teacher& base, const SupportSet& support, const TrainConfig& cfg, bool use_dist,
                          const UnfreezePolicy& decoder_policy) {
    cfg.validate();
    if (support.size() < 2) {
        throw std::invalid_argument("distill_fss needs M >= 2 support images, got " + std::to_string(support.size()));
    }
    Teacher teacher = base.clone();
    const int n = support.num_classes();
    Student student = Student::from_teacher(teacher, n, derive_seed(cfg.seed, 0xd157));
    teacher.params().freeze_all();
    ParamStore& store = student.params();
    store.freeze_all();
    for (Block b : decoder_policy.blocks()) {
        if (b == Block::AttentionWeights || b == Block::Backbone || b == Block::ConvDist) continue;
        store.set_trainable(b, true);
    }
    store.set_trainable(Block::ConvDist, true);

    const EncodedSupportSet enc = encode_all(teacher.backbone(), support);
    const std::size_t m = support.size();
    const int r = cfg.conditioning_for(m);
    Rng rng(derive_seed(cfg.seed, 0xd157 + 1));
    AdamW opt(optimizer_config(cfg));
    const std::uint64_t evals_before = distill_loss_evaluations();

    // Losses for one pseudo-query; returns false when no class qualifies.
    auto step_loss = [&](std::size_t qi, const std::vector<const EncodedSupport*>& shots, Var& total, LossMeans& means) {
        const auto classes = step_classes(support[qi].mask, shots, n, cfg.include_absent_classes);
        if (classes.empty()) return false;
        const EncodedQuery& q = enc.queries[qi];
        std::vector<Var> terms;
        double d = 0, ss = 0, st = 0;
        for (int c : classes) {
            AttentionMapSet tmaps = attend(teacher, q, shots, c);
            Var tprob = ops::sigmoid(teacher_decode(teacher, q, tmaps).logits);
            StudentOutput so = student_forward_features(student, q.features, c);
            Var sprob = ops::sigmoid(so.logits);
            CompositeLoss l = composite_loss(tprob, sprob, binarize_mask(support[qi].mask, c), tmaps, so.maps,
                                             cfg.focal, cfg.weights, use_dist);
            terms.push_back(l.total);
            if (use_dist) d += l.dist.value()[0];
            ss += l.seg_student.value()[0];
            st += l.seg_teacher.value()[0];
        }
        total = ops::sum_scalars(terms);
        means.total += total.value()[0];
        means.dist += d;
        means.seg_s += ss;
        means.seg_t += st;
        means.has_dist = use_dist;
        ++means.steps;
        return true;
    };

    auto train_epoch = [&](int) {
        std::vector<std::size_t> order(m);
        for (std::size_t i = 0; i < m; ++i) order[i] = i;
        rng.shuffle(order);
        LossMeans means;
        for (std::size_t qi : order) {
            auto shots = pointers(enc, sample_conditioning(qi, m, r, rng));
            Var total;
            if (!step_loss(qi, shots, total, means)) continue;
            backward(total);
            opt.step(store);
            store.zero_grad();
        }
        return means.record();
    };
    // Loss before any update, with every other entry as conditioning.
    auto initial = [&] {
        NoGradGuard no_grad;
        LossMeans means;
        for (std::size_t qi = 0; qi < m; ++qi) {
            std::vector<std::size_t> others;
            for (std::size_t j = 0; j < m; ++j)
                if (j != qi) others.push_back(j);
            Var total;
            step_loss(qi, pointers(enc, others), total, means);
        }
        return means.record();
    };
    auto evaluate = [&] { return student_support_miou_cached(student, enc, support); };

    TrainHistory h = run_with_early_stopping(cfg, store, train_epoch, initial, evaluate);
    store.freeze_all();
    student.metadata["support_size"] = std::to_string(m);
    student.metadata["num_classes"] = std::to_string(n);
    student.metadata["dist_loss"] = use_dist ? "on" : "off";
    student.metadata["decoder_policy"] = decoder_policy.str();
    const std::uint64_t evals = distill_loss_evaluations() - evals_before;
    return DistillResult{std::move(student), std::move(teacher), std::move(h), evals};
}

BaseResult train_base(const Dataset& source, const ArchConfig& arch, const BaseTrainConfig& bcfg) {
    const TrainConfig& cfg = bcfg.train;
    cfg.validate();
    if (bcfg.max_shots < 1) throw std::invalid_argument("max_shots must be at least 1");
    if (bcfg.val_queries < 1 || static_cast<std::size_t>(bcfg.val_queries) + 2 > source.size()) {
        throw std::invalid_argument("train_base: source has " + std::to_string(source.size()) +
                                    " items, too few for " + std::to_string(bcfg.val_queries) + " validation queries");
    }
    Teacher teacher = Teacher::create(arch, derive_seed(cfg.seed, 0xba5e));
    ParamStore& store = teacher.params();
    for (const auto& [name, v] : store.entries()) {
        Var h = v;
        h.set_requires_grad(true);
    }
    const int n = source.num_classes;
    const std::size_t train_count = source.size() - static_cast<std::size_t>(bcfg.val_queries);

    std::vector<std::vector<std::size_t>> holders(static_cast<std::size_t>(n + 1));
    for (std::size_t i = 0; i < train_count; ++i)
        for (int c = 1; c <= n; ++c)
            if (source.items[i].mask.has_class(c)) holders[static_cast<std::size_t>(c)].push_back(i);

    Rng rng(derive_seed(cfg.seed, 0xba5e + 1));
    AdamW opt(optimizer_config(cfg));

    auto draw_shots = [&](std::size_t exclude, int c, int k, Rng& g) {
        const auto& pool = holders[static_cast<std::size_t>(c)];
        std::vector<std::size_t> shots;
        for (int tries = 0; static_cast<int>(shots.size()) < k && tries < 8 * k; ++tries) {
            std::size_t pick = pool[static_cast<std::size_t>(g.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
            if (pick != exclude) shots.push_back(pick);
        }
        return shots;
    };

    auto train_epoch = [&](int) {
        std::vector<std::size_t> order(train_count);
        for (std::size_t i = 0; i < train_count; ++i) order[i] = i;
        rng.shuffle(order);
        LossMeans means;
        for (std::size_t qi : order) {
            const LabeledImage& q = source.items[qi];
            EncodedQuery eq = encode_query(teacher.backbone(), q.image);
            std::vector<Var> terms;
            for (int c = 1; c <= n; ++c) {
                if (!q.mask.has_class(c)) continue;
                const int k = static_cast<int>(rng.uniform_int(1, bcfg.max_shots));
                auto idx = draw_shots(qi, c, k, rng);
                if (idx.empty()) continue;
                std::vector<EncodedSupport> es;
                for (std::size_t j : idx) es.push_back(encode_support(teacher.backbone(), source.items[j]));
                std::vector<const EncodedSupport*> ptrs;
                for (const auto& e : es) ptrs.push_back(&e);
                Var prob = ops::sigmoid(teacher_decode(teacher, eq, attend(teacher, eq, ptrs, c)).logits);
                terms.push_back(focal_loss(prob, binarize_mask(q.mask, c), cfg.focal.gamma, cfg.focal.alpha));
            }
            if (terms.empty()) continue;
            Var loss = ops::sum_scalars(terms);
            backward(loss);
            opt.step(store);
            store.zero_grad();
            means.total += loss.value()[0];
            means.seg_t += loss.value()[0];
            ++means.steps;
        }
        EpochRecord rec = means.record();
        rec.seg_student = kNaN;
        return rec;
    };

    // Fixed validation episodes: held-out queries, shots from the training part.
    struct ValEpisode {
        std::size_t query;
        int class_id;
        std::vector<std::size_t> shots;
    };
    std::vector<ValEpisode> val;
    {
        Rng vr(derive_seed(cfg.seed, 0xba5e + 2));
        for (std::size_t qi = train_count; qi < source.size(); ++qi) {
            for (int c = 1; c <= n; ++c) {
                if (!source.items[qi].mask.has_class(c) || holders[static_cast<std::size_t>(c)].empty()) continue;
                val.push_back(ValEpisode{qi, c, draw_shots(qi, c, bcfg.max_shots, vr)});
            }
        }
    }
    auto evaluate = [&] {
        NoGradGuard no_grad;
        std::uint64_t tp = 0, fp = 0, fn = 0;
        for (const auto& ep : val) {
            const LabeledImage& q = source.items[ep.query];
            EncodedQuery eq = encode_query(teacher.backbone(), q.image);
            std::vector<EncodedSupport> es;
            for (std::size_t j : ep.shots) es.push_back(encode_support(teacher.backbone(), source.items[j]));
            std::vector<const EncodedSupport*> ptrs;
            for (const auto& e : es) ptrs.push_back(&e);
            const Tensor logits = teacher_decode(teacher, eq, attend(teacher, eq, ptrs, ep.class_id)).logits.value();
            for (std::size_t i = 0; i < logits.size(); ++i) {
                const bool p = logits[i] > 0.0;
                const bool t = q.mask.labels()[i] == ep.class_id;
                tp += p && t;
                fp += p && !t;
                fn += !p && t;
            }
        }
        const std::uint64_t u = tp + fp + fn;
        return u ? static_cast<double>(tp) / static_cast<double>(u) : 0.0;
    };
    auto initial = [&] {
        EpochRecord rec;
        rec.loss = rec.dist_loss = rec.seg_student = rec.seg_teacher = kNaN;
        return rec;
    };

    TrainHistory h = run_with_early_stopping(cfg, store, train_epoch, initial, evaluate);
    store.freeze_all();
    return BaseResult{std::move(teacher), std::move(h)};
}

}  // namespace distillfss
