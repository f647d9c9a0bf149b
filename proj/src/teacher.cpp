#include "distillfss/teacher.hpp"

#include <cmath>
#include <stdexcept>

#include "distillfss/flops.hpp"
#include "distillfss/ops.hpp"

namespace distillfss {

void ArchConfig::sync() {
    backbone.scales.validate();
    decoder.maps_per_scale.assign(backbone.scales.layers_per_scale.begin() + 1, backbone.scales.layers_per_scale.end());
    decoder.skip_in_channels = backbone.stage_channels.front();
}

ArchConfig default_arch() {
    ArchConfig cfg;
    cfg.sync();
    return cfg;
}

namespace {
std::string wq_name(int slot) { return "attention.s" + std::to_string(slot) + ".wq"; }
std::string wk_name(int slot) { return "attention.s" + std::to_string(slot) + ".wk"; }

Tensor binarize_column(const Tensor& labels, int class_id) {
    Tensor out(labels.shape());
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] == class_id ? 1.0 : 0.0;
    return out;
}

AttentionMapSet average_maps(std::span<const AttentionMapSet> sets) {
    if (sets.size() == 1) return sets[0];
    std::vector<Var> merged;
    for (std::size_t layer = 0; layer < sets[0].size(); ++layer) {
        std::vector<Var> group;
        for (const auto& s : sets) group.push_back(s.maps()[layer]);
        merged.push_back(ops::mean_of(group));
    }
    return AttentionMapSet(std::move(merged), sets[0].slots());
}
}  // namespace

void AttentionParams::init_params(ParamStore& store, const ToyBackboneConfig& cfg, Rng& rng) {
    for (std::size_t i = 1; i < cfg.stage_channels.size(); ++i) {
        const int c = cfg.stage_channels[i];
        const int slot = static_cast<int>(i) - 1;
        store.add(wq_name(slot), he_normal({c, c}, c, rng, std::sqrt(0.5)));
        store.add(wk_name(slot), he_normal({c, c}, c, rng, std::sqrt(0.5)));
    }
}

AttentionParams AttentionParams::bind(const ParamStore& store, int num_slots) {
    AttentionParams p;
    for (int s = 0; s < num_slots; ++s) {
        p.wq.push_back(store.get(wq_name(s)));
        p.wk.push_back(store.get(wk_name(s)));
    }
    return p;
}

Var cross_attention(const TokenSequence& query, const Var& support_tokens, const Tensor& mask_column,
                    const AttentionParams& params, int slot) {
    if (slot < 0 || static_cast<std::size_t>(slot) >= params.wq.size()) {
        throw std::invalid_argument("cross_attention: no projections for scale slot " + std::to_string(slot));
    }
    const Var& wq = params.wq[static_cast<std::size_t>(slot)];
    const Var& wk = params.wk[static_cast<std::size_t>(slot)];
    const Tensor& q = query.tokens.value();
    const Tensor& s = support_tokens.value();
    if (q.rank() != 2 || q.dim(0) != query.height * query.width) {
        throw std::invalid_argument("cross_attention: query token axis " + shape_str(q.shape()) + " does not match " +
                                    std::to_string(query.height) + "x" + std::to_string(query.width));
    }
    if (s.rank() != 2 || mask_column.rank() != 2 || mask_column.dim(1) != 1 || s.dim(0) != mask_column.dim(0)) {
        throw std::invalid_argument("cross_attention: support token axis " + shape_str(s.shape()) +
                                    " does not match mask column " + shape_str(mask_column.shape()));
    }
    if (q.dim(1) != wq.dim(0) || s.dim(1) != wk.dim(0)) {
        throw std::invalid_argument("cross_attention: channel axis mismatch, query " + shape_str(q.shape()) +
                                    ", support " + shape_str(s.shape()) + ", projection " + shape_str(wq.shape()));
    }
    flops::Scope scope(flops::Category::Attention);
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(wq.dim(1)));
    Var qp = ops::matmul(query.tokens, wq);
    Var kp = ops::matmul(support_tokens, wk);
    Var weights = ops::softmax_rows(ops::scale(ops::matmul_nt(qp, kp), inv_sqrt_dk));
    Var out = ops::matmul(weights, Var::constant(mask_column));
    return ops::reshape(out, {1, query.height, query.width});
}

SupportKeys multi_shot_keys(std::span<const Var> shot_tokens, std::span<const Tensor> shot_masks) {
    if (shot_tokens.empty()) throw std::invalid_argument("multi_shot_keys: need at least one shot");
    if (shot_tokens.size() != shot_masks.size()) throw std::invalid_argument("multi_shot_keys: one mask per shot");
    int rows = 0;
    for (const auto& m : shot_masks) rows += m.dim(0);
    Tensor mask({rows, 1});
    std::size_t off = 0;
    for (const auto& m : shot_masks) {
        std::copy(m.data(), m.data() + m.size(), mask.data() + off);
        off += m.size();
    }
    return SupportKeys{ops::concat_rows(shot_tokens), std::move(mask)};
}

EncodedQuery encode_query(const Backbone& backbone, const Image& image) {
    EncodedQuery q;
    q.features = extract_query(backbone, image.to_tensor());
    q.height = image.height;
    q.width = image.width;
    flops::Scope scope(flops::Category::Attention);
    for (const auto& layer : q.features.features.layers) q.tokens.push_back(flatten_with_pe(layer.map));
    return q;
}

EncodedSupport encode_support(const Backbone& backbone, const LabeledImage& entry) {
    return std::move(encode_support_group(backbone, std::span<const LabeledImage>(&entry, 1)).front());
}

std::vector<EncodedSupport> encode_support_group(const Backbone& backbone, std::span<const LabeledImage> entries) {
    std::vector<Tensor> images;
    for (const auto& entry : entries) {
        if (entry.mask.height() != entry.image.height || entry.mask.width() != entry.image.width) {
            throw std::invalid_argument("support entry '" + entry.name + "' mask size differs from image size");
        }
        images.push_back(entry.image.to_tensor());
    }
    std::vector<MultiScaleFeatures> feats = backbone.extract_batch(images);
    images.clear();

    std::vector<EncodedSupport> out(entries.size());
    flops::Scope scope(flops::Category::Attention);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& mask = entries[i].mask;
        Tensor labels({1, mask.height(), mask.width()});
        for (std::size_t p = 0; p < labels.size(); ++p) labels[p] = mask.labels()[p];
        for (const auto& layer : feats[i].layers) {
            TokenSequence t = flatten_with_pe(layer.map);
            out[i].labels.push_back(downsample_mask(labels, t.height, t.width));
            out[i].tokens.push_back(t.tokens);
        }
    }
    return out;
}

Teacher::Teacher(ArchConfig cfg, ParamStore store) : cfg_(std::move(cfg)), store_(std::move(store)) {
    cfg_.sync();
    backbone_ = std::make_unique<ToyBackbone>(store_, cfg_.backbone);
    slots_ = layer_slots(cfg_.backbone.scales);
    attention_ = AttentionParams::bind(store_, cfg_.backbone.scales.num_scales() - 1);
    decoder_ = std::make_unique<Decoder>(store_, cfg_.decoder);
}

Teacher Teacher::create(const ArchConfig& cfg, std::uint64_t seed) {
    ArchConfig c = cfg;
    c.sync();
    ParamStore store;
    Rng rng(seed);
    ToyBackbone::init_params(store, c.backbone, rng);
    AttentionParams::init_params(store, c.backbone, rng);
    Decoder::init_params(store, c.decoder, rng);
    return Teacher(std::move(c), std::move(store));
}

Teacher Teacher::from_params(const ArchConfig& cfg, ParamStore store) { return Teacher(cfg, std::move(store)); }

Teacher Teacher::clone() const { return Teacher(cfg_, store_.deep_copy()); }

AttentionMapSet attend(const Teacher& teacher, const EncodedQuery& query, std::span<const EncodedSupport* const> shots,
                       int class_id) {
    if (shots.empty()) throw std::invalid_argument("attend: no support shots");
    std::vector<Var> maps;
    for (std::size_t layer = 0; layer < query.tokens.size(); ++layer) {
        std::vector<Var> tokens;
        std::vector<Tensor> masks;
        for (const auto* shot : shots) {
            tokens.push_back(shot->tokens[layer]);
            masks.push_back(binarize_column(shot->labels[layer], class_id));
        }
        SupportKeys keys = multi_shot_keys(tokens, masks);
        maps.push_back(cross_attention(query.tokens[layer], keys.tokens, keys.mask, teacher.attention(),
                                       teacher.slots()[layer]));
    }
    return AttentionMapSet(std::move(maps), teacher.slots());
}

AttentionMapSet attend_batched(const Teacher& teacher, const EncodedQuery& query,
                               std::span<const EncodedSupport* const> shots, int class_id, int support_batch) {
    const std::size_t batch = support_batch <= 0 ? shots.size() : static_cast<std::size_t>(support_batch);
    if (batch >= shots.size()) return attend(teacher, query, shots, class_id);
    std::vector<AttentionMapSet> parts;
    for (std::size_t start = 0; start < shots.size(); start += batch) {
        const std::size_t len = std::min(batch, shots.size() - start);
        parts.push_back(attend(teacher, query, shots.subspan(start, len), class_id));
    }
    return average_maps(parts);
}

TeacherOutput teacher_decode(const Teacher& teacher, const EncodedQuery& query, AttentionMapSet maps) {
    Var logits = teacher.decoder().decode(maps, query.features.skip(), query.height, query.width);
    return TeacherOutput{std::move(maps), logits};
}

namespace {
void check_class(int class_id, int num_classes) {
    if (class_id < 1 || class_id > num_classes) {
        throw std::invalid_argument("class_id " + std::to_string(class_id) + " outside 1.." +
                                    std::to_string(num_classes));
    }
}
}  // namespace

TeacherOutput teacher_forward(const Teacher& teacher, const Episode& episode, int class_id, int support_batch) {
    check_class(class_id, episode.support->num_classes());
    EncodedQuery q = encode_query(teacher.backbone(), episode.query);
    std::vector<EncodedSupport> encoded;
    for (const auto& e : episode.support->entries()) encoded.push_back(encode_support(teacher.backbone(), e));
    std::vector<const EncodedSupport*> ptrs;
    for (const auto& e : encoded) ptrs.push_back(&e);
    return teacher_decode(teacher, q, attend_batched(teacher, q, ptrs, class_id, support_batch));
}

MulticlassPrediction multiclass_forward(const Teacher& teacher, const Episode& episode, int support_batch) {
    NoGradGuard no_grad;
    const SupportSet& support = *episode.support;
    const int n = support.num_classes();
    EncodedQuery q = encode_query(teacher.backbone(), episode.query);
    const std::size_t batch = support_batch <= 0 ? support.size() : static_cast<std::size_t>(support_batch);

    std::vector<std::vector<AttentionMapSet>> per_class(static_cast<std::size_t>(n));
    for (std::size_t start = 0; start < support.size(); start += batch) {
        const std::size_t end = std::min(start + batch, support.size());
        std::vector<EncodedSupport> encoded = encode_support_group(
            teacher.backbone(), std::span<const LabeledImage>(support.entries()).subspan(start, end - start));
        std::vector<const EncodedSupport*> ptrs;
        for (const auto& e : encoded) ptrs.push_back(&e);
        for (int c = 1; c <= n; ++c) per_class[static_cast<std::size_t>(c - 1)].push_back(attend(teacher, q, ptrs, c));
    }

    MulticlassPrediction out;
    for (int c = 1; c <= n; ++c) {
        AttentionMapSet maps = average_maps(per_class[static_cast<std::size_t>(c - 1)]);
        Var prob = ops::sigmoid(teacher.decoder().decode(maps, q.features.skip(), q.height, q.width));
        out.probabilities.push_back(prob.value());
    }
    out.mask = assemble_prediction(out.probabilities);
    return out;
}

}  // namespace distillfss
