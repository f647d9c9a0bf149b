#include "distillfss/decoder.hpp"

#include <algorithm>
#include <stdexcept>

#include "distillfss/flops.hpp"
#include "distillfss/ops.hpp"

namespace distillfss {

AttentionMapSet::AttentionMapSet(std::vector<Var> maps, std::vector<int> layer_slots)
    : maps_(std::move(maps)), slots_(std::move(layer_slots)) {
    if (maps_.size() != slots_.size()) throw std::invalid_argument("one scale slot per map required");
}

int AttentionMapSet::num_slots() const {
    return slots_.empty() ? 0 : *std::max_element(slots_.begin(), slots_.end()) + 1;
}

Var AttentionMapSet::grouped(int slot) const {
    std::vector<Var> layers;
    for (std::size_t i = 0; i < maps_.size(); ++i)
        if (slots_[i] == slot) layers.push_back(maps_[i]);
    if (layers.empty()) throw std::invalid_argument("no maps at scale slot " + std::to_string(slot));
    return ops::concat_channels(layers);
}

std::vector<int> layer_slots(const ScaleSpec& scales) {
    std::vector<int> out;
    for (std::size_t i = 1; i < scales.layers_per_scale.size(); ++i)
        for (int k = 0; k < scales.layers_per_scale[i]; ++k) out.push_back(static_cast<int>(i) - 1);
    return out;
}

namespace {
std::string mapper_name(std::size_t slot, int k) {
    return "decoder.mapper.s" + std::to_string(slot) + ".conv" + std::to_string(k);
}
std::string merge_name(std::size_t k) { return "decoder.merge.m" + std::to_string(k); }
std::string mixer_name(int k) { return "decoder.mixer.conv" + std::to_string(k); }
}  // namespace

void Decoder::init_params(ParamStore& store, const DecoderConfig& cfg, Rng& rng) {
    if (cfg.maps_per_scale.empty()) throw std::invalid_argument("decoder needs at least one attention scale");
    auto conv = [&](const std::string& name, int in, int out, int k) {
        store.add(name + ".weight", he_normal({out, in, k, k}, in * k * k, rng));
        store.add(name + ".bias", zeros({out}));
    };
    const std::size_t scales = cfg.maps_per_scale.size();
    for (std::size_t s = 0; s < scales; ++s) {
        conv(mapper_name(s, 0), cfg.maps_per_scale[s], cfg.mapper_width, 3);
        conv(mapper_name(s, 1), cfg.mapper_width, cfg.mapper_width, 3);
        conv(mapper_name(s, 2), cfg.mapper_width, cfg.mapper_width, 3);
    }
    if (scales == 1) {
        conv(merge_name(0), cfg.mapper_width, cfg.merge_width, 3);
    } else {
        for (std::size_t k = scales - 1; k-- > 0;) {
            const int coarse = (k == scales - 2) ? cfg.mapper_width : cfg.merge_width;
            conv(merge_name(k), coarse + cfg.mapper_width, cfg.merge_width, 3);
        }
    }
    conv("decoder.skip.conv", cfg.skip_in_channels, cfg.skip_width, 3);
    conv(mixer_name(0), cfg.merge_width + cfg.skip_width, cfg.mixer_width, 3);
    conv(mixer_name(1), cfg.mixer_width, cfg.mixer_width, 3);
    conv(mixer_name(2), cfg.mixer_width, cfg.mixer_width, 3);
    store.add("decoder.classifier.weight", he_normal({1, cfg.mixer_width, 1, 1}, cfg.mixer_width, rng, 0.5));
    store.add("decoder.classifier.bias", zeros({1}));
}

Decoder::Decoder(const ParamStore& store, DecoderConfig cfg) : cfg_(std::move(cfg)) {
    auto bind = [&](const std::string& name) { return Conv{store.get(name + ".weight"), store.get(name + ".bias")}; };
    const std::size_t scales = cfg_.maps_per_scale.size();
    for (std::size_t s = 0; s < scales; ++s) {
        mapper_.push_back({bind(mapper_name(s, 0)), bind(mapper_name(s, 1)), bind(mapper_name(s, 2))});
    }
    merge_.resize(scales == 1 ? 1 : scales - 1);
    for (std::size_t k = 0; k < merge_.size(); ++k) merge_[k] = bind(merge_name(k));
    skip_ = bind("decoder.skip.conv");
    for (int k = 0; k < 3; ++k) mixer_.push_back(bind(mixer_name(k)));
    classifier_ = bind("decoder.classifier");
}

std::vector<Var> Decoder::conv_mapper(std::span<const Var> stacks) const {
    if (stacks.size() != mapper_.size()) {
        throw std::invalid_argument("conv_mapper: expected " + std::to_string(mapper_.size()) + " scales, got " +
                                    std::to_string(stacks.size()));
    }
    flops::Scope scope(flops::Category::Decoder);
    std::vector<Var> out;
    for (std::size_t s = 0; s < stacks.size(); ++s) {
        if (stacks[s].value().rank() != 3 || stacks[s].dim(0) != cfg_.maps_per_scale[s]) {
            throw std::invalid_argument("conv_mapper: scale " + std::to_string(s) + " expects " +
                                        std::to_string(cfg_.maps_per_scale[s]) + " maps, got " +
                                        shape_str(stacks[s].shape()));
        }
        Var x = stacks[s];
        for (const auto& c : mapper_[s]) x = ops::relu(ops::conv2d(x, c.weight, c.bias));
        out.push_back(x);
    }
    return out;
}

Var Decoder::conv_merge(std::span<const Var> mapped) const {
    const std::size_t scales = cfg_.maps_per_scale.size();
    if (mapped.size() != scales) {
        throw std::invalid_argument("conv_merge: missing scale, expected " + std::to_string(scales) + " got " +
                                    std::to_string(mapped.size()));
    }
    flops::Scope scope(flops::Category::Decoder);
    if (scales == 1) return ops::relu(ops::conv2d(mapped[0], merge_[0].weight, merge_[0].bias));
    Var x = mapped[scales - 1];
    for (std::size_t k = scales - 1; k-- > 0;) {
        const Var& fine = mapped[k];
        Var up = ops::upsample_bilinear(x, fine.dim(1), fine.dim(2));
        const Var parts[] = {up, fine};
        x = ops::relu(ops::conv2d(ops::concat_channels(parts), merge_[k].weight, merge_[k].bias));
    }
    return x;
}

Var Decoder::mixer(const Var& merged, const QuerySkip& skip, int out_h, int out_w) const {
    flops::Scope scope(flops::Category::Decoder);
    const Var& sf = skip.features();
    Var s = ops::relu(ops::conv2d(sf, skip_.weight, skip_.bias));
    Var up = ops::upsample_bilinear(merged, sf.dim(1), sf.dim(2));
    const Var parts[] = {up, s};
    Var x = ops::concat_channels(parts);
    for (const auto& c : mixer_) x = ops::relu(ops::conv2d(x, c.weight, c.bias));
    Var logits = ops::conv2d(x, classifier_.weight, classifier_.bias);
    return ops::upsample_bilinear(logits, out_h, out_w);
}

Var Decoder::decode(const AttentionMapSet& maps, const QuerySkip& skip, int out_h, int out_w) const {
    std::vector<Var> stacks;
    for (int slot = 0; slot < static_cast<int>(cfg_.maps_per_scale.size()); ++slot) stacks.push_back(maps.grouped(slot));
    const auto mapped = conv_mapper(stacks);
    return mixer(conv_merge(mapped), skip, out_h, out_w);
}

MultiClassMask assemble_prediction(std::span<const Tensor> class_probabilities) {
    if (class_probabilities.empty()) throw std::invalid_argument("assemble_prediction: no classes");
    const Tensor& first = class_probabilities[0];
    const int h = first.dim(1), w = first.dim(2);
    std::vector<std::uint8_t> labels(static_cast<std::size_t>(h) * w, 0);
    for (const auto& p : class_probabilities) {
        if (!p.same_shape(first)) throw std::invalid_argument("assemble_prediction: probability map shapes differ");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        double best = 0.5;
        int cls = 0;
        for (std::size_t c = 0; c < class_probabilities.size(); ++c) {
            // Strict comparison keeps the lowest index on ties.
            if (class_probabilities[c][i] > best) {
                best = class_probabilities[c][i];
                cls = static_cast<int>(c) + 1;
            }
        }
        labels[i] = static_cast<std::uint8_t>(cls);
    }
    return MultiClassMask(h, w, static_cast<int>(class_probabilities.size()), std::move(labels));
}

}  // namespace distillfss
