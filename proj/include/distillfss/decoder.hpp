#pragma once

#include <span>
#include <vector>

#include "distillfss/backbone.hpp"
#include "distillfss/data.hpp"
#include "distillfss/params.hpp"

namespace distillfss {

// Per-layer single-channel maps (attention maps from the teacher or distilled
// maps from the student), each 1 x H_j x W_j, in the backbone's layer order.
// Slot 0 is the finest attention scale.
class AttentionMapSet {
public:
    AttentionMapSet() = default;
    AttentionMapSet(std::vector<Var> maps, std::vector<int> layer_slots);

    const std::vector<Var>& maps() const { return maps_; }
    std::size_t size() const { return maps_.size(); }
    int slot_of(std::size_t layer) const { return slots_[layer]; }
    const std::vector<int>& slots() const { return slots_; }
    int num_slots() const;

    // L_j x H_j x W_j stack of the layers at one scale; a pure reshaping of
    // the per-layer list.
    Var grouped(int slot) const;

private:
    std::vector<Var> maps_;
    std::vector<int> slots_;
};

// Maps each attention layer of a backbone to its decoder slot.
std::vector<int> layer_slots(const ScaleSpec& scales);

struct DecoderConfig {
    std::vector<int> maps_per_scale = {2, 2, 2};  // L_j, finest attention scale first
    int skip_in_channels = 16;
    int mapper_width = 64;
    int merge_width = 64;
    int skip_width = 32;
    int mixer_width = 32;
};

// Shared aggregation decoder. Consumes only attention-style maps and
// query-derived skip features.
class Decoder {
public:
    Decoder(const ParamStore& store, DecoderConfig cfg);
    static void init_params(ParamStore& store, const DecoderConfig& cfg, Rng& rng);

    const DecoderConfig& config() const { return cfg_; }

    // Three conv+ReLU layers per scale; input slot j must have L_j channels.
    std::vector<Var> conv_mapper(std::span<const Var> stacks) const;
    // Coarse-to-fine upsample-concat-conv fusion ending at the finest slot.
    Var conv_merge(std::span<const Var> mapped) const;
    // ConvSkip over query skip features, concat with upsampled merged
    // features, three conv blocks, 1x1 classifier, bilinear resize to the
    // output size. Returns a 1 x out_h x out_w logit map.
    Var mixer(const Var& merged, const QuerySkip& skip, int out_h, int out_w) const;

    Var decode(const AttentionMapSet& maps, const QuerySkip& skip, int out_h, int out_w) const;

    // Derived from the configuration alone.
    int mixer_input_channels() const { return cfg_.merge_width + cfg_.skip_width; }

private:
    struct Conv {
        Var weight, bias;
    };
    DecoderConfig cfg_;
    std::vector<std::vector<Conv>> mapper_;
    std::vector<Conv> merge_;  // merge_[k] produces slot k
    Conv skip_;
    std::vector<Conv> mixer_;
    Conv classifier_;
};

// Per-pixel argmax over class foreground probabilities when the best one
// exceeds 0.5, background otherwise; ties go to the lowest class index.
MultiClassMask assemble_prediction(std::span<const Tensor> class_probabilities);

}  // namespace distillfss
