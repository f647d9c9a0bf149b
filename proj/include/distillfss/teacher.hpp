#pragma once

#include <memory>
#include <span>
#include <vector>

#include "distillfss/backbone.hpp"
#include "distillfss/data.hpp"
#include "distillfss/decoder.hpp"
#include "distillfss/params.hpp"

namespace distillfss {

struct ArchConfig {
    ToyBackboneConfig backbone;
    DecoderConfig decoder;

    // Fills the decoder's per-scale map counts and skip channels from the
    // backbone and checks the two agree.
    void sync();
};

ArchConfig default_arch();

// Per-scale query/key projections W^Q, W^K (C_j x C_j, so d_k = C_j),
// shared by every layer at that scale.
struct AttentionParams {
    std::vector<Var> wq;
    std::vector<Var> wk;

    static void init_params(ParamStore& store, const ToyBackboneConfig& cfg, Rng& rng);
    static AttentionParams bind(const ParamStore& store, int num_slots);
};

// softmax(Q K^T / sqrt(d_k)) * mask with Q = query_tokens W^Q and
// K = support_tokens W^K, reshaped to 1 x H x W of the query grid.
Var cross_attention(const TokenSequence& query, const Var& support_tokens, const Tensor& mask_column,
                    const AttentionParams& params, int slot);

struct SupportKeys {
    Var tokens;   // (K * N_j) x C_j
    Tensor mask;  // (K * N_j) x 1
};

// Concatenates per-shot tokens and mask columns in support order.
SupportKeys multi_shot_keys(std::span<const Var> shot_tokens, std::span<const Tensor> shot_masks);

// Query features plus position-encoded tokens for every attention layer.
struct EncodedQuery {
    QueryFeatures features;
    std::vector<TokenSequence> tokens;
    int height = 0;
    int width = 0;
};

// Support-side attention inputs: tokens and downsampled class-index columns
// per layer. Deliberately holds no skip features.
struct EncodedSupport {
    std::vector<Var> tokens;
    std::vector<Tensor> labels;  // N_j x 1, values in {0..N}
};

EncodedQuery encode_query(const Backbone& backbone, const Image& image);
EncodedSupport encode_support(const Backbone& backbone, const LabeledImage& entry);
// One batched backbone pass over a support group.
std::vector<EncodedSupport> encode_support_group(const Backbone& backbone, std::span<const LabeledImage> entries);

class Teacher {
public:
    static Teacher create(const ArchConfig& cfg, std::uint64_t seed);
    // Binds to an existing store; throws naming the first missing block.
    static Teacher from_params(const ArchConfig& cfg, ParamStore store);

    Teacher(Teacher&&) noexcept = default;
    Teacher& operator=(Teacher&&) noexcept = default;

    Teacher clone() const;

    const ArchConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const Backbone& backbone() const { return *backbone_; }
    const AttentionParams& attention() const { return attention_; }
    const Decoder& decoder() const { return *decoder_; }
    const std::vector<int>& slots() const { return slots_; }

private:
    Teacher(ArchConfig cfg, ParamStore store);

    ArchConfig cfg_;
    ParamStore store_;
    std::unique_ptr<Backbone> backbone_;
    AttentionParams attention_;
    std::unique_ptr<Decoder> decoder_;
    std::vector<int> slots_;
};

// Attention maps of the query against all shots for one class.
AttentionMapSet attend(const Teacher& teacher, const EncodedQuery& query,
                       std::span<const EncodedSupport* const> shots, int class_id);

// Splits shots into groups of at most `support_batch` (0 = one group),
// attends per group and averages the per-group maps layer by layer.
AttentionMapSet attend_batched(const Teacher& teacher, const EncodedQuery& query,
                               std::span<const EncodedSupport* const> shots, int class_id, int support_batch);

struct TeacherOutput {
    AttentionMapSet maps;
    Var logits;  // 1 x H x W
};

TeacherOutput teacher_decode(const Teacher& teacher, const EncodedQuery& query, AttentionMapSet maps);
TeacherOutput teacher_forward(const Teacher& teacher, const Episode& episode, int class_id, int support_batch = 0);

struct MulticlassPrediction {
    std::vector<Tensor> probabilities;  // one 1 x H x W map per class
    MultiClassMask mask;
};

// One-vs-all over classes 1..N. Support images are encoded one group at a
// time, so peak memory stops growing once the support exceeds the group size.
MulticlassPrediction multiclass_forward(const Teacher& teacher, const Episode& episode, int support_batch = 0);

}  // namespace distillfss
