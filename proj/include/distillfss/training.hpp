#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "distillfss/data.hpp"
#include "distillfss/losses.hpp"
#include "distillfss/metrics.hpp"
#include "distillfss/student.hpp"
#include "distillfss/teacher.hpp"

namespace distillfss {

// Blocks allowed to change during fine-tuning or distillation.
class UnfreezePolicy {
public:
    UnfreezePolicy() = default;
    UnfreezePolicy(std::initializer_list<Block> blocks);

    // Comma-separated block names, e.g. "conv_mapper,conv_skip,classifier".
    static UnfreezePolicy parse(std::string_view csv);

    bool contains(Block b) const { return blocks_.count(b) != 0; }
    bool empty() const { return blocks_.empty(); }
    const std::set<Block>& blocks() const { return blocks_; }
    std::string str() const;

private:
    std::set<Block> blocks_;
};

// ConvMapper plus the skip branch and classifier head.
UnfreezePolicy default_policy();

struct TrainConfig {
    double learning_rate = 1e-3;
    double weight_decay = 1e-2;
    FocalParams focal;
    LossWeights weights;
    int epochs = 50;
    // Conditioning images per pseudo-query step; 0 means min(M - 1, 5).
    int conditioning_count = 0;
    int patience = 10;
    std::uint64_t seed = 0;
    // Support group size for support-set evaluation passes.
    int support_batch = 10;
    // Also train on classes absent from the pseudo-query (all-background
    // target) when the conditioning images contain them.
    bool include_absent_classes = false;

    // Throws std::invalid_argument naming the offending field.
    void validate() const;
    int conditioning_for(std::size_t support_size) const;
};

struct EpochRecord {
    int epoch = 0;           // 0 is the evaluation before any update
    double loss = 0.0;       // mean total loss over steps
    double dist_loss = 0.0;  // NaN when the distillation term is off or n/a
    double seg_student = 0.0;
    double seg_teacher = 0.0;
    double support_miou = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    double best_miou = 0.0;
    bool stopped_early = false;

    std::string to_csv() const;
};

struct TransferResult {
    Teacher teacher;
    TrainHistory history;
};

// Fine-tunes the blocks in `policy` on the support set. Each support image in
// turn is the pseudo-query, conditioned on other support images. Returns the
// parameters of the epoch with the best support mIoU.
TransferResult transfer_fss(const Teacher& base, const SupportSet& support, const UnfreezePolicy& policy,
                            const TrainConfig& config);

struct DistillResult {
    Student student;
    Teacher teacher;  // the teacher as co-trained (shares the decoder state)
    TrainHistory history;
    std::uint64_t dist_loss_evaluations = 0;
};

// Trains per-class ConvDist banks against the teacher's attention maps with
// the composite loss. Attention weights and backbone stay frozen; decoder
// blocks in `decoder_policy` are updated by both segmentation terms.
DistillResult distill_fss(const Teacher& teacher, const SupportSet& support, const TrainConfig& config,
                          bool use_dist_loss, const UnfreezePolicy& decoder_policy = default_policy());

struct BaseTrainConfig {
    TrainConfig train;
    int max_shots = 2;
    int val_queries = 24;
};

struct BaseResult {
    Teacher teacher;
    TrainHistory history;
};

// Episodic training of every teacher block (backbone included) on a source
// dataset: one-class episodes with 1..max_shots support images.
BaseResult train_base(const Dataset& source, const ArchConfig& arch, const BaseTrainConfig& config);

// Support-set mIoU with each entry as query and all other entries as
// conditioning (the teacher's early-stopping signal).
double teacher_support_miou(const Teacher& teacher, const SupportSet& support, int support_batch);
double student_support_miou(const Student& student, const SupportSet& support);

}  // namespace distillfss
