#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "distillfss/backbone.hpp"
#include "distillfss/data.hpp"
#include "distillfss/decoder.hpp"
#include "distillfss/teacher.hpp"

namespace distillfss {

// One distillation head replacing one attention layer:
// 3x3 conv (C->C), ReLU, 1x1 conv (C->1), sigmoid.
struct ConvDistLayer {
    Var conv3_weight, conv3_bias;
    Var conv1_weight, conv1_bias;
};

Var conv_dist(const Var& query_feature, const ConvDistLayer& head);

// Support-free segmentation model: the teacher's backbone and decoder with
// one ConvDist bank (one head per attention layer) per class.
class Student {
public:
    // Shares the teacher's backbone and decoder parameter handles, so updates
    // through either model are seen by both. Heads start as constant 0.5
    // maps (zero 1x1 conv).
    static Student from_teacher(const Teacher& teacher, int num_classes, std::uint64_t seed);
    static Student from_params(const ArchConfig& cfg, int num_classes, ParamStore store);

    Student(Student&&) noexcept = default;
    Student& operator=(Student&&) noexcept = default;

    Student clone() const;

    const ArchConfig& config() const { return cfg_; }
    int num_classes() const { return num_classes_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const Backbone& backbone() const { return *backbone_; }
    const Decoder& decoder() const { return *decoder_; }
    const std::vector<int>& slots() const { return slots_; }
    const ConvDistLayer& head(int class_id, std::size_t layer) const;

    // Free-form provenance (e.g. the support size it was distilled from).
    // Never read by the forward pass.
    std::map<std::string, std::string> metadata;

private:
    Student(ArchConfig cfg, int num_classes, ParamStore store);

    ArchConfig cfg_;
    int num_classes_;
    ParamStore store_;
    std::unique_ptr<Backbone> backbone_;
    std::unique_ptr<Decoder> decoder_;
    std::vector<int> slots_;
    std::vector<std::vector<ConvDistLayer>> banks_;
};

std::string convdist_name(int class_id, std::size_t layer);

struct StudentOutput {
    AttentionMapSet maps;  // distilled maps, same layout as the teacher's
    Var logits;
};

// The query image is the only input.
StudentOutput student_forward(const Student& student, const Image& query, int class_id);
StudentOutput student_forward_features(const Student& student, const QueryFeatures& query, int class_id);

// Classes 1..ways (all classes when ways is 0).
MulticlassPrediction student_multiclass_forward(const Student& student, const Image& query, int ways = 0);

}  // namespace distillfss
