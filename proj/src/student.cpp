#include "distillfss/student.hpp"

#include <stdexcept>

#include "distillfss/flops.hpp"
#include "distillfss/ops.hpp"

namespace distillfss {

std::string convdist_name(int class_id, std::size_t layer) {
    return "convdist.c" + std::to_string(class_id) + ".l" + std::to_string(layer);
}

Var conv_dist(const Var& query_feature, const ConvDistLayer& head) {
    const int c = head.conv3_weight.dim(1);
    if (query_feature.value().rank() != 3 || query_feature.dim(0) != c) {
        throw std::invalid_argument("conv_dist: expected " + std::to_string(c) + " input channels, got " +
                                    shape_str(query_feature.shape()));
    }
    flops::Scope scope(flops::Category::ConvDist);
    Var x = ops::relu(ops::conv2d(query_feature, head.conv3_weight, head.conv3_bias));
    return ops::sigmoid(ops::conv2d(x, head.conv1_weight, head.conv1_bias));
}

Student::Student(ArchConfig cfg, int num_classes, ParamStore store)
    : cfg_(std::move(cfg)), num_classes_(num_classes), store_(std::move(store)) {
    if (num_classes_ < 1) throw std::invalid_argument("student needs at least one class");
    cfg_.sync();
    backbone_ = std::make_unique<ToyBackbone>(store_, cfg_.backbone);
    decoder_ = std::make_unique<Decoder>(store_, cfg_.decoder);
    slots_ = layer_slots(cfg_.backbone.scales);
    const std::size_t layers = slots_.size();
    for (int c = 1; c <= num_classes_; ++c) {
        std::vector<ConvDistLayer> bank;
        for (std::size_t l = 0; l < layers; ++l) {
            const std::string base = convdist_name(c, l);
            bank.push_back(ConvDistLayer{store_.get(base + ".conv3.weight"), store_.get(base + ".conv3.bias"),
                                         store_.get(base + ".conv1.weight"), store_.get(base + ".conv1.bias")});
        }
        banks_.push_back(std::move(bank));
    }
}

Student Student::from_teacher(const Teacher& teacher, int num_classes, std::uint64_t seed) {
    ParamStore store;
    for (const auto& [name, v] : teacher.params().entries()) {
        const Block b = block_of(name);
        if (b != Block::AttentionWeights) store.share(name, v);
    }
    Rng rng(seed);
    const auto channels = teacher.backbone().layer_channels();
    for (int c = 1; c <= num_classes; ++c) {
        for (std::size_t l = 0; l < channels.size(); ++l) {
            const int ch = channels[l];
            const std::string base = convdist_name(c, l);
            store.add(base + ".conv3.weight", he_normal({ch, ch, 3, 3}, ch * 9, rng, 0.1));
            store.add(base + ".conv3.bias", zeros({ch}));
            store.add(base + ".conv1.weight", zeros({1, ch, 1, 1}));
            store.add(base + ".conv1.bias", zeros({1}));
        }
    }
    return Student(teacher.config(), num_classes, std::move(store));
}

Student Student::from_params(const ArchConfig& cfg, int num_classes, ParamStore store) {
    return Student(cfg, num_classes, std::move(store));
}

Student Student::clone() const {
    Student s(cfg_, num_classes_, store_.deep_copy());
    s.metadata = metadata;
    return s;
}

const ConvDistLayer& Student::head(int class_id, std::size_t layer) const {
    if (class_id < 1 || class_id > num_classes_) {
        throw std::invalid_argument("student has no ConvDist bank for class " + std::to_string(class_id));
    }
    return banks_[static_cast<std::size_t>(class_id - 1)].at(layer);
}

StudentOutput student_forward_features(const Student& student, const QueryFeatures& query, int class_id) {
    std::vector<Var> maps;
    for (const auto& layer : query.features.layers) {
        maps.push_back(conv_dist(layer.map, student.head(class_id, static_cast<std::size_t>(layer.layer))));
    }
    AttentionMapSet set(std::move(maps), student.slots());
    Var logits = student.decoder().decode(set, query.skip(), query.features.input_height, query.features.input_width);
    return StudentOutput{std::move(set), logits};
}

StudentOutput student_forward(const Student& student, const Image& query, int class_id) {
    return student_forward_features(student, extract_query(student.backbone(), query.to_tensor()), class_id);
}

MulticlassPrediction student_multiclass_forward(const Student& student, const Image& query, int ways) {
    if (ways < 0 || ways > student.num_classes()) {
        throw std::invalid_argument("student has " + std::to_string(student.num_classes()) + " classes, asked for " +
                                    std::to_string(ways));
    }
    const int n = ways == 0 ? student.num_classes() : ways;
    NoGradGuard no_grad;
    QueryFeatures f = extract_query(student.backbone(), query.to_tensor());
    MulticlassPrediction out;
    for (int c = 1; c <= n; ++c) {
        StudentOutput o = student_forward_features(student, f, c);
        out.probabilities.push_back(ops::sigmoid(o.logits).value());
    }
    out.mask = assemble_prediction(out.probabilities);
    return out;
}

}  // namespace distillfss
