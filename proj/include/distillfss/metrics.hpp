#pragma once

#include <cstdint>
#include <vector>

#include "distillfss/data.hpp"

namespace distillfss {

struct ClassIou {
    int class_id = 0;
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;

    std::uint64_t union_size() const { return tp + fp + fn; }
    double iou() const;  // NaN when the union is empty
};

struct Metrics {
    std::vector<ClassIou> per_class;
    // Mean IoU over classes with a non-empty union; NaN if there are none.
    double miou = 0.0;
    std::size_t images = 0;
};

// Accumulates TP/FP/FN per class over a whole dataset and reports IoU from
// the global counts, not per-image averages.
class IouAccumulator {
public:
    explicit IouAccumulator(std::vector<int> classes);
    // Classes 1..num_classes.
    static IouAccumulator for_classes(int num_classes);

    void add(const MultiClassMask& pred, const MultiClassMask& target);
    Metrics result() const;

private:
    std::vector<ClassIou> counts_;
    std::size_t images_ = 0;
};

Metrics miou(const MultiClassMask& pred, const MultiClassMask& target, const std::vector<int>& classes);

}  // namespace distillfss
