#include "distillfss/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace distillfss {

double ClassIou::iou() const {
    const std::uint64_t u = union_size();
    if (u == 0) return std::numeric_limits<double>::quiet_NaN();
    return static_cast<double>(tp) / static_cast<double>(u);
}

IouAccumulator::IouAccumulator(std::vector<int> classes) {
    if (classes.empty()) throw std::invalid_argument("IouAccumulator: no classes to evaluate");
    for (int c : classes) {
        if (c < 1 || c > 255) throw std::invalid_argument("IouAccumulator: bad class id " + std::to_string(c));
        counts_.push_back(ClassIou{c, 0, 0, 0});
    }
}

IouAccumulator IouAccumulator::for_classes(int num_classes) {
    std::vector<int> ids;
    for (int c = 1; c <= num_classes; ++c) ids.push_back(c);
    return IouAccumulator(std::move(ids));
}

void IouAccumulator::add(const MultiClassMask& pred, const MultiClassMask& target) {
    if (pred.height() != target.height() || pred.width() != target.width()) {
        throw std::invalid_argument("IouAccumulator: prediction " + std::to_string(pred.height()) + "x" +
                                    std::to_string(pred.width()) + " vs target " + std::to_string(target.height()) +
                                    "x" + std::to_string(target.width()));
    }
    const auto& p = pred.labels();
    const auto& t = target.labels();
    for (auto& cc : counts_) {
        const auto id = static_cast<std::uint8_t>(cc.class_id);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const bool pp = p[i] == id;
            const bool tt = t[i] == id;
            if (pp && tt) ++cc.tp;
            else if (pp) ++cc.fp;
            else if (tt) ++cc.fn;
        }
    }
    ++images_;
}

Metrics IouAccumulator::result() const {
    Metrics m;
    m.per_class = counts_;
    m.images = images_;
    double sum = 0.0;
    int counted = 0;
    for (const auto& c : counts_) {
        if (c.union_size() == 0) continue;
        sum += c.iou();
        ++counted;
    }
    m.miou = counted ? sum / counted : std::numeric_limits<double>::quiet_NaN();
    return m;
}

Metrics miou(const MultiClassMask& pred, const MultiClassMask& target, const std::vector<int>& classes) {
    IouAccumulator acc(classes);
    acc.add(pred, target);
    return acc.result();
}

}  // namespace distillfss
