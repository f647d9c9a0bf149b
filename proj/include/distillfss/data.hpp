#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "distillfss/tensor.hpp"

namespace distillfss {

// 8-bit RGB image, row-major interleaved.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> rgb;

    // 3 x H x W tensor, each channel mapped to (v/255 - 0.5) / 0.25.
    Tensor to_tensor() const;
};

// Per-pixel class indices in {0..N}; 0 is background.
class MultiClassMask {
public:
    MultiClassMask() = default;
    MultiClassMask(int height, int width, int num_classes, std::vector<std::uint8_t> labels);

    int height() const { return height_; }
    int width() const { return width_; }
    int num_classes() const { return num_classes_; }
    const std::vector<std::uint8_t>& labels() const { return labels_; }
    std::uint8_t at(int y, int x) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }

    bool has_class(int class_id) const;
    std::size_t count(int class_id) const;

    bool operator==(const MultiClassMask& other) const = default;

private:
    int height_ = 0;
    int width_ = 0;
    int num_classes_ = 0;
    std::vector<std::uint8_t> labels_;
};

struct LabeledImage {
    std::string name;
    Image image;
    MultiClassMask mask;
};

enum class Split { Train, Test };

struct Dataset {
    Split split = Split::Train;
    int num_classes = 0;
    std::vector<LabeledImage> items;

    std::size_t size() const { return items.size(); }
};

// Ordered (image, mask) pairs conditioning a few-shot model. Construction
// fails unless every class 1..N is foreground somewhere.
class SupportSet {
public:
    SupportSet(std::vector<LabeledImage> entries, int num_classes);

    const std::vector<LabeledImage>& entries() const { return entries_; }
    const LabeledImage& operator[](std::size_t i) const { return entries_[i]; }
    std::size_t size() const { return entries_.size(); }
    int num_classes() const { return num_classes_; }

private:
    std::vector<LabeledImage> entries_;
    int num_classes_;
};

// A query to segment against a support set the caller keeps alive.
struct Episode {
    Image query;
    std::optional<MultiClassMask> query_mask;
    const SupportSet* support = nullptr;

    Episode(Image q, std::optional<MultiClassMask> mask, const SupportSet& s);
};

// Reads root/images/<name>.png and root/masks/<name>.png, sorted by name.
Dataset load_dataset(const std::filesystem::path& root, int num_classes, Split split = Split::Train);
// Writes the same layout load_dataset reads.
void save_dataset(const Dataset& dataset, const std::filesystem::path& root);

// Seeded selection of m items covering every class. The selection for a
// given seed is a prefix of one fixed ordering, so larger m always contains
// the smaller selection.
SupportSet build_support_set(const Dataset& dataset, int m, std::uint64_t seed);
// The full ordering behind build_support_set.
std::vector<std::size_t> support_order(const Dataset& dataset, std::uint64_t seed);

// 1 x H x W tensor holding 1 where mask == class_id, 0 elsewhere.
Tensor binarize_mask(const MultiClassMask& mask, int class_id);

// Target classes are 1 circle, 2 rectangle, 3 triangle. The source domain
// uses disjoint families (1 ring, 2 cross, 3 diamond).
enum class ShapeDomain { Target, Source };

// Jittered class-coloured shapes on noisy textured backgrounds, one shape
// family per class. Splits draw from disjoint seed streams.
Dataset synth_shapes(int num_items, int image_size, int num_classes, std::uint64_t seed, Split split = Split::Train,
                     ShapeDomain domain = ShapeDomain::Target);

}  // namespace distillfss
