#include "distillfss/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "distillfss/image_io.hpp"
#include "distillfss/rng.hpp"

namespace distillfss {

namespace fs = std::filesystem;

Tensor Image::to_tensor() const {
    Tensor t({3, height, width});
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const std::size_t p = (static_cast<std::size_t>(y) * width + x) * 3;
            for (int c = 0; c < 3; ++c) t.at(c, y, x) = (rgb[p + c] / 255.0 - 0.5) / 0.25;
        }
    }
    return t;
}

MultiClassMask::MultiClassMask(int height, int width, int num_classes, std::vector<std::uint8_t> labels)
    : height_(height), width_(width), num_classes_(num_classes), labels_(std::move(labels)) {
    if (num_classes < 1) throw std::invalid_argument("mask num_classes must be positive");
    if (labels_.size() != static_cast<std::size_t>(height) * width) {
        throw std::invalid_argument("mask label count does not match " + std::to_string(height) + "x" +
                                    std::to_string(width));
    }
    for (auto v : labels_) {
        if (v > num_classes) {
            throw std::invalid_argument("mask value " + std::to_string(v) + " exceeds num_classes " +
                                        std::to_string(num_classes));
        }
    }
}

bool MultiClassMask::has_class(int class_id) const {
    return std::find(labels_.begin(), labels_.end(), static_cast<std::uint8_t>(class_id)) != labels_.end();
}

std::size_t MultiClassMask::count(int class_id) const {
    return static_cast<std::size_t>(std::count(labels_.begin(), labels_.end(), static_cast<std::uint8_t>(class_id)));
}

namespace {
std::string join_ints(const std::vector<int>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
    return os.str();
}

std::vector<int> uncovered_classes(const std::vector<const MultiClassMask*>& masks, int num_classes) {
    std::vector<int> missing;
    for (int c = 1; c <= num_classes; ++c) {
        bool found = false;
        for (const auto* m : masks) found = found || m->has_class(c);
        if (!found) missing.push_back(c);
    }
    return missing;
}
}  // namespace

SupportSet::SupportSet(std::vector<LabeledImage> entries, int num_classes)
    : entries_(std::move(entries)), num_classes_(num_classes) {
    if (entries_.empty()) throw std::invalid_argument("support set needs at least one entry");
    std::vector<const MultiClassMask*> masks;
    for (const auto& e : entries_) {
        if (e.mask.num_classes() != num_classes) {
            throw std::invalid_argument("support entry '" + e.name + "' has num_classes " +
                                        std::to_string(e.mask.num_classes()) + ", expected " +
                                        std::to_string(num_classes));
        }
        if (e.mask.height() != e.image.height || e.mask.width() != e.image.width) {
            throw std::invalid_argument("support entry '" + e.name + "' mask size differs from image size");
        }
        masks.push_back(&e.mask);
    }
    auto missing = uncovered_classes(masks, num_classes);
    if (!missing.empty()) {
        throw std::invalid_argument("support set has no foreground for classes: " + join_ints(missing));
    }
}

Episode::Episode(Image q, std::optional<MultiClassMask> mask, const SupportSet& s)
    : query(std::move(q)), query_mask(std::move(mask)), support(&s) {
    if (query_mask && query_mask->num_classes() != s.num_classes()) {
        throw std::invalid_argument("query mask and support set disagree on num_classes");
    }
}

Dataset load_dataset(const fs::path& root, int num_classes, Split split) {
    const fs::path img_dir = root / "images";
    const fs::path mask_dir = root / "masks";
    if (!fs::is_directory(img_dir)) throw std::runtime_error("missing directory " + img_dir.string());
    if (!fs::is_directory(mask_dir)) throw std::runtime_error("missing directory " + mask_dir.string());

    auto stems = [](const fs::path& dir) {
        std::map<std::string, fs::path> out;
        for (const auto& e : fs::directory_iterator(dir)) {
            if (e.is_regular_file()) out.emplace(e.path().stem().string(), e.path());
        }
        return out;
    };
    const auto images = stems(img_dir);
    const auto masks = stems(mask_dir);
    for (const auto& [name, path] : images) {
        if (!masks.count(name)) throw std::runtime_error("image without mask: " + path.string());
    }
    for (const auto& [name, path] : masks) {
        if (!images.count(name)) throw std::runtime_error("mask without image: " + path.string());
    }

    Dataset ds;
    ds.split = split;
    ds.num_classes = num_classes;
    for (const auto& [name, img_path] : images) {
        const Raster img = read_png(img_path);
        const Raster msk = read_png(masks.at(name));
        if (msk.channels != 1) {
            throw std::runtime_error("mask is not single-channel: " + masks.at(name).string());
        }
        if (msk.width != img.width || msk.height != img.height) {
            throw std::runtime_error("mask size differs from image size: " + masks.at(name).string());
        }
        for (auto v : msk.pixels) {
            if (v > num_classes) {
                throw std::runtime_error("mask value " + std::to_string(v) + " exceeds num_classes " +
                                         std::to_string(num_classes) + " in " + masks.at(name).string());
            }
        }
        LabeledImage item;
        item.name = name;
        item.image.height = img.height;
        item.image.width = img.width;
        item.image.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
        for (std::size_t p = 0; p < static_cast<std::size_t>(img.width) * img.height; ++p) {
            for (int c = 0; c < 3; ++c) {
                // Gray inputs replicate their single channel.
                const int src = img.channels >= 3 ? c : 0;
                item.image.rgb[p * 3 + c] = img.pixels[p * img.channels + src];
            }
        }
        item.mask = MultiClassMask(msk.height, msk.width, num_classes, msk.pixels);
        ds.items.push_back(std::move(item));
    }
    return ds;
}

void save_dataset(const Dataset& dataset, const fs::path& root) {
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    for (const auto& item : dataset.items) {
        write_png(root / "images" / (item.name + ".png"),
                  Raster{item.image.width, item.image.height, 3, item.image.rgb});
        write_png(root / "masks" / (item.name + ".png"),
                  Raster{item.mask.width(), item.mask.height(), 1, item.mask.labels()});
    }
}

std::vector<std::size_t> support_order(const Dataset& dataset, std::uint64_t seed) {
    const int n = dataset.num_classes;
    if (n > 16) throw std::invalid_argument("support_order supports at most 16 classes");
    std::vector<std::size_t> shuffled(dataset.size());
    for (std::size_t i = 0; i < shuffled.size(); ++i) shuffled[i] = i;
    Rng rng(seed);
    rng.shuffle(shuffled);

    // Smallest cover of all classes by breadth-first search over class
    // bitmasks, preferring items that come first in the shuffled order.
    const unsigned full = (1u << n) - 1u;
    std::vector<unsigned> bits(shuffled.size(), 0);
    for (std::size_t k = 0; k < shuffled.size(); ++k) {
        const auto& mask = dataset.items[shuffled[k]].mask;
        for (int c = 1; c <= n; ++c)
            if (mask.has_class(c)) bits[k] |= 1u << (c - 1);
    }
    std::vector<int> parent_item(full + 1, -1);
    std::vector<unsigned> parent_state(full + 1, 0);
    std::vector<bool> reached(full + 1, false);
    reached[0] = true;
    std::vector<unsigned> frontier{0};
    while (!frontier.empty() && !reached[full]) {
        std::vector<unsigned> next;
        for (unsigned s : frontier) {
            for (std::size_t k = 0; k < bits.size(); ++k) {
                const unsigned t = s | bits[k];
                if (reached[t]) continue;
                reached[t] = true;
                parent_item[t] = static_cast<int>(k);
                parent_state[t] = s;
                next.push_back(t);
            }
        }
        frontier = std::move(next);
    }

    std::vector<bool> in_cover(shuffled.size(), false);
    if (reached[full]) {
        for (unsigned s = full; s != 0; s = parent_state[s]) in_cover[static_cast<std::size_t>(parent_item[s])] = true;
    }
    std::vector<std::size_t> order;
    for (std::size_t k = 0; k < shuffled.size(); ++k)
        if (in_cover[k]) order.push_back(shuffled[k]);
    for (std::size_t k = 0; k < shuffled.size(); ++k)
        if (!in_cover[k]) order.push_back(shuffled[k]);
    return order;
}

SupportSet build_support_set(const Dataset& dataset, int m, std::uint64_t seed) {
    if (m < 1) throw std::invalid_argument("support size must be at least 1");
    if (static_cast<std::size_t>(m) > dataset.size()) {
        throw std::invalid_argument("support size " + std::to_string(m) + " exceeds dataset size " +
                                    std::to_string(dataset.size()));
    }
    const auto order = support_order(dataset, seed);
    std::vector<const MultiClassMask*> masks;
    std::vector<LabeledImage> entries;
    for (int i = 0; i < m; ++i) {
        entries.push_back(dataset.items[order[static_cast<std::size_t>(i)]]);
        masks.push_back(&dataset.items[order[static_cast<std::size_t>(i)]].mask);
    }
    const auto missing = uncovered_classes(masks, dataset.num_classes);
    if (!missing.empty()) {
        throw std::invalid_argument("cannot cover all classes with " + std::to_string(m) +
                                    " support images; uncovered classes: " + join_ints(missing));
    }
    return SupportSet(std::move(entries), dataset.num_classes);
}

Tensor binarize_mask(const MultiClassMask& mask, int class_id) {
    if (class_id < 1 || class_id > mask.num_classes()) {
        throw std::invalid_argument("class_id " + std::to_string(class_id) + " outside 1.." +
                                    std::to_string(mask.num_classes()));
    }
    Tensor t({1, mask.height(), mask.width()});
    const auto& labels = mask.labels();
    for (std::size_t i = 0; i < labels.size(); ++i) t[i] = labels[i] == class_id ? 1.0 : 0.0;
    return t;
}

namespace {

struct Rgb {
    double r, g, b;
};

// Per-class base colour with brightness and channel jitter.
Rgb class_color(Rng& rng, int cls) {
    constexpr Rgb kBase[] = {{0.85, 0.25, 0.20}, {0.20, 0.72, 0.30}, {0.25, 0.35, 0.90}};
    const Rgb col = kBase[cls - 1];
    const double bright = rng.uniform(0.8, 1.1);
    return {col.r * bright + rng.uniform(-0.08, 0.08), col.g * bright + rng.uniform(-0.08, 0.08),
            col.b * bright + rng.uniform(-0.08, 0.08)};
}

// Families 0-2 form the target domain, 3-5 the source domain.
bool inside_shape(int family, double px, double py, double cx, double cy, double a, double b) {
    const double dx = (px - cx) / a, dy = (py - cy) / b;
    switch (family) {
        case 0: return dx * dx + dy * dy <= 1.0;
        case 1: return std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        case 2: {
            // Upward isosceles triangle: apex at (cx, cy - b), base at y = cy + b.
            if (dy < -1.0 || dy > 1.0) return false;
            return std::abs(dx) <= (dy + 1.0) / 2.0;
        }
        case 3: {
            const double rr = dx * dx + dy * dy;
            return rr <= 1.0 && rr >= 0.3;
        }
        case 4: return (std::abs(dx) <= 1.0 && std::abs(dy) <= 0.35) || (std::abs(dy) <= 1.0 && std::abs(dx) <= 0.35);
        default: return std::abs(dx) + std::abs(dy) <= 1.0;
    }
}

LabeledImage synth_item(int size, int num_classes, int first_family, Rng& rng) {
    const std::size_t npix = static_cast<std::size_t>(size) * size;
    std::vector<double> pix(npix * 3);
    std::vector<std::uint8_t> labels(npix, 0);

    // Low-saturation background with a faint oriented stripe texture.
    const double base = rng.uniform(0.35, 0.65);
    const double tint[3] = {rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)};
    const double theta = rng.uniform(0.0, 3.141592653589793);
    const double freq = rng.uniform(0.15, 0.45);
    const double amp = rng.uniform(0.02, 0.06);
    const double phase = rng.uniform(0.0, 6.283185307179586);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double stripe = amp * std::sin(freq * (x * std::cos(theta) + y * std::sin(theta)) + phase);
            const std::size_t p = static_cast<std::size_t>(y) * size + x;
            for (int c = 0; c < 3; ++c) pix[p * 3 + c] = base + tint[c] + stripe + rng.uniform(-0.06, 0.06);
        }
    }

    const int shapes = rng.uniform_int(1, 3);
    for (int s = 0; s < shapes; ++s) {
        const int cls = rng.uniform_int(1, num_classes);
        const double r = rng.uniform(0.11, 0.2) * size;
        const double a = r * rng.uniform(0.75, 1.15);
        const double b = r * rng.uniform(0.75, 1.15);
        const double cx = rng.uniform(a, size - a);
        const double cy = rng.uniform(b, size - b);
        const int family = first_family + cls - 1;
        const Rgb col = class_color(rng, cls);
        const double rgb[3] = {col.r, col.g, col.b};
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                if (!inside_shape(family, x + 0.5, y + 0.5, cx, cy, a, b)) continue;
                const std::size_t p = static_cast<std::size_t>(y) * size + x;
                labels[p] = static_cast<std::uint8_t>(cls);
                for (int c = 0; c < 3; ++c) pix[p * 3 + c] = rgb[c] + rng.uniform(-0.04, 0.04);
            }
        }
    }

    LabeledImage item;
    item.image.height = size;
    item.image.width = size;
    item.image.rgb.resize(npix * 3);
    for (std::size_t i = 0; i < pix.size(); ++i) {
        item.image.rgb[i] = static_cast<std::uint8_t>(std::lround(std::clamp(pix[i], 0.0, 1.0) * 255.0));
    }
    item.mask = MultiClassMask(size, size, num_classes, std::move(labels));
    return item;
}

}  // namespace

Dataset synth_shapes(int num_items, int image_size, int num_classes, std::uint64_t seed, Split split,
                     ShapeDomain domain) {
    if (num_classes < 1 || num_classes > 3) throw std::invalid_argument("synth_shapes: num_classes must be 1..3");
    if (image_size < 32) throw std::invalid_argument("synth_shapes: image_size must be at least 32");
    if (num_items < 0) throw std::invalid_argument("synth_shapes: num_items must be non-negative");
    Dataset ds;
    ds.split = split;
    ds.num_classes = num_classes;
    const std::uint64_t stream = derive_seed(seed, split == Split::Train ? 1 : 2);
    for (int i = 0; i < num_items; ++i) {
        Rng rng(derive_seed(stream, static_cast<std::uint64_t>(i)));
        LabeledImage item = synth_item(image_size, num_classes, domain == ShapeDomain::Target ? 0 : 3, rng);
        char name[32];
        std::snprintf(name, sizeof(name), "%s_%04d", split == Split::Train ? "train" : "test", i);
        item.name = name;
        ds.items.push_back(std::move(item));
    }
    return ds;
}

}  // namespace distillfss
