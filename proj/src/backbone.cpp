#include "distillfss/backbone.hpp"

#include <cmath>
#include <stdexcept>

#include "distillfss/flops.hpp"
#include "distillfss/ops.hpp"

namespace distillfss {

int ScaleSpec::factor(int n) const {
    int f = 1;
    for (int i = 0; i < n; ++i) f *= base;
    return f;
}

int ScaleSpec::total_layers() const {
    int t = 0;
    for (int l : layers_per_scale) t += l;
    return t;
}

void ScaleSpec::validate() const {
    if (base < 2) throw std::invalid_argument("scale base must be at least 2");
    if (n_min < 1 || n_min >= n_max) throw std::invalid_argument("scale range requires 1 <= n_min < n_max");
    if (static_cast<int>(layers_per_scale.size()) != num_scales()) {
        throw std::invalid_argument("layers_per_scale needs one entry per scale " + std::to_string(n_min) + ".." +
                                    std::to_string(n_max));
    }
    if (layers_per_scale.front() != 0) throw std::invalid_argument("the skip scale n_min carries no attention layers");
    for (std::size_t i = 1; i < layers_per_scale.size(); ++i) {
        if (layers_per_scale[i] < 1) throw std::invalid_argument("every attention scale needs at least one layer");
    }
}

namespace {
std::string stage_name(int n) { return "backbone.stage" + std::to_string(n); }
}  // namespace

void ToyBackbone::init_params(ParamStore& store, const ToyBackboneConfig& cfg, Rng& rng) {
    cfg.scales.validate();
    if (static_cast<int>(cfg.stage_channels.size()) != cfg.scales.num_scales()) {
        throw std::invalid_argument("stage_channels needs one entry per scale");
    }
    auto conv = [&](const std::string& name, int in, int out) {
        store.add(name + ".weight", he_normal({out, in, 3, 3}, in * 9, rng));
        store.add(name + ".bias", zeros({out}));
    };
    int in = cfg.in_channels;
    for (int n = 1; n < cfg.scales.n_min; ++n) {
        conv("backbone.stem" + std::to_string(n), in, cfg.stem_channels);
        in = cfg.stem_channels;
    }
    for (int n = cfg.scales.n_min; n <= cfg.scales.n_max; ++n) {
        const int idx = n - cfg.scales.n_min;
        const int out = cfg.stage_channels[static_cast<std::size_t>(idx)];
        const int convs = std::max(1, cfg.scales.layers_per_scale[static_cast<std::size_t>(idx)]);
        for (int k = 0; k < convs; ++k) {
            conv(stage_name(n) + ".conv" + std::to_string(k), k == 0 ? in : out, out);
        }
        in = out;
    }
}

ToyBackbone::ToyBackbone(const ParamStore& store, ToyBackboneConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.scales.validate();
    auto bind = [&](const std::string& name, int stride) {
        return Conv{store.get(name + ".weight"), store.get(name + ".bias"), stride};
    };
    for (int n = 1; n < cfg_.scales.n_min; ++n) stem_.push_back(bind("backbone.stem" + std::to_string(n), cfg_.scales.base));
    for (int n = cfg_.scales.n_min; n <= cfg_.scales.n_max; ++n) {
        const int convs = std::max(1, cfg_.scales.layers_per_scale[static_cast<std::size_t>(n - cfg_.scales.n_min)]);
        std::vector<Conv> stage;
        for (int k = 0; k < convs; ++k) {
            stage.push_back(bind(stage_name(n) + ".conv" + std::to_string(k), k == 0 ? cfg_.scales.base : 1));
        }
        stages_.push_back(std::move(stage));
    }
}

std::vector<int> ToyBackbone::layer_channels() const {
    std::vector<int> out;
    for (int n = cfg_.scales.n_min; n <= cfg_.scales.n_max; ++n) {
        const auto idx = static_cast<std::size_t>(n - cfg_.scales.n_min);
        for (int k = 0; k < cfg_.scales.layers_per_scale[idx]; ++k) out.push_back(cfg_.stage_channels[idx]);
    }
    return out;
}

MultiScaleFeatures ToyBackbone::extract(const Tensor& image) const {
    return std::move(extract_batch(std::span<const Tensor>(&image, 1)).front());
}

std::vector<MultiScaleFeatures> Backbone::extract_batch(std::span<const Tensor> images) const {
    std::vector<MultiScaleFeatures> out;
    for (const auto& img : images) out.push_back(extract(img));
    return out;
}

std::vector<MultiScaleFeatures> ToyBackbone::extract_batch(std::span<const Tensor> images) const {
    const int mult = cfg_.scales.required_multiple();
    for (const auto& image : images) {
        if (image.rank() != 3 || image.dim(0) != cfg_.in_channels) {
            throw std::invalid_argument("backbone expects a " + std::to_string(cfg_.in_channels) +
                                        " x H x W image, got " + shape_str(image.shape()));
        }
        if (image.dim(1) % mult != 0 || image.dim(2) % mult != 0) {
            throw std::invalid_argument("image size " + std::to_string(image.dim(1)) + "x" +
                                        std::to_string(image.dim(2)) + " must be a multiple of " + std::to_string(mult));
        }
    }
    flops::Scope scope(flops::Category::Backbone);
    std::vector<MultiScaleFeatures> out(images.size());
    std::vector<Var> x;
    for (std::size_t b = 0; b < images.size(); ++b) {
        out[b].input_height = images[b].dim(1);
        out[b].input_width = images[b].dim(2);
        x.push_back(Var::constant(images[b]));
    }
    auto step = [&x](const Conv& c) {
        for (auto& v : x) v = ops::relu(ops::conv2d(v, c.weight, c.bias, c.stride));
    };
    for (const auto& c : stem_) step(c);
    int layer = 0;
    for (int n = cfg_.scales.n_min; n <= cfg_.scales.n_max; ++n) {
        const auto idx = static_cast<std::size_t>(n - cfg_.scales.n_min);
        const bool emits = cfg_.scales.layers_per_scale[idx] > 0;
        for (const auto& c : stages_[idx]) {
            step(c);
            if (emits) {
                for (std::size_t b = 0; b < x.size(); ++b) out[b].layers.push_back(FeatureLayer{layer, n, x[b]});
                ++layer;
            }
        }
        if (n == cfg_.scales.n_min)
            for (std::size_t b = 0; b < x.size(); ++b) out[b].skip = x[b];
    }
    return out;
}

std::unique_ptr<Backbone> ToyBackbone::rebind(const ParamStore& store) const {
    return std::make_unique<ToyBackbone>(store, cfg_);
}

QueryFeatures extract_query(const Backbone& backbone, const Tensor& image) {
    return QueryFeatures{backbone.extract(image)};
}

Tensor positional_encoding(int height, int width, int channels) {
    Tensor pe({height * width, channels});
    const int half = channels / 2;
    auto encode = [](int pos, int i, int dim) {
        const int k = i / 2;
        const double freq = std::pow(10000.0, -2.0 * k / std::max(dim, 1));
        return (i % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
    };
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const int row = y * width + x;
            for (int c = 0; c < half; ++c) pe.at(row, c) = encode(y, c, half);
            for (int c = half; c < channels; ++c) pe.at(row, c) = encode(x, c - half, channels - half);
        }
    }
    return pe;
}

TokenSequence flatten_with_pe(const Var& map) {
    if (map.value().rank() != 3) throw std::invalid_argument("flatten_with_pe expects C x H x W, got " + shape_str(map.shape()));
    const int c = map.dim(0), h = map.dim(1), w = map.dim(2);
    Var tokens = ops::add_constant(ops::map_to_tokens(map), positional_encoding(h, w, c));
    return TokenSequence{tokens, h, w};
}

Tensor unflatten(const TokenSequence& seq) {
    const Tensor& t = seq.tokens.value();
    const int n = t.dim(0), c = t.dim(1);
    if (n != seq.height * seq.width) throw std::invalid_argument("token count does not match origin shape");
    Tensor out({c, seq.height, seq.width});
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) out[static_cast<std::size_t>(ch) * n + i] = t.at(i, ch);
    return out;
}

Tensor downsample_mask(const Tensor& mask, int height, int width) {
    Tensor small = ops::resize_nearest(mask, height, width);
    return small.reshaped({height * width, 1});
}

}  // namespace distillfss
