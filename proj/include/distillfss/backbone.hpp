#pragma once

#include <memory>
#include <span>
#include <vector>

#include "distillfss/autograd.hpp"
#include "distillfss/params.hpp"

namespace distillfss {

// Feature scales 1/base^n for n in [n_min, n_max]. Scale n_min is reserved
// for the decoder's skip connection and carries no attention layers.
struct ScaleSpec {
    int base = 2;
    int n_min = 2;
    int n_max = 5;
    // Attention layers per scale, indexed by n - n_min.
    std::vector<int> layers_per_scale = {0, 2, 2, 2};

    int num_scales() const { return n_max - n_min + 1; }
    int factor(int n) const;
    int total_layers() const;
    // Required divisor of input height and width.
    int required_multiple() const { return factor(n_max); }
    void validate() const;
};

struct FeatureLayer {
    int layer = 0;  // position in the fixed layer order
    int n = 0;      // scale exponent: the map is (H / base^n) x (W / base^n)
    Var map;        // C_n x H_n x W_n
};

struct MultiScaleFeatures {
    std::vector<FeatureLayer> layers;
    Var skip;  // high-resolution map at scale n_min
    int input_height = 0;
    int input_width = 0;
};

// Skip features that can only originate from a query image.
class QuerySkip {
public:
    const Var& features() const { return features_; }

private:
    friend struct QueryFeatures;
    explicit QuerySkip(Var f) : features_(std::move(f)) {}
    Var features_;
};

struct QueryFeatures {
    MultiScaleFeatures features;
    QuerySkip skip() const { return QuerySkip(features.skip); }
};

// Pluggable multi-scale feature extractor shared by the query and support
// paths.
class Backbone {
public:
    virtual ~Backbone() = default;
    virtual const ScaleSpec& scales() const = 0;
    // Channel count C_n of each attention layer, in layer order.
    virtual std::vector<int> layer_channels() const = 0;
    virtual int skip_channels() const = 0;
    virtual MultiScaleFeatures extract(const Tensor& image) const = 0;
    // Batched extraction; results match extract() image by image. The default
    // runs the images one after another.
    virtual std::vector<MultiScaleFeatures> extract_batch(std::span<const Tensor> images) const;
    // Same architecture reading its weights from another store.
    virtual std::unique_ptr<Backbone> rebind(const ParamStore& store) const = 0;
};

struct ToyBackboneConfig {
    ScaleSpec scales;
    int in_channels = 3;
    int stem_channels = 16;
    // Output channels of the stage at each scale, indexed by n - n_min.
    std::vector<int> stage_channels = {16, 32, 48, 64};
};

// Stride-2 conv stem down to 1/base^(n_min-1), then one stage per scale:
// a stride-2 conv followed by stride-1 convs, every conv followed by ReLU.
// Each conv of a scale with attention layers emits one feature layer.
class ToyBackbone final : public Backbone {
public:
    ToyBackbone(const ParamStore& store, ToyBackboneConfig cfg);

    static void init_params(ParamStore& store, const ToyBackboneConfig& cfg, Rng& rng);

    const ScaleSpec& scales() const override { return cfg_.scales; }
    std::vector<int> layer_channels() const override;
    int skip_channels() const override { return cfg_.stage_channels.front(); }
    MultiScaleFeatures extract(const Tensor& image) const override;
    // Steps every image through each conv before moving to the next, so the
    // whole batch's activations are live at once.
    std::vector<MultiScaleFeatures> extract_batch(std::span<const Tensor> images) const override;
    std::unique_ptr<Backbone> rebind(const ParamStore& store) const override;

    const ToyBackboneConfig& config() const { return cfg_; }

private:
    struct Conv {
        Var weight, bias;
        int stride;
    };
    ToyBackboneConfig cfg_;
    std::vector<Conv> stem_;
    std::vector<std::vector<Conv>> stages_;
};

QueryFeatures extract_query(const Backbone& backbone, const Tensor& image);

// Flattened N x C token matrix remembering its spatial origin.
struct TokenSequence {
    Var tokens;
    int height = 0;
    int width = 0;
};

// Fixed 2-D sinusoidal encoding as an (H*W) x C matrix: the first C/2
// channels encode the row, the rest the column.
Tensor positional_encoding(int height, int width, int channels);

// Row-major flatten of a C x H x W map plus the positional encoding.
TokenSequence flatten_with_pe(const Var& map);
// Inverse layout of flatten_with_pe (the encoding stays added).
Tensor unflatten(const TokenSequence& seq);

// Nearest-neighbour downsample of a 1 x H x W mask to height x width,
// flattened row-major into a (height*width) x 1 column.
Tensor downsample_mask(const Tensor& mask, int height, int width);

}  // namespace distillfss
