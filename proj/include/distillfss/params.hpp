#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "distillfss/autograd.hpp"
#include "distillfss/rng.hpp"

namespace distillfss {

// Architectural blocks that can be frozen or unfrozen as a unit. Parameter
// names encode their block through a fixed prefix (see block_of).
enum class Block {
    Backbone,
    AttentionWeights,
    ConvMapper,
    ConvMerge,
    ConvSkip,
    Mixer,
    Classifier,
    ConvDist,
};

std::string_view block_name(Block b);
std::optional<Block> parse_block(std::string_view name);
Block block_of(std::string_view param_name);

// Parameters are held at float32 precision: every stored value is exactly
// representable as a float, so checkpoints (32-bit on disk) round-trip
// bit-exactly while arithmetic runs in double.
void round_to_float(Tensor& t);

using Snapshot = std::map<std::string, Tensor>;

// Ordered collection of named parameter leaves.
class ParamStore {
public:
    Var add(const std::string& name, Tensor init);
    // Registers an existing handle; both stores then see the same values.
    void share(const std::string& name, const Var& handle);

    const Var& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
    std::size_t parameter_count() const;

    ParamStore deep_copy() const;
    Snapshot snapshot() const;
    void restore(const Snapshot& snap);

    void set_trainable(Block b, bool on);
    void freeze_all();
    void zero_grad();

private:
    std::vector<std::pair<std::string, Var>> entries_;
    std::map<std::string, std::size_t> index_;
};

// Initializers. All draws go through Rng so weights are platform-stable.
Tensor he_normal(Shape shape, int fan_in, Rng& rng, double gain = 1.0);
Tensor zeros(Shape shape);

struct AdamWConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

// Decoupled weight-decay Adam. Only parameters that require grad and hold a
// gradient are touched.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}
    void step(ParamStore& store);
    std::int64_t steps() const { return t_; }

private:
    struct Moments {
        Tensor m, v;
    };
    AdamWConfig cfg_;
    std::int64_t t_ = 0;
    std::map<std::string, Moments> state_;
};

}  // namespace distillfss
