#include "distillfss/params.hpp"

#include <cmath>
#include <stdexcept>

namespace distillfss {

namespace {
struct BlockPrefix {
    Block block;
    std::string_view prefix;
    std::string_view name;
};

constexpr BlockPrefix kBlocks[] = {
    {Block::Backbone, "backbone.", "backbone"},
    {Block::AttentionWeights, "attention.", "attention_weights"},
    {Block::ConvMapper, "decoder.mapper.", "conv_mapper"},
    {Block::ConvMerge, "decoder.merge.", "conv_merge"},
    {Block::ConvSkip, "decoder.skip.", "conv_skip"},
    {Block::Mixer, "decoder.mixer.", "mixer"},
    {Block::Classifier, "decoder.classifier.", "classifier"},
    {Block::ConvDist, "convdist.", "convdist"},
};
}  // namespace

std::string_view block_name(Block b) {
    for (const auto& e : kBlocks)
        if (e.block == b) return e.name;
    return "unknown";
}

std::optional<Block> parse_block(std::string_view name) {
    for (const auto& e : kBlocks)
        if (e.name == name) return e.block;
    return std::nullopt;
}

Block block_of(std::string_view param_name) {
    for (const auto& e : kBlocks)
        if (param_name.substr(0, e.prefix.size()) == e.prefix) return e.block;
    throw std::invalid_argument("parameter '" + std::string(param_name) + "' belongs to no known block");
}

void round_to_float(Tensor& t) {
    for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

Var ParamStore::add(const std::string& name, Tensor init) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    block_of(name);
    round_to_float(init);
    Var v = Var::leaf(std::move(init), false);
    index_[name] = entries_.size();
    entries_.emplace_back(name, v);
    return v;
}

void ParamStore::share(const std::string& name, const Var& handle) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.emplace_back(name, handle);
}

const Var& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("missing parameter block '" + name + "'");
    return entries_[it->second].second;
}

std::size_t ParamStore::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : entries_) n += v.value().size();
    return n;
}

ParamStore ParamStore::deep_copy() const {
    ParamStore out;
    for (const auto& [name, v] : entries_) {
        Var copy = Var::leaf(v.value(), v.requires_grad());
        out.index_[name] = out.entries_.size();
        out.entries_.emplace_back(name, copy);
    }
    return out;
}

Snapshot ParamStore::snapshot() const {
    Snapshot s;
    for (const auto& [name, v] : entries_) s.emplace(name, v.value());
    return s;
}

void ParamStore::restore(const Snapshot& snap) {
    for (auto& [name, v] : entries_) {
        auto it = snap.find(name);
        if (it == snap.end()) throw std::out_of_range("snapshot lacks parameter '" + name + "'");
        if (!it->second.same_shape(v.value())) {
            throw std::invalid_argument("snapshot shape mismatch for '" + name + "'");
        }
        v.mutable_value() = it->second;
    }
}

void ParamStore::set_trainable(Block b, bool on) {
    for (auto& [name, v] : entries_)
        if (block_of(name) == b) v.set_requires_grad(on);
}

void ParamStore::freeze_all() {
    for (auto& [name, v] : entries_) v.set_requires_grad(false);
}

void ParamStore::zero_grad() {
    for (auto& [name, v] : entries_) v.zero_grad();
}

Tensor he_normal(Shape shape, int fan_in, Rng& rng, double gain) {
    Tensor t(std::move(shape));
    const double sd = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.values()) v = sd * rng.normal();
    return t;
}

Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }

void AdamW::step(ParamStore& store) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [name, handle] : store.entries()) {
        if (!handle.requires_grad() || !handle.has_grad()) continue;
        Var v = handle;
        auto& st = state_[name];
        if (st.m.empty()) {
            st.m = Tensor(v.shape());
            st.v = Tensor(v.shape());
        }
        Tensor& w = v.mutable_value();
        const Tensor& g = v.grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
            st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = st.m[i] / bc1;
            const double vhat = st.v[i] / bc2;
            w[i] -= cfg_.learning_rate * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
        }
        round_to_float(w);
    }
}

}  // namespace distillfss
