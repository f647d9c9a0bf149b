#include "distillfss/flops.hpp"

namespace distillfss::flops {
namespace {
constexpr auto kN = static_cast<std::size_t>(Category::kCount);
thread_local std::array<std::uint64_t, kN> t_counts{};
thread_local Category t_current = Category::Other;
}  // namespace

std::string_view category_name(Category c) {
    switch (c) {
        case Category::Backbone: return "backbone";
        case Category::Attention: return "attention";
        case Category::Decoder: return "decoder";
        case Category::ConvDist: return "convdist";
        default: return "other";
    }
}

void add(Category c, std::uint64_t n) { t_counts[static_cast<std::size_t>(c)] += n; }
std::uint64_t count(Category c) { return t_counts[static_cast<std::size_t>(c)]; }

std::uint64_t total() {
    std::uint64_t s = 0;
    for (auto v : t_counts) s += v;
    return s;
}

void reset() { t_counts.fill(0); }

Scope::Scope(Category c) : previous_(t_current) { t_current = c; }
Scope::~Scope() { t_current = previous_; }

Category current() { return t_current; }

}  // namespace distillfss::flops
