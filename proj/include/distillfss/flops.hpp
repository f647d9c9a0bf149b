#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace distillfss::flops {

// Which part of the network an operation belongs to. Counts are per thread.
enum class Category : int { Backbone = 0, Attention, Decoder, ConvDist, Other, kCount };

std::string_view category_name(Category c);

void add(Category c, std::uint64_t n);
std::uint64_t count(Category c);
std::uint64_t total();
void reset();

// Attributes every counted op inside its lifetime to one category.
class Scope {
public:
    explicit Scope(Category c);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

private:
    Category previous_;
};

Category current();

}  // namespace distillfss::flops
