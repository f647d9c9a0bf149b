#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace distillfss {

// Live/peak byte accounting for tensor storage. Benchmarks read the peak to
// report forward-pass memory; the numbers are exact and reproducible.
namespace memory {
std::size_t current_bytes();
std::size_t peak_bytes();
// Sets the peak watermark to the current live byte count.
void reset_peak();
void on_allocate(std::size_t bytes);
void on_release(std::size_t bytes);
}  // namespace memory

template <class T>
struct TrackingAllocator {
    using value_type = T;

    TrackingAllocator() noexcept = default;
    template <class U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        memory::on_allocate(n * sizeof(T));
        return std::allocator<T>{}.allocate(n);
    }
    void deallocate(T* p, std::size_t n) noexcept {
        memory::on_release(n * sizeof(T));
        std::allocator<T>{}.deallocate(p, n);
    }

    template <class U>
    bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, TrackingAllocator<double>>;
using Shape = std::vector<int>;

std::string shape_str(const Shape& shape);

// Dense row-major tensor of doubles. Feature maps are C x H x W, token
// sequences are N x C, masks and maps are 1 x H x W.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::span<const double> values);

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return {data_.data(), data_.size()}; }
    std::span<const double> values() const { return {data_.data(), data_.size()}; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Rank-3 accessors (C x H x W).
    double& at(int c, int y, int x) { return data_[index3(c, y, x)]; }
    double at(int c, int y, int x) const { return data_[index3(c, y, x)]; }
    // Rank-2 accessors (rows x cols).
    double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }
    double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }

    Tensor reshaped(Shape shape) const;
    void fill(double v);

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

private:
    std::size_t index3(int c, int y, int x) const {
        return (static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x;
    }

    Shape shape_;
    Buffer data_;
};

std::size_t shape_numel(const Shape& shape);

double max_abs_diff(const Tensor& a, const Tensor& b);
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace distillfss
