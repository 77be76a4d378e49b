#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace cdsr {

using Shape = std::vector<int>;

/// Every buffer starts on the same vector-width boundary, so Eigen picks the
/// same kernel path (and summation order) for equal data on every run.
using FloatStorage = std::vector<float, Eigen::aligned_allocator<float>>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_str(const Shape& shape);

/// Dense row-major float32 array. 4-D tensors use (batch, channels, height,
/// width) ordering.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> values);

    const Shape& shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }
    std::span<float> values() noexcept { return data_; }
    std::span<const float> values() const noexcept { return data_; }
    const FloatStorage& storage() const noexcept { return data_; }

    float& operator[](std::size_t i) noexcept { return data_[i]; }
    float operator[](std::size_t i) const noexcept { return data_[i]; }

    float& at(int n, int c, int h, int w) noexcept { return data_[offset4(n, c, h, w)]; }
    float at(int n, int c, int h, int w) const noexcept { return data_[offset4(n, c, h, w)]; }

    void fill(float v) noexcept;
    /// Same data viewed under a new shape with identical element count.
    Tensor reshaped(Shape shape) const;
    bool all_finite() const noexcept;

    /// Bitwise equality of shape and payload.
    friend bool operator==(const Tensor& a, const Tensor& b) noexcept;

private:
    std::size_t offset4(int n, int c, int h, int w) const noexcept {
        return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }

    Shape shape_;
    FloatStorage data_;
};

} // namespace cdsr
