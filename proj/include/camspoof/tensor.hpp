#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace camspoof {

using Shape = std::vector<int>;

std::string shape_to_string(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

// Dense n-dimensional array of 32-bit floats in row-major order.
// Construction rejects non-positive extents, shape/data length mismatch
// and non-finite values; a populated Tensor is immutable by convention
// (ops build new ones through zeros() + fill + validate()).
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor scalar(float value);
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, float value) { return Tensor(std::move(shape), value); }

    const Shape& shape() const { return shape_; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    int rank() const { return static_cast<int>(shape_.size()); }
    int extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool is_scalar() const { return size() == 1; }
    float scalar_value() const;

    Tensor reshaped(Shape shape) const;

    // Throws if any element is NaN/Inf. Ops call this after filling a
    // freshly allocated output in place.
    void validate_finite(const char* context) const;

  private:
    Shape shape_;
    std::vector<float> data_;
};

bool approx_equal(const Tensor& a, const Tensor& b, float tol);

}  // namespace camspoof
