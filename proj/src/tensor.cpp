#include "camspoof/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace camspoof {

std::string shape_to_string(const Shape& shape) {
    std::ostringstream out;
    out << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ",";
        out << shape[i];
    }
    out << "]";
    return out.str();
}

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int e : shape) {
        if (e <= 0) {
            throw std::invalid_argument("tensor extent must be positive, got shape " +
                                        shape_to_string(shape));
        }
        n *= e;
    }
    return n;
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {
    if (!std::isfinite(fill)) {
        throw std::invalid_argument("tensor fill value is not finite");
    }
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
        throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_to_string(shape_));
    }
    validate_finite("tensor construction");
}

Tensor Tensor::scalar(float value) { return Tensor(Shape{1}, std::vector<float>{value}); }

float Tensor::scalar_value() const {
    if (!is_scalar()) {
        throw std::invalid_argument("tensor of shape " + shape_to_string(shape_) +
                                    " is not a scalar");
    }
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
        throw std::invalid_argument("cannot reshape " + shape_to_string(shape_) + " to " +
                                    shape_to_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::validate_finite(const char* context) const {
    for (float v : data_) {
        if (!std::isfinite(v)) {
            throw std::invalid_argument(std::string("non-finite value in ") + context);
        }
    }
}

bool approx_equal(const Tensor& a, const Tensor& b, float tol) {
    if (!a.same_shape(b)) return false;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        if (std::fabs(a[i] - b[i]) > tol) return false;
    }
    return true;
}

}  // namespace camspoof
