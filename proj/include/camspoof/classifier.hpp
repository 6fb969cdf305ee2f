#pragma once

#include "camspoof/tensor.hpp"

namespace camspoof {

// Gradient-capable classifier surface the attack generators run against.
// Implementations must treat calls as read-only and thread-safe.
class Classifier {
  public:
    virtual ~Classifier() = default;

    virtual int num_classes() const = 0;

    // Class probability vector [K] for a single example of any shape.
    virtual Tensor probs(const Tensor& x) const = 0;

    // Gradient of the classification loss w.r.t. x for the given label;
    // same shape as x.
    virtual Tensor loss_input_gradient(const Tensor& x, int label) const = 0;

    // Forward derivative: row j is d(probs_j)/dx flattened, shape [K, numel(x)].
    virtual Tensor jacobian(const Tensor& x) const = 0;
};

}  // namespace camspoof
