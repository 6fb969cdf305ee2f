#pragma once

#include <vector>

#include "camspoof/tensor.hpp"

namespace camspoof {

// Bias-corrected Adam. Moments are created lazily on the first step and
// must shape-match their parameters afterwards; step_count advances by
// exactly one per adam_step call.
struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long long step_count = 0;
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
};

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state);

}  // namespace camspoof
