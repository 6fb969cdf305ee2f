#include "camspoof/adam.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace camspoof {

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state) {
    if (params.size() != grads.size()) {
        throw std::invalid_argument("adam_step got " + std::to_string(params.size()) +
                                    " params but " + std::to_string(grads.size()) + " grads");
    }
    if (state.first_moment.empty()) {
        state.first_moment.reserve(params.size());
        state.second_moment.reserve(params.size());
        for (const Tensor& p : params) {
            state.first_moment.emplace_back(p.shape());
            state.second_moment.emplace_back(p.shape());
        }
    }
    if (state.first_moment.size() != params.size()) {
        throw std::invalid_argument("adam_step state tracks " +
                                    std::to_string(state.first_moment.size()) +
                                    " params, got " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].same_shape(grads[i]) || !params[i].same_shape(state.first_moment[i])) {
            throw std::invalid_argument("adam_step shape mismatch at param " + std::to_string(i) +
                                        ": param " + shape_to_string(params[i].shape()) +
                                        " vs grad " + shape_to_string(grads[i].shape()));
        }
    }

    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double bias1 = 1.0 - std::pow(state.beta1, t);
    const double bias2 = 1.0 - std::pow(state.beta2, t);

    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        const Tensor& g = grads[i];
        Tensor& m = state.first_moment[i];
        Tensor& v = state.second_moment[i];
        for (std::int64_t j = 0; j < p.size(); ++j) {
            const double gj = g[j];
            const double mj = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            const double vj = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            m[j] = static_cast<float>(mj);
            v[j] = static_cast<float>(vj);
            const double mhat = mj / bias1;
            const double vhat = vj / bias2;
            p[j] = static_cast<float>(p[j] - state.lr * mhat / (std::sqrt(vhat) + state.eps));
        }
        p.validate_finite("adam_step parameter update");
    }
}

}  // namespace camspoof
