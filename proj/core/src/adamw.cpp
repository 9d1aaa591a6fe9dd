#include "mcmkd/adamw.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mcmkd {

void adamw_step(std::vector<Tensor>& params, AdamWState& state) {
    std::size_t total = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].has_grad()) {
            throw std::invalid_argument("adamw_step: parameter " + std::to_string(i) + " " +
                                        shape_str(params[i].shape()) + " has no gradient");
        }
        total += params[i].numel();
    }
    if (state.m.empty()) {
        state.m.assign(total, 0.0);
        state.v.assign(total, 0.0);
    } else if (state.m.size() != total) {
        throw std::invalid_argument("adamw_step: state sized for " + std::to_string(state.m.size()) +
                                    " values, parameters hold " + std::to_string(total));
    }

    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

    std::size_t off = 0;
    for (Tensor& p : params) {
        double* theta = p.mutable_data().data();
        const auto g = p.grad();
        double* m = state.m.data() + off;
        double* v = state.v.data() + off;
        const std::size_t n = p.numel();
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            if (state.lr != 0.0) {
                const double m_hat = m[i] / bc1;
                const double v_hat = v[i] / bc2;
                theta[i] -= state.lr * state.weight_decay * theta[i];
                theta[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
            }
        }
        off += n;
    }
}

AdamW::AdamW(std::vector<Tensor> params, AdamWState state)
    : params_(std::move(params)), state_(std::move(state)) {}

void AdamW::zero_grad() {
    for (Tensor& p : params_) {
        p.zero_grad();
    }
}

}  // namespace mcmkd
