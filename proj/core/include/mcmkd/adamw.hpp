#pragma once

#include <cstddef>
#include <vector>

#include "mcmkd/tensor.hpp"

namespace mcmkd {

/// Moment buffers and hyperparameters for decoupled-weight-decay Adam.
/// m and v are laid out as the concatenation of all parameters in step order.
struct AdamWState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    std::size_t step = 0;
    std::vector<double> m;
    std::vector<double> v;
};

/// One optimizer step over params, in order. Weight decay is decoupled:
/// theta -= lr * wd * theta, independent of the Adam update term. Gradients
/// are read but never modified; the caller zeroes them.
void adamw_step(std::vector<Tensor>& params, AdamWState& state);

/// Convenience wrapper owning the parameter list and state.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWState state = {});

    void step() { adamw_step(params_, state_); }
    void zero_grad();

    const AdamWState& state() const { return state_; }
    AdamWState& state() { return state_; }
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    AdamWState state_;
};

}  // namespace mcmkd
