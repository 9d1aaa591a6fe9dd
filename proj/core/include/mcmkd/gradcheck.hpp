#pragma once

#include <functional>
#include <span>
#include <string>

#include "mcmkd/tensor.hpp"

namespace mcmkd {

struct GradCheckResult {
    double max_rel_err = 0.0;
    bool pass = false;
    std::string worst;  // "input 2 [8x4] coord 13" of the largest error
};

/// Compares tape gradients of f() against central finite differences over
/// every coordinate of every input. f must be a deterministic scalar-valued
/// function of the inputs (it is re-evaluated with perturbed values in place).
/// Relative error uses the denominator max(|analytic|, |numeric|, 1e-3).
GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> inputs,
                           double eps = 1e-5, double tol = 1e-4);

}  // namespace mcmkd
