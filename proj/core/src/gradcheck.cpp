#include "mcmkd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace mcmkd {

GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> inputs,
                           double eps, double tol) {
    // Analytic gradients from one taped evaluation.
    std::vector<std::vector<double>> analytic;
    {
        for (Tensor& t : inputs) {
            t.zero_grad();
        }
        Tape tape;
        Tensor loss = f();
        tape.backward_from(loss);
        for (Tensor& t : inputs) {
            if (t.has_grad()) {
                const auto g = t.grad();
                analytic.emplace_back(g.begin(), g.end());
            } else {
                analytic.emplace_back(t.numel(), 0.0);
            }
        }
    }

    GradCheckResult result;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        auto values = inputs[ti].mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double up = f().value();
            values[i] = saved - eps;
            const double down = f().value();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[ti][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-3});
            const double rel = std::fabs(a - numeric) / denom;
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst = "input " + std::to_string(ti) + " " + shape_str(inputs[ti].shape()) +
                               " coord " + std::to_string(i);
            }
        }
    }
    result.pass = result.max_rel_err <= tol;
    return result;
}

}  // namespace mcmkd
