#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "mcmkd/tensor.hpp"

namespace mcmkd::detail {

/// Records a node if a tape is active and any input is tracked. make_backward
/// receives the per-input "accumulate into this one" flags.
inline void maybe_record(
    const std::vector<Tensor>& inputs, Tensor& out,
    const std::function<std::function<void()>(const std::vector<bool>&)>& make_backward) {
    Tape* tape = Tape::active();
    if (tape == nullptr) {
        return;
    }
    std::vector<bool> tracked(inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        tracked[i] = tape->tracks(inputs[i]);
        any = any || tracked[i];
    }
    if (!any) {
        return;
    }
    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        impls.push_back(t.impl());
    }
    tape->record(std::move(impls), out.impl(), make_backward(tracked));
}

}  // namespace mcmkd::detail
