#pragma once

#include <cstddef>
#include <vector>

#include "mcmkd/tensor.hpp"

namespace mcmkd {

struct CosineGrid {
    std::vector<double> values;    // one per feature row, in [-1, 1]
    std::size_t n_degenerate = 0;  // rows whose similarity was forced to 0 by a zero norm
};

/// Cosine similarity of every row of features [N x d] against the row at
/// ref_index. Pairs involving a zero-norm vector get similarity 0.
CosineGrid cosine_similarity_grid(const Tensor& features, std::size_t ref_index);

}  // namespace mcmkd
