#include "mcmkd/heatmap.hpp"

#include <cmath>
#include <stdexcept>

namespace mcmkd {

CosineGrid cosine_similarity_grid(const Tensor& features, std::size_t ref_index) {
    if (features.ndim() != 2) {
        throw std::invalid_argument("cosine grid: expected [N x d] features, got " +
                                    shape_str(features.shape()));
    }
    const std::size_t n = features.dim(0), d = features.dim(1);
    if (ref_index >= n) {
        throw std::invalid_argument("cosine grid: reference row " + std::to_string(ref_index) +
                                    " out of range for " + std::to_string(n) + " rows");
    }
    const double* data = features.data().data();
    const double* ref = data + ref_index * d;
    double ref_norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        ref_norm += ref[j] * ref[j];
    }
    ref_norm = std::sqrt(ref_norm);

    CosineGrid grid;
    grid.values.resize(n, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = data + r * d;
        double dot = 0.0, norm = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dot += ref[j] * row[j];
            norm += row[j] * row[j];
        }
        norm = std::sqrt(norm);
        if (ref_norm == 0.0 || norm == 0.0) {
            ++grid.n_degenerate;
            continue;
        }
        if (r == ref_index) {
            grid.values[r] = 1.0;  // exact by definition, not subject to sqrt rounding
            continue;
        }
        const double v = dot / (ref_norm * norm);
        grid.values[r] = v < -1.0 ? -1.0 : (v > 1.0 ? 1.0 : v);
    }
    return grid;
}

}  // namespace mcmkd
