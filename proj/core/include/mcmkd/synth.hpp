#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mcmkd/rng.hpp"

namespace mcmkd {

enum class PatchClass : std::uint8_t { kBackground = 0, kStromaA = 1, kStromaB = 2, kLesion = 3 };
inline constexpr std::size_t kNumPatchClasses = 4;

/// Pixels with luminance (0.299 R + 0.587 G + 0.114 B) below this count as tissue.
inline constexpr double kTissueLuminanceMax = 0.85;
inline constexpr double kTissueMinFraction = 0.6;
/// Background channels are clamped here so background luminance stays >= 0.92.
inline constexpr double kBackgroundMinChannel = 0.92;
/// Slide label is 1 iff some 4-connected lesion component has at least this many patches.
inline constexpr std::size_t kLesionClusterMin = 4;
/// Contrast of the dark dot texture that alone separates lesion from stroma-b.
inline constexpr double kLesionDotDeltaDefault = 0.16;

struct SlideConfig {
    std::size_t grid_h = 16;
    std::size_t grid_w = 16;
    std::size_t patch = 16;  // pixels per patch side
    std::size_t channels = 3;
    double class_balance = 0.5;  // probability a slide gets a lesion cluster
    double lesion_rate = 0.02;   // density scale for isolated single lesion patches
    double noise_sigma = 0.05;   // per-pixel rendering noise
    double lesion_dot_delta = kLesionDotDeltaDefault;
};

struct SyntheticSlide {
    std::size_t grid_h = 0, grid_w = 0, patch = 0, channels = 0;
    std::vector<PatchClass> grid;  // grid_h * grid_w, row-major
    std::vector<double> pixels;    // planar [c][grid_h*p][grid_w*p], values in [0,1]
    int label = 0;
    std::uint64_t seed = 0;

    std::size_t height() const { return grid_h * patch; }
    std::size_t width() const { return grid_w * patch; }
    PatchClass cell(std::size_t r, std::size_t c) const { return grid[r * grid_w + c]; }
};

struct ContextWindow {
    std::size_t s = 0, patch = 0, channels = 0;
    std::size_t origin_row = 0, origin_col = 0;  // grid coordinates of the top-left patch
    std::vector<double> patch_data;              // s*s patches, each c*p*p, row-major grid order
    double tissue_fraction = 0.0;

    std::size_t n_patches() const { return s * s; }
    std::size_t patch_dim() const { return channels * patch * patch; }
    std::span<const double> patch_at(std::size_t i) const {
        return std::span<const double>(patch_data).subspan(i * patch_dim(), patch_dim());
    }
};

/// 1 iff the grid holds a 4-connected lesion component of >= kLesionClusterMin patches.
int lesion_cluster_label(const std::vector<PatchClass>& grid, std::size_t h, std::size_t w);

/// Renders one patch as planar c*p*p values: class mean colour, dark dot
/// texture for lesion, N(0, sigma^2) per-pixel noise, clipped to [0,1];
/// background channels are clamped to kBackgroundMinChannel.
void render_patch(PatchClass cls, std::size_t p, std::size_t c, double sigma, Rng& rng,
                  std::span<double> out, double dot_delta = kLesionDotDeltaDefault);

SyntheticSlide generate_slide(const SlideConfig& cfg, std::uint64_t seed);

/// Non-overlapping (at the default stride = s) windows of s x s patches
/// covering the largest aligned region of the grid, row-major order.
std::vector<ContextWindow> extract_context_windows(const SyntheticSlide& slide, std::size_t s,
                                                   std::size_t stride = 0);

double recompute_tissue_fraction(const ContextWindow& window);

std::vector<ContextWindow> tissue_filter(std::vector<ContextWindow> windows,
                                         double min_fraction = kTissueMinFraction);

}  // namespace mcmkd
