#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mcmkd/blocks.hpp"
#include "mcmkd/synth.hpp"

namespace mcmkd {

/// One context window's vectors: s*s rows of dim values, row-major grid order.
struct FeatureSequence {
    std::uint32_t origin_row = 0;
    std::uint32_t origin_col = 0;
    std::vector<float> values;  // s*s * dim
};

/// "MCFA" container: header {magic, version u16=1, n_sequences u32, s u16,
/// dim u16}, then per sequence origin (u32, u32) and s*s*dim little-endian
/// f32 values. File length is exact.
struct FeatureArchive {
    std::uint16_t s = 0;
    std::uint16_t dim = 0;
    std::vector<FeatureSequence> sequences;
};

inline constexpr std::uint16_t kFeatureArchiveVersion = 1;
inline constexpr std::uint16_t kCheckpointVersion = 1;

void write_feature_archive(const std::string& path, const FeatureArchive& archive);
FeatureArchive read_feature_archive(const std::string& path);

/// "MCKP" container: version u16, count u32, then per parameter name
/// (u16 length + bytes), ndim u16, dims u32 each, and f64 little-endian data.
void write_checkpoint(const std::string& path, const NamedParams& params);
NamedParams read_checkpoint(const std::string& path);

/// Copies checkpoint values into live tensors by name. Every live parameter
/// must be present with a matching shape; extra stored names are an error.
void load_checkpoint_into(const std::string& path, const NamedParams& live);

/// P6 image, 8 bits per channel, for visual inspection. Requires 3 channels.
void write_ppm(const std::string& path, const SyntheticSlide& slide);

/// P5 image of values in [-1, 1] mapped linearly to [0, 255].
void write_pgm(const std::string& path, std::size_t rows, std::size_t cols,
               std::span<const double> values);

/// Shortest round-trippable decimal form used by every CSV artifact.
std::string format_g17(double v);

}  // namespace mcmkd
