#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace mcmkd {

/// Deterministic 64-bit generator built on the SplitMix64 mixing function.
///
/// The i-th raw output is a pure function of (seed, i):
///   state = seed + (i+1) * 0x9E3779B97F4A7C15
///   out   = mix64(state)
/// with mix64 the xor-shift-multiply finalizer (constants 0xBF58476D1CE4E5B9,
/// 0x94D049BB133111EB, shifts 30/27/31). All constants are fixed here so any
/// implementation can reproduce the integer stream exactly.
class Rng {
public:
    static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

    explicit Rng(std::uint64_t seed) : state_(seed) {}

    static std::uint64_t mix64(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() {
        state_ += kGolden;
        return mix64(state_);
    }

    /// Uniform double in [0,1) with 53 random bits.
    double next_unit() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [0, bound) via rejection (no modulo bias).
    std::uint64_t next_below(std::uint64_t bound);

    /// Standard normal via the Marsaglia polar method (second value cached).
    double next_normal();

    void fill_normal(std::span<double> out, double stddev);

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Derives an independent stream seed from a root seed and an index path,
/// e.g. derive_seed(root, {kSlideTag, slide_index}). Per element x:
///   h = mix64(h + kGolden); h = mix64(h ^ x)
std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path);
std::uint64_t derive_seed(std::uint64_t root, std::span<const std::uint64_t> path);

/// Stream tags used when deriving per-purpose seeds from a run's root seed.
namespace seed_tag {
inline constexpr std::uint64_t kSlide = 1;
inline constexpr std::uint64_t kPretrain = 2;
inline constexpr std::uint64_t kFinetune = 3;
inline constexpr std::uint64_t kMil = 4;
inline constexpr std::uint64_t kInit = 5;
inline constexpr std::uint64_t kSplit = 6;
inline constexpr std::uint64_t kMask = 7;
}  // namespace seed_tag

/// Seeded Fisher-Yates shuffle.
template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
        std::swap(items[i - 1], items[j]);
    }
}

/// k distinct indices drawn uniformly from [0, n), returned sorted ascending.
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Rng& rng);

}  // namespace mcmkd
