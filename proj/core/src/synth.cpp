#include "mcmkd/synth.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <stdexcept>

#include "mcmkd/errors.hpp"

namespace mcmkd {

namespace {

// Sub-stream tags under a slide seed.
constexpr std::uint64_t kGridStream = 1;
constexpr std::uint64_t kRenderStream = 2;

// Mean colours per class (RGB). Lesion shares stromaB's mean exactly: the
// dot texture is the only cue separating the pair, and its contrast is chosen
// so detection is easy under the evaluation noise but marginal under the
// student-pretraining noise. Patch means alone cannot separate them because
// averaging over p*p pixels suppresses i.i.d. noise.
constexpr double kClassColor[kNumPatchClasses][3] = {
    {0.96, 0.95, 0.97},  // background, near-white
    {0.85, 0.60, 0.70},  // stromaA
    {0.70, 0.50, 0.75},  // stromaB
    {0.70, 0.50, 0.75},  // lesion, stromaB's colour plus dots
};

constexpr double kLesionDotRadiusSq = 2.25;

constexpr double kLuminanceWeights[3] = {0.299, 0.587, 0.114};

double luminance(std::span<const double> channel_values) {
    if (channel_values.size() == 3) {
        return kLuminanceWeights[0] * channel_values[0] + kLuminanceWeights[1] * channel_values[1] +
               kLuminanceWeights[2] * channel_values[2];
    }
    double acc = 0.0;
    for (const double v : channel_values) {
        acc += v;
    }
    return acc / static_cast<double>(channel_values.size());
}

}  // namespace

int lesion_cluster_label(const std::vector<PatchClass>& grid, std::size_t h, std::size_t w) {
    if (grid.size() != h * w) {
        throw std::invalid_argument("lesion_cluster_label: grid size mismatch");
    }
    std::vector<bool> seen(grid.size(), false);
    for (std::size_t start = 0; start < grid.size(); ++start) {
        if (grid[start] != PatchClass::kLesion || seen[start]) {
            continue;
        }
        std::size_t component = 0;
        std::queue<std::size_t> frontier;
        frontier.push(start);
        seen[start] = true;
        while (!frontier.empty()) {
            const std::size_t cell = frontier.front();
            frontier.pop();
            ++component;
            const std::size_t r = cell / w, c = cell % w;
            const std::size_t neighbors[4][2] = {
                {r, c + 1}, {r, c - 1}, {r + 1, c}, {r - 1, c}};
            for (const auto& n : neighbors) {
                // unsigned wrap makes out-of-bounds huge, so one comparison suffices
                if (n[0] >= h || n[1] >= w) {
                    continue;
                }
                const std::size_t idx = n[0] * w + n[1];
                if (!seen[idx] && grid[idx] == PatchClass::kLesion) {
                    seen[idx] = true;
                    frontier.push(idx);
                }
            }
        }
        if (component >= kLesionClusterMin) {
            return 1;
        }
    }
    return 0;
}

// Dot pixels darken by dot_delta; the remaining pixels are lifted so the
// patch mean per channel is unchanged before noise.
void render_patch(PatchClass cls, std::size_t p, std::size_t c, double sigma, Rng& rng,
                  std::span<double> out, double dot_delta) {
    if (out.size() != c * p * p) {
        throw std::invalid_argument("render_patch: output span size mismatch");
    }
    std::vector<bool> dark(p * p, false);
    if (cls == PatchClass::kLesion && p >= 3) {
        const std::size_t n_dots = 5 + rng.next_below(3);
        for (std::size_t d = 0; d < n_dots; ++d) {
            const double cy = 1.0 + static_cast<double>(rng.next_below(p - 2));
            const double cx = 1.0 + static_cast<double>(rng.next_below(p - 2));
            for (std::size_t y = 0; y < p; ++y) {
                for (std::size_t x = 0; x < p; ++x) {
                    const double dy = static_cast<double>(y) - cy;
                    const double dx = static_cast<double>(x) - cx;
                    if (dy * dy + dx * dx <= kLesionDotRadiusSq) {
                        dark[y * p + x] = true;
                    }
                }
            }
        }
    }
    std::size_t n_dark = 0;
    for (std::size_t i = 0; i < p * p; ++i) {
        n_dark += dark[i] ? 1 : 0;
    }
    const double lift = n_dark == 0 || n_dark == p * p
                            ? 0.0
                            : dot_delta * static_cast<double>(n_dark) /
                                  static_cast<double>(p * p - n_dark);
    const auto* color = kClassColor[static_cast<std::size_t>(cls)];
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double mean = color[std::min<std::size_t>(ch, 2)];
        for (std::size_t i = 0; i < p * p; ++i) {
            double v = mean + (dark[i] ? -dot_delta : lift);
            v += sigma * rng.next_normal();
            v = std::clamp(v, 0.0, 1.0);
            if (cls == PatchClass::kBackground) {
                v = std::max(v, kBackgroundMinChannel);
            }
            out[ch * p * p + i] = v;
        }
    }
}

namespace {

void validate_config(const SlideConfig& cfg) {
    if (cfg.grid_h == 0 || cfg.grid_w == 0 || cfg.patch == 0 || cfg.channels == 0) {
        throw ConfigError("generate_slide: zero-area slide configuration");
    }
    if (cfg.class_balance < 0.0 || cfg.class_balance > 1.0) {
        throw ConfigError("generate_slide: class_balance outside [0,1]");
    }
    if (cfg.lesion_rate < 0.0 || cfg.lesion_rate > 1.0) {
        throw ConfigError("generate_slide: lesion_rate outside [0,1]");
    }
    if (!(cfg.noise_sigma >= 0.0)) {
        throw ConfigError("generate_slide: noise_sigma must be non-negative");
    }
}

/// True if no lesion lies within Chebyshev distance 1 of (r, c); placing a
/// single lesion there cannot 4-connect to any existing one.
bool isolated_spot(const std::vector<PatchClass>& grid, std::size_t h, std::size_t w, std::size_t r,
                   std::size_t c) {
    for (std::size_t nr = (r == 0 ? 0 : r - 1); nr <= std::min(r + 1, h - 1); ++nr) {
        for (std::size_t nc = (c == 0 ? 0 : c - 1); nc <= std::min(c + 1, w - 1); ++nc) {
            if (grid[nr * w + nc] == PatchClass::kLesion) {
                return false;
            }
        }
    }
    return true;
}

std::vector<PatchClass> sample_grid(const SlideConfig& cfg, Rng& rng) {
    const std::size_t h = cfg.grid_h, w = cfg.grid_w;
    std::vector<PatchClass> grid(h * w, PatchClass::kBackground);

    // Stroma blobs: nearest covering disc wins, so neighbouring cells correlate.
    struct Blob {
        double cy, cx, radius;
        PatchClass cls;
    };
    std::vector<Blob> blobs(6 + rng.next_below(4));
    for (Blob& b : blobs) {
        b.cy = rng.next_unit() * static_cast<double>(h);
        b.cx = rng.next_unit() * static_cast<double>(w);
        b.radius = 2.0 + 3.0 * rng.next_unit();
        b.cls = rng.next_unit() < 0.5 ? PatchClass::kStromaA : PatchClass::kStromaB;
    }
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            double best = 0.0;
            const Blob* owner = nullptr;
            for (const Blob& b : blobs) {
                const double dy = static_cast<double>(r) + 0.5 - b.cy;
                const double dx = static_cast<double>(c) + 0.5 - b.cx;
                const double dist = std::sqrt(dy * dy + dx * dx);
                if (dist <= b.radius && (owner == nullptr || dist < best)) {
                    owner = &b;
                    best = dist;
                }
            }
            if (owner != nullptr) {
                grid[r * w + c] = owner->cls;
            }
        }
    }

    // Lesions only replace stroma cells: their windows then sit in dense
    // tissue and survive the tissue filter, so bags keep the label-carrying
    // instances.
    const auto is_stroma = [&grid](std::size_t idx) {
        return grid[idx] == PatchClass::kStromaA || grid[idx] == PatchClass::kStromaB;
    };
    std::vector<std::size_t> stroma;
    for (std::size_t i = 0; i < h * w; ++i) {
        if (is_stroma(i)) {
            stroma.push_back(i);
        }
    }

    // Lesion cluster (label-positive pattern): a 4-connected random walk.
    if (cfg.lesion_rate > 0.0 && !stroma.empty() && rng.next_unit() < cfg.class_balance) {
        const std::size_t target = kLesionClusterMin + rng.next_below(3);
        std::vector<std::size_t> cells;
        cells.push_back(stroma[rng.next_below(stroma.size())]);
        std::size_t attempts = 0;
        while (cells.size() < target && attempts < 500) {
            ++attempts;
            const std::size_t base = cells[rng.next_below(cells.size())];
            const std::size_t r = base / w, c = base % w;
            std::size_t nr = r, nc = c;
            switch (rng.next_below(4)) {
                case 0: nr = r + 1; break;
                case 1: nr = r - 1; break;
                case 2: nc = c + 1; break;
                default: nc = c - 1; break;
            }
            if (nr >= h || nc >= w) {
                continue;
            }
            const std::size_t idx = nr * w + nc;
            if (!is_stroma(idx)) {
                continue;
            }
            if (std::find(cells.begin(), cells.end(), idx) == cells.end()) {
                cells.push_back(idx);
            }
        }
        for (const std::size_t idx : cells) {
            grid[idx] = PatchClass::kLesion;
        }
    }

    // Isolated single lesions occur in both classes; spacing keeps every one
    // a singleton component.
    const double area = static_cast<double>(h * w);
    const std::size_t max_singles =
        static_cast<std::size_t>(std::floor(2.0 * cfg.lesion_rate * area + 0.5));
    const std::size_t n_singles =
        max_singles == 0 || stroma.empty() ? 0 : rng.next_below(max_singles + 1);
    for (std::size_t i = 0; i < n_singles; ++i) {
        for (std::size_t attempt = 0; attempt < 50; ++attempt) {
            const std::size_t idx = stroma[rng.next_below(stroma.size())];
            if (is_stroma(idx) && isolated_spot(grid, h, w, idx / w, idx % w)) {
                grid[idx] = PatchClass::kLesion;
                break;
            }
        }
    }
    return grid;
}

}  // namespace

SyntheticSlide generate_slide(const SlideConfig& cfg, std::uint64_t seed) {
    validate_config(cfg);
    SyntheticSlide slide;
    slide.grid_h = cfg.grid_h;
    slide.grid_w = cfg.grid_w;
    slide.patch = cfg.patch;
    slide.channels = cfg.channels;
    slide.seed = seed;

    Rng grid_rng(derive_seed(seed, {kGridStream}));
    slide.grid = sample_grid(cfg, grid_rng);
    slide.label = lesion_cluster_label(slide.grid, cfg.grid_h, cfg.grid_w);

    const std::size_t p = cfg.patch, c = cfg.channels;
    const std::size_t hpx = slide.height(), wpx = slide.width();
    slide.pixels.assign(c * hpx * wpx, 0.0);
    std::vector<double> buf(c * p * p);
    for (std::size_t r = 0; r < cfg.grid_h; ++r) {
        for (std::size_t col = 0; col < cfg.grid_w; ++col) {
            Rng patch_rng(derive_seed(seed, {kRenderStream, r, col}));
            render_patch(slide.cell(r, col), p, c, cfg.noise_sigma, patch_rng, buf,
                         cfg.lesion_dot_delta);
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t py = 0; py < p; ++py) {
                    const double* src = buf.data() + (ch * p + py) * p;
                    double* dst = slide.pixels.data() + (ch * hpx + r * p + py) * wpx + col * p;
                    std::copy(src, src + p, dst);
                }
            }
        }
    }
    return slide;
}

std::vector<ContextWindow> extract_context_windows(const SyntheticSlide& slide, std::size_t s,
                                                   std::size_t stride) {
    if (s == 0) {
        throw std::invalid_argument("extract_context_windows: window side must be positive");
    }
    if (stride == 0) {
        stride = s;
    }
    std::vector<ContextWindow> windows;
    if (slide.grid_h < s || slide.grid_w < s) {
        return windows;
    }
    const std::size_t p = slide.patch, c = slide.channels;
    const std::size_t hpx = slide.height(), wpx = slide.width();
    for (std::size_t r0 = 0; r0 + s <= slide.grid_h; r0 += stride) {
        for (std::size_t c0 = 0; c0 + s <= slide.grid_w; c0 += stride) {
            ContextWindow win;
            win.s = s;
            win.patch = p;
            win.channels = c;
            win.origin_row = r0;
            win.origin_col = c0;
            win.patch_data.resize(s * s * c * p * p);
            for (std::size_t wi = 0; wi < s * s; ++wi) {
                const std::size_t pr = r0 + wi / s;
                const std::size_t pc = c0 + wi % s;
                double* dst = win.patch_data.data() + wi * c * p * p;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t py = 0; py < p; ++py) {
                        const double* src =
                            slide.pixels.data() + (ch * hpx + pr * p + py) * wpx + pc * p;
                        std::copy(src, src + p, dst + (ch * p + py) * p);
                    }
                }
            }
            win.tissue_fraction = recompute_tissue_fraction(win);
            windows.push_back(std::move(win));
        }
    }
    return windows;
}

double recompute_tissue_fraction(const ContextWindow& window) {
    const std::size_t p = window.patch, c = window.channels;
    std::size_t tissue = 0;
    std::vector<double> chan(c);
    for (std::size_t wi = 0; wi < window.n_patches(); ++wi) {
        const std::span<const double> patch = window.patch_at(wi);
        for (std::size_t i = 0; i < p * p; ++i) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                chan[ch] = patch[ch * p * p + i];
            }
            if (luminance(chan) < kTissueLuminanceMax) {
                ++tissue;
            }
        }
    }
    return static_cast<double>(tissue) / static_cast<double>(window.n_patches() * p * p);
}

std::vector<ContextWindow> tissue_filter(std::vector<ContextWindow> windows, double min_fraction) {
    std::vector<ContextWindow> kept;
    kept.reserve(windows.size());
    for (ContextWindow& win : windows) {
        if (win.tissue_fraction >= min_fraction) {
            kept.push_back(std::move(win));
        }
    }
    return kept;
}

}  // namespace mcmkd
