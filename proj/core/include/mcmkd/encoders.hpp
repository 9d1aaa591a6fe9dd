#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mcmkd/blocks.hpp"
#include "mcmkd/rng.hpp"
#include "mcmkd/synth.hpp"
#include "mcmkd/tensor.hpp"

namespace mcmkd {

inline constexpr double kPretrainTargetAccuracy = 0.95;  // early-stop threshold
inline constexpr double kPretrainFloorAccuracy = 0.80;   // below this at max epochs: divergence

struct EncoderConfig {
    std::size_t patch = 16;
    std::size_t channels = 3;
    std::vector<std::size_t> stage_channels = {8};  // conv channels per stage
    std::size_t out_dim = 64;
};

inline EncoderConfig student_encoder_config(std::size_t patch = 16, std::size_t channels = 3,
                                            std::size_t d_f = 64) {
    return EncoderConfig{patch, channels, {8}, d_f};
}

inline EncoderConfig teacher_encoder_config(std::size_t patch = 16, std::size_t channels = 3,
                                            std::size_t d_t = 128) {
    return EncoderConfig{patch, channels, {16, 32}, d_t};
}

/// Conv stages (3x3 conv, GELU, ceil-mode 2x2 mean pool) and a linear head.
class PatchEncoder {
public:
    PatchEncoder() = default;
    PatchEncoder(const EncoderConfig& cfg, Rng& rng);

    /// Features for a batch of patches [n x c x p x p] -> [n x out_dim].
    Tensor forward(const Tensor& patches) const;

    /// Features for every patch of a window, window order: [(s*s) x out_dim].
    Tensor encode_window(const ContextWindow& window) const;

    std::size_t out_dim() const { return head.out_features(); }
    std::size_t patch_side() const { return config.patch; }
    bool frozen() const { return frozen_; }
    void freeze();

    std::vector<Tensor> params() const;
    NamedParams named_params(const std::string& prefix) const;
    std::size_t param_count() const;

    /// Multiply-accumulate count of one patch forward pass, from layer shapes.
    std::size_t flops_per_patch() const;

    /// Deep copy with its own storage.
    PatchEncoder clone(bool requires_grad) const;

    EncoderConfig config;
    std::vector<ConvLayer> stages;
    LinearLayer head;

private:
    bool frozen_ = false;
};

struct PretrainConfig {
    std::size_t patch = 16;
    std::size_t channels = 3;
    double sigma = 0.05;  // render noise of the proxy patches
    double dot_delta = kLesionDotDeltaDefault;
    std::size_t train_samples = 2048;
    std::size_t holdout_samples = 512;
    std::size_t batch = 32;
    std::size_t max_epochs = 30;
    std::size_t budget_multiplier = 1;  // scales max_epochs; >1 for the teacher
    double lr = 1e-3;
};

struct PretrainReport {
    std::size_t epochs = 0;
    double holdout_accuracy = 0.0;
    std::vector<double> epoch_losses;
};

/// Supervised proxy task: classify single patches into the 4 synthetic patch
/// classes; stops once held-out accuracy reaches kPretrainTargetAccuracy.
/// Throws DivergenceError if accuracy is below kPretrainFloorAccuracy after
/// max_epochs. The proxy classification head is discarded.
PatchEncoder pretrain_encoder(const EncoderConfig& enc_cfg, const PretrainConfig& cfg,
                              std::uint64_t seed, PretrainReport* report = nullptr);

/// Teacher: trained on the evaluation distribution, then frozen.
PatchEncoder pretrain_teacher(const EncoderConfig& enc_cfg, const PretrainConfig& cfg,
                              std::uint64_t seed, PretrainReport* report = nullptr);

/// Student: same proxy task on a noise-shifted distribution (cfg.sigma is the
/// shifted value), returned trainable.
PatchEncoder init_student(const EncoderConfig& enc_cfg, const PretrainConfig& cfg,
                          std::uint64_t seed, PretrainReport* report = nullptr);

/// theta_t <- tau * theta_t + (1 - tau) * theta_s, elementwise, exact at f64.
void ema_update(std::vector<Tensor>& teacher_params, const std::vector<Tensor>& student_params,
                double tau);

/// Frozen mirror of the student used by the self-distillation variant.
struct EmaTeacher {
    PatchEncoder encoder;
    double tau = 0.999;

    EmaTeacher() = default;
    EmaTeacher(const PatchEncoder& student, double tau_)
        : encoder(student.clone(false)), tau(tau_) {}

    void update(const PatchEncoder& student);
};

}  // namespace mcmkd
