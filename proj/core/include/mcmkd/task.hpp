#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mcmkd/blocks.hpp"
#include "mcmkd/encoders.hpp"
#include "mcmkd/rng.hpp"
#include "mcmkd/synth.hpp"
#include "mcmkd/tensor.hpp"

namespace mcmkd {

enum class Variant { kMcmKd, kMcm, kKd, kCmKd, kMcmSd };

std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);
/// True for the variants whose loss reads masked rows only.
bool variant_masks(Variant v);

/// floor(x + 0.5); fixes the mask-count rounding rule.
std::size_t round_half_up(double x);

struct MaskPlan {
    std::size_t n = 0;
    std::vector<std::size_t> masked;  // sorted, distinct, in [0, n)
    double ratio = 0.0;

    bool empty() const { return masked.empty(); }
};

inline MaskPlan empty_mask_plan(std::size_t n) { return MaskPlan{n, {}, 0.0}; }

/// Uniform sample without replacement of round_half_up(ratio * n) indices.
MaskPlan sample_mask(std::size_t n, double ratio, Rng& rng);

/// Replaces the rows in plan.masked by the learnable mask token. Visible rows
/// pass through with gradient; masked rows send gradient only to the token.
Tensor apply_mask(const Tensor& x, const MaskPlan& plan, const Tensor& mask_token);

/// Elementwise sum with the positional embeddings, applied after masking.
Tensor add_positions(const Tensor& seq, const Tensor& pos_emb);

/// Mean absolute error over masked rows only, normalized by the number of
/// masked scalar elements |M| * dim. Visible rows never affect the value.
Tensor masked_l1_loss(const Tensor& y, const Tensor& y_pred, const MaskPlan& plan);

/// Mean absolute error over all rows (the unmasked variants' loss).
Tensor mean_l1_loss(const Tensor& y, const Tensor& y_pred);

struct TaskConfig {
    std::size_t s = 4;  // context window side, sequence length s*s
    std::size_t d_f = 64;
    std::size_t d_t = 128;
    std::size_t tf_layers = 2;
    std::size_t tf_heads = 2;
    std::size_t tf_mlp_hidden = 128;
    std::size_t predictor_hidden = 128;
    double mask_ratio = 0.5;
    double ema_tau = 0.999;
    Variant variant = Variant::kMcmKd;
};

/// Variant-wired fine-tuning model. Components absent under a variant are not
/// constructed at all (the KD arm carries no context encoder, the MCM arm no
/// teacher). The student is always trainable; frozen teachers never are.
struct McmKdModel {
    TaskConfig cfg;
    PatchEncoder student;
    std::optional<PatchEncoder> teacher;   // frozen; absent for MCM and MCM_SD
    std::optional<EmaTeacher> ema;         // MCM_SD only
    std::optional<TransformerEncoder> context;  // absent for KD
    std::optional<Mlp> predictor;          // feature-target variants
    std::optional<LinearLayer> pixel_head; // MCM only

    std::size_t context_len() const { return cfg.s * cfg.s; }
    std::size_t target_dim() const;

    /// All parameters updated by fine-tuning (never the frozen/EMA teacher).
    std::vector<Tensor> trainable_params() const;
    NamedParams student_named_params() const { return student.named_params("student"); }
    /// Context encoder + predictor: kept for the checkpoint but discardable.
    NamedParams aux_named_params() const;
};

McmKdModel build_task_model(const TaskConfig& cfg, PatchEncoder student,
                            std::optional<PatchEncoder> teacher, std::uint64_t seed);

struct TaskForward {
    Tensor loss;
    Tensor targets;      // y
    Tensor predictions;  // y_pred
};

/// Runs the variant's pipeline on one window. cached_targets, when given,
/// replaces the frozen-teacher pass (it must hold that teacher's features).
TaskForward variant_forward(const McmKdModel& model, const ContextWindow& window,
                            const MaskPlan& plan, const Tensor* cached_targets = nullptr);

struct FinetuneConfig {
    double lr = 1e-3;
    std::size_t batch = 8;
    double weight_decay = 0.01;
};

struct TrainReport {
    std::vector<double> batch_losses;
    std::size_t n_windows = 0;
};

/// One pass over the (seeded-)shuffled windows: fresh masks per visit, mean
/// loss per batch, AdamW step per batch; EMA update after each step for
/// MCM_SD. cached_targets, when given, is indexed by original window order.
TrainReport finetune_epoch(McmKdModel& model, const std::vector<ContextWindow>& windows,
                           const FinetuneConfig& cfg, std::uint64_t seed,
                           const std::vector<Tensor>* cached_targets = nullptr);

}  // namespace mcmkd
