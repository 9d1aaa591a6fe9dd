#include "mcmkd/task.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mcmkd/adamw.hpp"
#include "mcmkd/errors.hpp"
#include "record.hpp"

namespace mcmkd {

namespace {

using detail::maybe_record;

// Sub-stream tags under a fine-tuning seed.
constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kMaskStream = 2;
constexpr std::uint64_t kModelInitStream = 3;

}  // namespace

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::kMcmKd: return "mcm-kd";
        case Variant::kMcm: return "mcm";
        case Variant::kKd: return "kd";
        case Variant::kCmKd: return "cm-kd";
        case Variant::kMcmSd: return "mcm-sd";
    }
    throw std::logic_error("variant_name: unknown variant");
}

Variant parse_variant(const std::string& name) {
    for (const Variant v :
         {Variant::kMcmKd, Variant::kMcm, Variant::kKd, Variant::kCmKd, Variant::kMcmSd}) {
        if (variant_name(v) == name) {
            return v;
        }
    }
    throw ConfigError("unknown variant \"" + name +
                      "\" (expected mcm-kd, mcm, kd, cm-kd, or mcm-sd)");
}

bool variant_masks(Variant v) {
    return v == Variant::kMcmKd || v == Variant::kMcm || v == Variant::kMcmSd;
}

std::size_t round_half_up(double x) {
    return static_cast<std::size_t>(std::floor(x + 0.5));
}

MaskPlan sample_mask(std::size_t n, double ratio, Rng& rng) {
    if (!(ratio > 0.0 && ratio < 1.0)) {
        throw ConfigError("sample_mask: mask ratio must lie strictly inside (0,1), got " +
                          std::to_string(ratio));
    }
    const std::size_t count = round_half_up(ratio * static_cast<double>(n));
    if (count == 0 || count >= n) {
        throw ConfigError("sample_mask: ratio " + std::to_string(ratio) + " over " +
                          std::to_string(n) + " positions leaves no masked or no visible patch");
    }
    MaskPlan plan;
    plan.n = n;
    plan.ratio = ratio;
    plan.masked = sample_indices(n, count, rng);
    return plan;
}

namespace {

void check_plan(const MaskPlan& plan, std::size_t rows, const char* op) {
    if (plan.n != rows) {
        throw std::invalid_argument(std::string(op) + ": plan covers " + std::to_string(plan.n) +
                                    " positions, sequence has " + std::to_string(rows));
    }
    for (const std::size_t idx : plan.masked) {
        if (idx >= rows) {
            throw std::invalid_argument(std::string(op) + ": masked index " +
                                        std::to_string(idx) + " out of range");
        }
    }
}

}  // namespace

Tensor apply_mask(const Tensor& x, const MaskPlan& plan, const Tensor& mask_token) {
    if (x.ndim() != 2) {
        throw std::invalid_argument("apply_mask: expected a 2-D sequence, got " +
                                    shape_str(x.shape()));
    }
    check_plan(plan, x.dim(0), "apply_mask");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (mask_token.numel() != d) {
        throw std::invalid_argument("apply_mask: mask token has " +
                                    std::to_string(mask_token.numel()) + " elements, rows have " +
                                    std::to_string(d));
    }
    std::vector<bool> is_masked(n, false);
    for (const std::size_t idx : plan.masked) {
        is_masked[idx] = true;
    }
    Tensor out = Tensor::zeros({n, d});
    {
        const double* px = x.data().data();
        const double* pt = mask_token.data().data();
        double* po = out.mutable_data().data();
        for (std::size_t r = 0; r < n; ++r) {
            const double* src = is_masked[r] ? pt : px + r * d;
            std::copy(src, src + d, po + r * d);
        }
    }
    maybe_record({x, mask_token}, out, [&](const std::vector<bool>& tracked) {
        auto xi = x.impl();
        auto ti = mask_token.impl();
        auto oi = out.impl();
        const bool tx = tracked[0], tt = tracked[1];
        return [xi, ti, oi, is_masked, n, d, tx, tt]() {
            const double* dy = oi->grad.data();
            for (std::size_t r = 0; r < n; ++r) {
                double* dst = is_masked[r] ? (tt ? ti->grad.data() : nullptr)
                                           : (tx ? xi->grad.data() + r * d : nullptr);
                if (dst == nullptr) {
                    continue;
                }
                for (std::size_t j = 0; j < d; ++j) {
                    dst[j] += dy[r * d + j];
                }
            }
        };
    });
    return out;
}

Tensor add_positions(const Tensor& seq, const Tensor& pos_emb) {
    if (seq.shape() != pos_emb.shape()) {
        throw std::invalid_argument("add_positions: sequence " + shape_str(seq.shape()) +
                                    " and embeddings " + shape_str(pos_emb.shape()) + " disagree");
    }
    return add(seq, pos_emb);
}

namespace {

/// Mean |y - y_pred| over the given rows; gradient is the sign, split across
/// both inputs.
Tensor l1_over_rows(const Tensor& y, const Tensor& y_pred, std::vector<std::size_t> rows,
                    const char* op) {
    if (y.ndim() != 2 || y.shape() != y_pred.shape()) {
        throw std::invalid_argument(std::string(op) + ": target " + shape_str(y.shape()) +
                                    " and prediction " + shape_str(y_pred.shape()) + " disagree");
    }
    const std::size_t d = y.dim(1);
    const double omega = static_cast<double>(rows.size() * d);
    double acc = 0.0;
    {
        const double* py = y.data().data();
        const double* pp = y_pred.data().data();
        for (const std::size_t r : rows) {
            for (std::size_t j = 0; j < d; ++j) {
                acc += std::abs(py[r * d + j] - pp[r * d + j]);
            }
        }
    }
    Tensor out = Tensor::scalar(acc / omega);
    maybe_record({y, y_pred}, out, [&](const std::vector<bool>& tracked) {
        auto yi = y.impl();
        auto pi = y_pred.impl();
        auto oi = out.impl();
        const bool ty = tracked[0], tp = tracked[1];
        return [yi, pi, oi, rows, d, omega, ty, tp]() {
            const double g = oi->grad[0] / omega;
            const double* py = yi->data.data();
            const double* pp = pi->data.data();
            for (const std::size_t r : rows) {
                for (std::size_t j = 0; j < d; ++j) {
                    const double diff = py[r * d + j] - pp[r * d + j];
                    const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
                    if (ty) {
                        yi->grad[r * d + j] += g * sign;
                    }
                    if (tp) {
                        pi->grad[r * d + j] -= g * sign;
                    }
                }
            }
        };
    });
    return out;
}

}  // namespace

Tensor masked_l1_loss(const Tensor& y, const Tensor& y_pred, const MaskPlan& plan) {
    if (plan.empty()) {
        throw std::invalid_argument("masked_l1_loss: empty mask plan");
    }
    check_plan(plan, y.dim(0), "masked_l1_loss");
    return l1_over_rows(y, y_pred, plan.masked, "masked_l1_loss");
}

Tensor mean_l1_loss(const Tensor& y, const Tensor& y_pred) {
    if (y.ndim() != 2) {
        throw std::invalid_argument("mean_l1_loss: expected 2-D tensors, got " +
                                    shape_str(y.shape()));
    }
    std::vector<std::size_t> rows(y.dim(0));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        rows[r] = r;
    }
    return l1_over_rows(y, y_pred, std::move(rows), "mean_l1_loss");
}

// ---- model ----------------------------------------------------------------------

std::size_t McmKdModel::target_dim() const {
    switch (cfg.variant) {
        case Variant::kMcm:
            return student.config.channels * student.config.patch * student.config.patch;
        case Variant::kMcmSd:
            return cfg.d_f;
        default:
            return cfg.d_t;
    }
}

std::vector<Tensor> McmKdModel::trainable_params() const {
    std::vector<Tensor> out = student.params();
    if (context.has_value()) {
        for (const Tensor& p : context->params()) {
            out.push_back(p);
        }
    }
    if (predictor.has_value()) {
        for (const Tensor& p : predictor->params()) {
            out.push_back(p);
        }
    }
    if (pixel_head.has_value()) {
        out.push_back(pixel_head->W);
        out.push_back(pixel_head->b);
    }
    return out;
}

NamedParams McmKdModel::aux_named_params() const {
    NamedParams out;
    if (context.has_value()) {
        context->append_named("context", out);
    }
    if (predictor.has_value()) {
        predictor->append_named("predictor", out);
    }
    if (pixel_head.has_value()) {
        pixel_head->append_named("pixel_head", out);
    }
    return out;
}

McmKdModel build_task_model(const TaskConfig& cfg, PatchEncoder student,
                            std::optional<PatchEncoder> teacher, std::uint64_t seed) {
    if (student.out_dim() != cfg.d_f) {
        throw ConfigError("task model: student out_dim " + std::to_string(student.out_dim()) +
                          " != d_f " + std::to_string(cfg.d_f));
    }
    const bool needs_teacher = cfg.variant == Variant::kMcmKd || cfg.variant == Variant::kKd ||
                               cfg.variant == Variant::kCmKd;
    if (needs_teacher) {
        if (!teacher.has_value()) {
            throw ConfigError("task model: variant " + variant_name(cfg.variant) +
                              " needs a frozen teacher");
        }
        if (!teacher->frozen()) {
            throw ConfigError("task model: the teacher must be frozen");
        }
        if (teacher->out_dim() != cfg.d_t) {
            throw ConfigError("task model: teacher out_dim " + std::to_string(teacher->out_dim()) +
                              " != d_t " + std::to_string(cfg.d_t));
        }
    }

    McmKdModel model;
    model.cfg = cfg;
    model.student = std::move(student);
    Rng init_rng(derive_seed(seed, {kModelInitStream}));
    if (cfg.variant != Variant::kKd) {
        model.context = TransformerEncoder(cfg.s * cfg.s, cfg.d_f, cfg.tf_heads, cfg.tf_mlp_hidden,
                                           cfg.tf_layers, init_rng);
    }
    switch (cfg.variant) {
        case Variant::kMcm:
            model.pixel_head = LinearLayer(cfg.d_f, model.target_dim(), init_rng);
            break;
        case Variant::kMcmSd:
            model.ema = EmaTeacher(model.student, cfg.ema_tau);
            model.predictor = Mlp(cfg.d_f, cfg.predictor_hidden, cfg.d_f, init_rng);
            break;
        default:
            model.teacher = std::move(*teacher);
            model.predictor = Mlp(cfg.d_f, cfg.predictor_hidden, cfg.d_t, init_rng);
            break;
    }
    return model;
}

TaskForward variant_forward(const McmKdModel& model, const ContextWindow& window,
                            const MaskPlan& plan, const Tensor* cached_targets) {
    const std::size_t len = model.context_len();
    if (window.n_patches() != len) {
        throw std::invalid_argument("variant_forward: window has " +
                                    std::to_string(window.n_patches()) + " patches, model expects " +
                                    std::to_string(len));
    }
    if (variant_masks(model.cfg.variant) == plan.empty()) {
        throw ConfigError("variant_forward: variant " + variant_name(model.cfg.variant) +
                          (plan.empty() ? " requires a non-empty mask plan"
                                        : " must run with an empty mask plan"));
    }

    // Targets never carry gradient; the teacher is frozen, the EMA copy is
    // off-tape, and pixel targets are data.
    Tensor targets;
    switch (model.cfg.variant) {
        case Variant::kMcm:
            targets = Tensor::from_data({len, window.patch_dim()}, window.patch_data);
            break;
        case Variant::kMcmSd:
            targets = model.ema->encoder.encode_window(window);
            break;
        default:
            targets = cached_targets != nullptr ? *cached_targets
                                                : model.teacher->encode_window(window);
            break;
    }
    if (targets.ndim() != 2 || targets.dim(0) != len || targets.dim(1) != model.target_dim()) {
        throw std::invalid_argument("variant_forward: targets have shape " +
                                    shape_str(targets.shape()) + ", expected [" +
                                    std::to_string(len) + " x " +
                                    std::to_string(model.target_dim()) + "]");
    }

    Tensor x = model.student.encode_window(window);
    if (model.context.has_value()) {
        x = apply_mask(x, plan, model.context->mask_token);
        x = add_positions(x, model.context->pos_emb);
        x = model.context->encode(x);
    }
    const Tensor predictions = model.pixel_head.has_value()
                                   ? linear_forward(*model.pixel_head, x)
                                   : mlp_forward(*model.predictor, x);
    const Tensor loss = plan.empty() ? mean_l1_loss(targets, predictions)
                                     : masked_l1_loss(targets, predictions, plan);
    return TaskForward{loss, targets, predictions};
}

TrainReport finetune_epoch(McmKdModel& model, const std::vector<ContextWindow>& windows,
                           const FinetuneConfig& cfg, std::uint64_t seed,
                           const std::vector<Tensor>* cached_targets) {
    if (windows.empty()) {
        throw ConfigError("finetune: no context windows to train on");
    }
    if (cfg.batch == 0) {
        throw ConfigError("finetune: batch size must be positive");
    }
    if (cached_targets != nullptr && cached_targets->size() != windows.size()) {
        throw std::invalid_argument("finetune: cached target count mismatch");
    }

    std::vector<Tensor> params = model.trainable_params();
    AdamW optimizer(params, AdamWState{.lr = cfg.lr, .weight_decay = cfg.weight_decay});

    std::vector<std::size_t> order(windows.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    Rng shuffle_rng(derive_seed(seed, {kShuffleStream}));
    shuffle(order, shuffle_rng);

    TrainReport report;
    report.n_windows = windows.size();
    const std::size_t len = model.context_len();
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
        const std::size_t stop = std::min(start + cfg.batch, order.size());
        const std::size_t batch_index = start / cfg.batch;
        Tape tape;
        Tensor batch_loss;
        for (std::size_t i = start; i < stop; ++i) {
            const std::size_t wi = order[i];
            MaskPlan plan = empty_mask_plan(len);
            if (variant_masks(model.cfg.variant)) {
                Rng mask_rng(derive_seed(seed, {kMaskStream, wi}));
                plan = sample_mask(len, model.cfg.mask_ratio, mask_rng);
            }
            const Tensor* cached =
                cached_targets != nullptr ? &(*cached_targets)[wi] : nullptr;
            const TaskForward step = variant_forward(model, windows[wi], plan, cached);
            batch_loss = batch_loss.defined() ? add(batch_loss, step.loss) : step.loss;
        }
        batch_loss = scale(batch_loss, 1.0 / static_cast<double>(stop - start));
        if (!all_finite(batch_loss)) {
            throw DivergenceError("finetune: non-finite loss in batch " +
                                  std::to_string(batch_index));
        }
        backward(batch_loss);
        optimizer.step();
        optimizer.zero_grad();
        if (model.ema.has_value()) {
            model.ema->update(model.student);
        }
        report.batch_losses.push_back(batch_loss.value());
    }
    return report;
}

}  // namespace mcmkd
