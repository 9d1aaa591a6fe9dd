#include "mcmkd/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mcmkd/adamw.hpp"
#include "mcmkd/errors.hpp"

namespace mcmkd {

namespace {

constexpr std::size_t kConvKernel = 3;

// Sub-stream tags under a pretraining seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kTrainPatchStream = 2;
constexpr std::uint64_t kHoldoutPatchStream = 3;
constexpr std::uint64_t kShuffleStream = 4;

}  // namespace

PatchEncoder::PatchEncoder(const EncoderConfig& cfg, Rng& rng) : config(cfg) {
    if (cfg.stage_channels.empty() || cfg.out_dim == 0) {
        throw ConfigError("encoder: needs at least one conv stage and a positive out_dim");
    }
    std::size_t channels = cfg.channels;
    std::size_t side = cfg.patch;
    for (const std::size_t out_channels : cfg.stage_channels) {
        if (side < kConvKernel) {
            throw ConfigError("encoder: patch side " + std::to_string(cfg.patch) +
                              " too small for " + std::to_string(cfg.stage_channels.size()) +
                              " conv stages");
        }
        stages.emplace_back(channels, out_channels, kConvKernel, 1, rng);
        side = (side - kConvKernel + 1 + 1) / 2;  // valid conv, then ceil-mode 2x2 pool
        channels = out_channels;
    }
    head = LinearLayer(channels * side * side, cfg.out_dim, rng);
}

Tensor PatchEncoder::forward(const Tensor& patches) const {
    if (patches.ndim() != 4 || patches.dim(1) != config.channels ||
        patches.dim(2) != config.patch || patches.dim(3) != config.patch) {
        throw std::invalid_argument("encoder: expected [n x " + std::to_string(config.channels) +
                                    " x " + std::to_string(config.patch) + " x " +
                                    std::to_string(config.patch) + "] patches, got " +
                                    shape_str(patches.shape()));
    }
    Tensor x = patches;
    for (const ConvLayer& stage : stages) {
        x = avg_pool2x2(gelu(conv2d_forward(stage, x)));
    }
    const std::size_t n = x.dim(0);
    x = reshape(x, {n, x.numel() / n});
    return linear_forward(head, x);
}

Tensor PatchEncoder::encode_window(const ContextWindow& window) const {
    if (window.patch != config.patch || window.channels != config.channels) {
        throw std::invalid_argument(
            "encoder: window patches are " + std::to_string(window.channels) + "x" +
            std::to_string(window.patch) + "x" + std::to_string(window.patch) +
            ", encoder expects " + std::to_string(config.channels) + "x" +
            std::to_string(config.patch) + "x" + std::to_string(config.patch));
    }
    Tensor batch = Tensor::from_data({window.n_patches(), window.channels, window.patch,
                                      window.patch},
                                     window.patch_data);
    return forward(batch);
}

void PatchEncoder::freeze() {
    for (Tensor& p : params()) {
        p.set_requires_grad(false);
    }
    frozen_ = true;
}

std::vector<Tensor> PatchEncoder::params() const {
    std::vector<Tensor> out;
    for (const ConvLayer& stage : stages) {
        out.push_back(stage.kernels);
        out.push_back(stage.bias);
    }
    out.push_back(head.W);
    out.push_back(head.b);
    return out;
}

NamedParams PatchEncoder::named_params(const std::string& prefix) const {
    NamedParams out;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        stages[i].append_named(prefix + ".s" + std::to_string(i), out);
    }
    head.append_named(prefix + ".head", out);
    return out;
}

std::size_t PatchEncoder::param_count() const {
    return mcmkd::param_count(params());
}

std::size_t PatchEncoder::flops_per_patch() const {
    std::size_t macs = 0;
    std::size_t side = config.patch;
    for (const ConvLayer& stage : stages) {
        const std::size_t out_side = side - kConvKernel + 1;
        macs += stage.out_channels() * out_side * out_side * stage.in_channels() * kConvKernel *
                kConvKernel;
        side = (out_side + 1) / 2;
    }
    macs += head.out_features() * head.in_features();
    return macs;
}

PatchEncoder PatchEncoder::clone(bool requires_grad) const {
    Rng dummy(0);
    PatchEncoder copy(config, dummy);
    std::vector<Tensor> src = params();
    std::vector<Tensor> dst = copy.params();
    for (std::size_t i = 0; i < src.size(); ++i) {
        std::copy(src[i].data().begin(), src[i].data().end(), dst[i].mutable_data().begin());
        dst[i].set_requires_grad(requires_grad);
    }
    copy.frozen_ = !requires_grad;
    return copy;
}

// ---- proxy pretraining -----------------------------------------------------------

namespace {

struct ProxyDataset {
    std::vector<double> pixels;  // n * c * p * p
    std::vector<std::size_t> labels;
    std::size_t n = 0, c = 0, p = 0;

    Tensor batch(std::span<const std::size_t> indices) const {
        const std::size_t dim = c * p * p;
        std::vector<double> data(indices.size() * dim);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            const double* src = pixels.data() + indices[i] * dim;
            std::copy(src, src + dim, data.begin() + static_cast<std::ptrdiff_t>(i * dim));
        }
        return Tensor::from_data({indices.size(), c, p, p}, std::move(data));
    }
};

/// Class pattern mirrors slide composition: background half the samples, the
/// three tissue classes sharing the rest. Keeps the divergence floor reachable
/// even when one tissue pair stays confused. Rendering is seeded per sample.
constexpr PatchClass kProxyPattern[6] = {
    PatchClass::kBackground, PatchClass::kStromaA, PatchClass::kBackground,
    PatchClass::kStromaB,    PatchClass::kBackground, PatchClass::kLesion,
};

ProxyDataset render_proxy_patches(const PretrainConfig& cfg, std::uint64_t seed,
                                  std::uint64_t stream, std::size_t count) {
    ProxyDataset ds;
    ds.n = count;
    ds.c = cfg.channels;
    ds.p = cfg.patch;
    const std::size_t dim = ds.c * ds.p * ds.p;
    ds.pixels.resize(count * dim);
    ds.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const auto cls = kProxyPattern[i % 6];
        ds.labels[i] = static_cast<std::size_t>(cls);
        Rng rng(derive_seed(seed, {stream, i}));
        render_patch(cls, ds.p, ds.c, cfg.sigma, rng,
                     std::span<double>(ds.pixels).subspan(i * dim, dim), cfg.dot_delta);
    }
    return ds;
}

double holdout_accuracy(const PatchEncoder& enc, const LinearLayer& proxy_head,
                        const ProxyDataset& ds) {
    constexpr std::size_t kEvalBatch = 64;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < ds.n; start += kEvalBatch) {
        const std::size_t stop = std::min(start + kEvalBatch, ds.n);
        std::vector<std::size_t> batch_idx(stop - start);
        for (std::size_t i = start; i < stop; ++i) {
            batch_idx[i - start] = i;
        }
        const Tensor logits = linear_forward(proxy_head, enc.forward(ds.batch(batch_idx)));
        const std::size_t k = logits.dim(1);
        for (std::size_t r = 0; r < batch_idx.size(); ++r) {
            const auto row = logits.data().subspan(r * k, k);
            const std::size_t arg =
                static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
            correct += arg == ds.labels[batch_idx[r]] ? 1 : 0;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(ds.n);
}

}  // namespace

PatchEncoder pretrain_encoder(const EncoderConfig& enc_cfg, const PretrainConfig& cfg,
                              std::uint64_t seed, PretrainReport* report) {
    if (cfg.train_samples == 0 || cfg.holdout_samples == 0 || cfg.batch == 0 ||
        cfg.max_epochs == 0) {
        throw ConfigError("pretrain: samples, batch, and max_epochs must be positive");
    }
    if (enc_cfg.patch != cfg.patch || enc_cfg.channels != cfg.channels) {
        throw ConfigError("pretrain: encoder and data geometry disagree");
    }
    Rng init_rng(derive_seed(seed, {kInitStream}));
    PatchEncoder enc(enc_cfg, init_rng);
    LinearLayer proxy_head(enc_cfg.out_dim, kNumPatchClasses, init_rng);

    const ProxyDataset train = render_proxy_patches(cfg, seed, kTrainPatchStream,
                                                    cfg.train_samples);
    const ProxyDataset holdout = render_proxy_patches(cfg, seed, kHoldoutPatchStream,
                                                      cfg.holdout_samples);

    std::vector<Tensor> trainable = enc.params();
    trainable.push_back(proxy_head.W);
    trainable.push_back(proxy_head.b);
    AdamW optimizer(trainable, AdamWState{.lr = cfg.lr});

    PretrainReport local;
    PretrainReport& rep = report != nullptr ? *report : local;
    rep = PretrainReport{};

    std::vector<std::size_t> order(train.n);
    for (std::size_t i = 0; i < train.n; ++i) {
        order[i] = i;
    }
    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(seed, {kShuffleStream, epoch}));
        shuffle(order, shuffle_rng);
        double epoch_loss = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t start = 0; start < train.n; start += cfg.batch) {
            const std::size_t stop = std::min(start + cfg.batch, train.n);
            const std::span<const std::size_t> batch_idx(order.data() + start, stop - start);
            std::vector<std::size_t> labels(batch_idx.size());
            for (std::size_t i = 0; i < batch_idx.size(); ++i) {
                labels[i] = train.labels[batch_idx[i]];
            }
            Tape tape;
            const Tensor logits = linear_forward(proxy_head, enc.forward(train.batch(batch_idx)));
            const Tensor loss = cross_entropy(logits, labels);
            if (!all_finite(loss)) {
                throw DivergenceError("pretrain: non-finite loss in epoch " +
                                      std::to_string(epoch));
            }
            backward(loss);
            optimizer.step();
            optimizer.zero_grad();
            epoch_loss += loss.value();
            ++n_batches;
        }
        rep.epoch_losses.push_back(epoch_loss / static_cast<double>(n_batches));
        rep.epochs = epoch + 1;
        rep.holdout_accuracy = holdout_accuracy(enc, proxy_head, holdout);
        if (rep.holdout_accuracy >= kPretrainTargetAccuracy) {
            break;
        }
    }
    if (rep.holdout_accuracy < kPretrainFloorAccuracy) {
        throw DivergenceError("pretrain: held-out accuracy " +
                              std::to_string(rep.holdout_accuracy) + " below floor " +
                              std::to_string(kPretrainFloorAccuracy) + " after " +
                              std::to_string(rep.epochs) + " epochs");
    }
    return enc;
}

PatchEncoder pretrain_teacher(const EncoderConfig& enc_cfg, const PretrainConfig& cfg,
                              std::uint64_t seed, PretrainReport* report) {
    // The teacher plays the heavily-pretrained model: a multiple of the
    // student's epoch budget, with the same early-stop target.
    PretrainConfig teacher_cfg = cfg;
    teacher_cfg.max_epochs = cfg.max_epochs * std::max<std::size_t>(cfg.budget_multiplier, 1);
    PatchEncoder teacher = pretrain_encoder(enc_cfg, teacher_cfg, seed, report);
    teacher.freeze();
    return teacher;
}

PatchEncoder init_student(const EncoderConfig& enc_cfg, const PretrainConfig& cfg,
                          std::uint64_t seed, PretrainReport* report) {
    return pretrain_encoder(enc_cfg, cfg, seed, report);
}

// ---- EMA -------------------------------------------------------------------------

void ema_update(std::vector<Tensor>& teacher_params, const std::vector<Tensor>& student_params,
                double tau) {
    if (teacher_params.size() != student_params.size()) {
        throw std::invalid_argument("ema_update: parameter lists differ in length");
    }
    for (std::size_t i = 0; i < teacher_params.size(); ++i) {
        if (teacher_params[i].shape() != student_params[i].shape()) {
            throw std::invalid_argument("ema_update: parameter " + std::to_string(i) +
                                        " shape mismatch: " +
                                        shape_str(teacher_params[i].shape()) + " vs " +
                                        shape_str(student_params[i].shape()));
        }
        double* t = teacher_params[i].mutable_data().data();
        const double* s = student_params[i].data().data();
        for (std::size_t j = 0; j < teacher_params[i].numel(); ++j) {
            t[j] = tau * t[j] + (1.0 - tau) * s[j];
        }
    }
}

void EmaTeacher::update(const PatchEncoder& student) {
    std::vector<Tensor> mine = encoder.params();
    ema_update(mine, student.params(), tau);
}

}  // namespace mcmkd
