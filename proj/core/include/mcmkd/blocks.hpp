#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mcmkd/rng.hpp"
#include "mcmkd/tensor.hpp"

namespace mcmkd {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

inline constexpr double kInitStddev = 0.02;
inline constexpr double kLayerNormEps = 1e-5;

/// Fully connected layer computing x W^T + b on each row of x.
struct LinearLayer {
    Tensor W;  // [out x in]
    Tensor b;  // [out]

    LinearLayer() = default;
    LinearLayer(std::size_t in, std::size_t out, Rng& rng);

    std::size_t in_features() const { return W.dim(1); }
    std::size_t out_features() const { return W.dim(0); }
    std::vector<Tensor> params() const { return {W, b}; }
    void append_named(const std::string& prefix, NamedParams& out) const;
};

Tensor linear_forward(const LinearLayer& layer, const Tensor& x);

/// Two linear layers with a GELU between them.
struct Mlp {
    LinearLayer hidden;
    LinearLayer out;

    Mlp() = default;
    Mlp(std::size_t in, std::size_t hidden_dim, std::size_t out_dim, Rng& rng);

    std::vector<Tensor> params() const;
    void append_named(const std::string& prefix, NamedParams& out_list) const;
};

Tensor mlp_forward(const LinearLayer& hidden, const LinearLayer& out, const Tensor& x);
Tensor mlp_forward(const Mlp& mlp, const Tensor& x);

/// 2-D cross-correlation with valid padding (no implicit pad).
struct ConvLayer {
    Tensor kernels;  // [outC x inC x kh x kw]
    Tensor bias;     // [outC]
    std::size_t stride = 1;

    ConvLayer() = default;
    ConvLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
              std::size_t stride, Rng& rng);

    std::size_t in_channels() const { return kernels.dim(1); }
    std::size_t out_channels() const { return kernels.dim(0); }
    std::vector<Tensor> params() const { return {kernels, bias}; }
    void append_named(const std::string& prefix, NamedParams& out) const;
};

Tensor conv2d_forward(const ConvLayer& layer, const Tensor& x);  // x: [n x inC x H x W]

/// 2x2 mean pooling with stride 2, ceil mode: odd trailing rows/columns form
/// edge windows whose mean is taken over the covered cells only.
Tensor avg_pool2x2(const Tensor& x);  // x: [n x C x H x W]

/// Scaled dot-product attention over full (unmasked) sequences, h heads,
/// with input and output projections.
class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(std::size_t model_dim, std::size_t heads, Rng& rng);

    Tensor forward(const Tensor& q, const Tensor& k, const Tensor& v) const;

    std::size_t heads() const { return heads_; }
    std::size_t model_dim() const { return wq.in_features(); }
    std::vector<Tensor> params() const;
    void append_named(const std::string& prefix, NamedParams& out) const;

    LinearLayer wq, wk, wv, wo;

private:
    std::size_t heads_ = 1;
};

/// Pre-norm residual Transformer encoder over a fixed-length token sequence.
/// Owns the learnable positional embeddings and the learnable mask token used
/// by the masking stage (the encoder itself never masks).
class TransformerEncoder {
public:
    struct Layer {
        MultiHeadAttention attn;
        Mlp mlp;
        Tensor ln1_gamma, ln1_beta;
        Tensor ln2_gamma, ln2_beta;
    };

    TransformerEncoder() = default;
    TransformerEncoder(std::size_t context_len, std::size_t model_dim, std::size_t heads,
                       std::size_t mlp_hidden, std::size_t n_layers, Rng& rng);

    /// x + MHA(LN(x)), then x + MLP(LN(x)), per layer. seq: [context_len x d].
    Tensor encode(const Tensor& seq) const;

    std::size_t context_len() const { return pos_emb.dim(0); }
    std::size_t model_dim() const { return pos_emb.dim(1); }
    std::vector<Tensor> params() const;  // includes pos_emb and mask_token
    void append_named(const std::string& prefix, NamedParams& out) const;

    std::vector<Layer> layers;
    Tensor pos_emb;     // [context_len x d], learnable
    Tensor mask_token;  // [d], learnable

private:
    std::size_t heads_ = 1;
};

/// Mean softmax cross-entropy over rows of logits [n x k] against integer
/// labels, computed with max-subtracted logsumexp.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

std::size_t param_count(const std::vector<Tensor>& params);

}  // namespace mcmkd
