#include "mcmkd/blocks.hpp"

#include <cmath>
#include <stdexcept>

#include "record.hpp"

namespace mcmkd {

namespace {

using detail::maybe_record;

}  // namespace

// ---- linear -------------------------------------------------------------------

LinearLayer::LinearLayer(std::size_t in, std::size_t out, Rng& rng)
    : W(Tensor::randn({out, in}, rng, kInitStddev, true)), b(Tensor::zeros({out}, true)) {}

void LinearLayer::append_named(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".w", W);
    out.emplace_back(prefix + ".b", b);
}

Tensor linear_forward(const LinearLayer& layer, const Tensor& x) {
    return add(matmul(x, transpose(layer.W)), layer.b);
}

// ---- mlp ----------------------------------------------------------------------

Mlp::Mlp(std::size_t in, std::size_t hidden_dim, std::size_t out_dim, Rng& rng)
    : hidden(in, hidden_dim, rng), out(hidden_dim, out_dim, rng) {}

std::vector<Tensor> Mlp::params() const {
    return {hidden.W, hidden.b, out.W, out.b};
}

void Mlp::append_named(const std::string& prefix, NamedParams& out_list) const {
    hidden.append_named(prefix + ".h", out_list);
    out.append_named(prefix + ".o", out_list);
}

Tensor mlp_forward(const LinearLayer& hidden, const LinearLayer& out, const Tensor& x) {
    return linear_forward(out, gelu(linear_forward(hidden, x)));
}

Tensor mlp_forward(const Mlp& mlp, const Tensor& x) {
    return mlp_forward(mlp.hidden, mlp.out, x);
}

// ---- conv ---------------------------------------------------------------------

ConvLayer::ConvLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                     std::size_t stride_, Rng& rng)
    : kernels(Tensor::randn({out_channels, in_channels, kernel, kernel}, rng, kInitStddev, true)),
      bias(Tensor::zeros({out_channels}, true)),
      stride(stride_) {
    if (stride_ == 0) {
        throw std::invalid_argument("conv: stride must be positive");
    }
}

Tensor conv2d_forward(const ConvLayer& layer, const Tensor& x) {
    if (x.ndim() != 4) {
        throw std::invalid_argument("conv2d: expected [n x c x h x w] input, got " +
                                    shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t co = layer.kernels.dim(0);
    const std::size_t kh = layer.kernels.dim(2), kw = layer.kernels.dim(3);
    const std::size_t s = layer.stride;
    if (ci != layer.kernels.dim(1)) {
        throw std::invalid_argument("conv2d: input has " + std::to_string(ci) +
                                    " channels, kernels expect " +
                                    std::to_string(layer.kernels.dim(1)));
    }
    if (h < kh || w < kw || (h - kh) % s != 0 || (w - kw) % s != 0) {
        throw std::invalid_argument(
            "conv2d: non-integral output size for input " + std::to_string(h) + "x" +
            std::to_string(w) + ", kernel " + std::to_string(kh) + ", stride " + std::to_string(s));
    }
    const std::size_t ho = (h - kh) / s + 1;
    const std::size_t wo = (w - kw) / s + 1;
    Tensor out = Tensor::zeros({n, co, ho, wo});
    {
        const double* px = x.data().data();
        const double* pk = layer.kernels.data().data();
        const double* pb = layer.bias.data().data();
        double* po = out.mutable_data().data();
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t oc = 0; oc < co; ++oc) {
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        double acc = pb[oc];
                        for (std::size_t ic = 0; ic < ci; ++ic) {
                            for (std::size_t ky = 0; ky < kh; ++ky) {
                                const double* xrow =
                                    px + ((b * ci + ic) * h + oy * s + ky) * w + ox * s;
                                const double* krow = pk + ((oc * ci + ic) * kh + ky) * kw;
                                for (std::size_t kx = 0; kx < kw; ++kx) {
                                    acc += krow[kx] * xrow[kx];
                                }
                            }
                        }
                        po[((b * co + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
    }
    maybe_record({x, layer.kernels, layer.bias}, out, [&](const std::vector<bool>& tracked) {
        auto xi = x.impl();
        auto ki = layer.kernels.impl();
        auto bi = layer.bias.impl();
        auto oi = out.impl();
        const bool tx = tracked[0], tk = tracked[1], tb = tracked[2];
        return [xi, ki, bi, oi, n, ci, co, h, w, kh, kw, ho, wo, s, tx, tk, tb]() {
            const double* dy = oi->grad.data();
            const double* px = xi->data.data();
            const double* pk = ki->data.data();
            for (std::size_t b = 0; b < n; ++b) {
                for (std::size_t oc = 0; oc < co; ++oc) {
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const double g = dy[((b * co + oc) * ho + oy) * wo + ox];
                            if (g == 0.0) {
                                continue;
                            }
                            if (tb) {
                                bi->grad[oc] += g;
                            }
                            for (std::size_t ic = 0; ic < ci; ++ic) {
                                for (std::size_t ky = 0; ky < kh; ++ky) {
                                    const std::size_t xoff =
                                        ((b * ci + ic) * h + oy * s + ky) * w + ox * s;
                                    const std::size_t koff = ((oc * ci + ic) * kh + ky) * kw;
                                    for (std::size_t kx = 0; kx < kw; ++kx) {
                                        if (tk) {
                                            ki->grad[koff + kx] += g * px[xoff + kx];
                                        }
                                        if (tx) {
                                            xi->grad[xoff + kx] += g * pk[koff + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
    });
    return out;
}

void ConvLayer::append_named(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".k", kernels);
    out.emplace_back(prefix + ".b", bias);
}

// ---- pooling ------------------------------------------------------------------

Tensor avg_pool2x2(const Tensor& x) {
    if (x.ndim() != 4) {
        throw std::invalid_argument("avg_pool2x2: expected [n x c x h x w] input, got " +
                                    shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = (h + 1) / 2;
    const std::size_t wo = (w + 1) / 2;
    Tensor out = Tensor::zeros({n, c, ho, wo});
    {
        const double* px = x.data().data();
        double* po = out.mutable_data().data();
        for (std::size_t b = 0; b < n * c; ++b) {
            const double* plane = px + b * h * w;
            double* oplane = po + b * ho * wo;
            for (std::size_t oy = 0; oy < ho; ++oy) {
                const std::size_t y1 = std::min(2 * oy + 2, h);
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    const std::size_t x1 = std::min(2 * ox + 2, w);
                    double acc = 0.0;
                    for (std::size_t y = 2 * oy; y < y1; ++y) {
                        for (std::size_t xx = 2 * ox; xx < x1; ++xx) {
                            acc += plane[y * w + xx];
                        }
                    }
                    const double cnt = static_cast<double>((y1 - 2 * oy) * (x1 - 2 * ox));
                    oplane[oy * wo + ox] = acc / cnt;
                }
            }
        }
    }
    maybe_record({x}, out, [&](const std::vector<bool>&) {
        auto xi = x.impl();
        auto oi = out.impl();
        return [xi, oi, n, c, h, w, ho, wo]() {
            const double* dy = oi->grad.data();
            double* dx = xi->grad.data();
            for (std::size_t b = 0; b < n * c; ++b) {
                const double* dplane = dy + b * ho * wo;
                double* xplane = dx + b * h * w;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::size_t y1 = std::min(2 * oy + 2, h);
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const std::size_t x1 = std::min(2 * ox + 2, w);
                        const double cnt = static_cast<double>((y1 - 2 * oy) * (x1 - 2 * ox));
                        const double g = dplane[oy * wo + ox] / cnt;
                        for (std::size_t y = 2 * oy; y < y1; ++y) {
                            for (std::size_t xx = 2 * ox; xx < x1; ++xx) {
                                xplane[y * w + xx] += g;
                            }
                        }
                    }
                }
            }
        };
    });
    return out;
}

// ---- attention ------------------------------------------------------------------

MultiHeadAttention::MultiHeadAttention(std::size_t model_dim, std::size_t heads, Rng& rng)
    : wq(model_dim, model_dim, rng),
      wk(model_dim, model_dim, rng),
      wv(model_dim, model_dim, rng),
      wo(model_dim, model_dim, rng),
      heads_(heads) {
    if (heads == 0 || model_dim % heads != 0) {
        throw std::invalid_argument("attention: model_dim " + std::to_string(model_dim) +
                                    " is not divisible by heads " + std::to_string(heads));
    }
}

Tensor MultiHeadAttention::forward(const Tensor& q, const Tensor& k, const Tensor& v) const {
    const std::size_t d = model_dim();
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 || q.dim(1) != d || k.dim(1) != d ||
        v.dim(1) != d || k.dim(0) != v.dim(0)) {
        throw std::invalid_argument("attention: inputs must be [len x " + std::to_string(d) +
                                    "] with matching key/value lengths");
    }
    const Tensor qp = linear_forward(wq, q);
    const Tensor kp = linear_forward(wk, k);
    const Tensor vp = linear_forward(wv, v);
    const std::size_t dh = d / heads_;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> head_outs;
    head_outs.reserve(heads_);
    for (std::size_t i = 0; i < heads_; ++i) {
        const Tensor qh = slice_cols(qp, i * dh, dh);
        const Tensor kh = slice_cols(kp, i * dh, dh);
        const Tensor vh = slice_cols(vp, i * dh, dh);
        const Tensor weights = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
        head_outs.push_back(matmul(weights, vh));
    }
    return linear_forward(wo, concat_cols(head_outs));
}

std::vector<Tensor> MultiHeadAttention::params() const {
    return {wq.W, wq.b, wk.W, wk.b, wv.W, wv.b, wo.W, wo.b};
}

void MultiHeadAttention::append_named(const std::string& prefix, NamedParams& out) const {
    wq.append_named(prefix + ".q", out);
    wk.append_named(prefix + ".k", out);
    wv.append_named(prefix + ".v", out);
    wo.append_named(prefix + ".o", out);
}

// ---- transformer ----------------------------------------------------------------

TransformerEncoder::TransformerEncoder(std::size_t context_len, std::size_t model_dim,
                                       std::size_t heads, std::size_t mlp_hidden,
                                       std::size_t n_layers, Rng& rng)
    : pos_emb(Tensor::randn({context_len, model_dim}, rng, kInitStddev, true)),
      mask_token(Tensor::randn({model_dim}, rng, kInitStddev, true)),
      heads_(heads) {
    layers.reserve(n_layers);
    for (std::size_t i = 0; i < n_layers; ++i) {
        Layer layer;
        layer.attn = MultiHeadAttention(model_dim, heads, rng);
        layer.mlp = Mlp(model_dim, mlp_hidden, model_dim, rng);
        layer.ln1_gamma = Tensor::full({model_dim}, 1.0, true);
        layer.ln1_beta = Tensor::zeros({model_dim}, true);
        layer.ln2_gamma = Tensor::full({model_dim}, 1.0, true);
        layer.ln2_beta = Tensor::zeros({model_dim}, true);
        layers.push_back(std::move(layer));
    }
}

Tensor TransformerEncoder::encode(const Tensor& seq) const {
    if (seq.ndim() != 2 || seq.dim(0) != context_len() || seq.dim(1) != model_dim()) {
        throw std::invalid_argument("transformer: expected [" + std::to_string(context_len()) +
                                    " x " + std::to_string(model_dim()) + "] sequence, got " +
                                    shape_str(seq.shape()));
    }
    Tensor x = seq;
    for (const Layer& layer : layers) {
        const Tensor h1 = layer_norm(x, layer.ln1_gamma, layer.ln1_beta, kLayerNormEps);
        x = add(x, layer.attn.forward(h1, h1, h1));
        const Tensor h2 = layer_norm(x, layer.ln2_gamma, layer.ln2_beta, kLayerNormEps);
        x = add(x, mlp_forward(layer.mlp, h2));
    }
    return x;
}

std::vector<Tensor> TransformerEncoder::params() const {
    std::vector<Tensor> out;
    for (const Layer& layer : layers) {
        for (const Tensor& p : layer.attn.params()) {
            out.push_back(p);
        }
        out.push_back(layer.ln1_gamma);
        out.push_back(layer.ln1_beta);
        for (const Tensor& p : layer.mlp.params()) {
            out.push_back(p);
        }
        out.push_back(layer.ln2_gamma);
        out.push_back(layer.ln2_beta);
    }
    out.push_back(pos_emb);
    out.push_back(mask_token);
    return out;
}

void TransformerEncoder::append_named(const std::string& prefix, NamedParams& out) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string lp = prefix + ".l" + std::to_string(i);
        layers[i].attn.append_named(lp + ".attn", out);
        out.emplace_back(lp + ".ln1.g", layers[i].ln1_gamma);
        out.emplace_back(lp + ".ln1.b", layers[i].ln1_beta);
        layers[i].mlp.append_named(lp + ".mlp", out);
        out.emplace_back(lp + ".ln2.g", layers[i].ln2_gamma);
        out.emplace_back(lp + ".ln2.b", layers[i].ln2_beta);
    }
    out.emplace_back(prefix + ".pos", pos_emb);
    out.emplace_back(prefix + ".mask_token", mask_token);
}

// ---- losses ---------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
    if (logits.ndim() != 2 || logits.dim(0) != labels.size()) {
        throw std::invalid_argument("cross_entropy: logits " + shape_str(logits.shape()) +
                                    " do not match " + std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    for (const std::size_t label : labels) {
        if (label >= k) {
            throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                        " out of range for " + std::to_string(k) + " classes");
        }
    }
    auto probs = std::make_shared<std::vector<double>>(n * k);
    double total = 0.0;
    {
        const double* pl = logits.data().data();
        for (std::size_t r = 0; r < n; ++r) {
            const double* row = pl + r * k;
            double mx = row[0];
            for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
            double denom = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                (*probs)[r * k + j] = std::exp(row[j] - mx);
                denom += (*probs)[r * k + j];
            }
            for (std::size_t j = 0; j < k; ++j) (*probs)[r * k + j] /= denom;
            total += mx + std::log(denom) - row[labels[r]];
        }
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(n));
    std::vector<std::size_t> owned_labels(labels.begin(), labels.end());
    maybe_record({logits}, out, [&](const std::vector<bool>&) {
        auto li = logits.impl();
        auto oi = out.impl();
        return [li, oi, probs, owned_labels, n, k]() {
            const double g = oi->grad[0] / static_cast<double>(n);
            double* dl = li->grad.data();
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t j = 0; j < k; ++j) {
                    const double indicator = (j == owned_labels[r]) ? 1.0 : 0.0;
                    dl[r * k + j] += g * ((*probs)[r * k + j] - indicator);
                }
            }
        };
    });
    return out;
}

std::size_t param_count(const std::vector<Tensor>& params) {
    std::size_t total = 0;
    for (const Tensor& p : params) {
        total += p.numel();
    }
    return total;
}

}  // namespace mcmkd
