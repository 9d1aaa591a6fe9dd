#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mcmkd/rng.hpp"

namespace mcmkd {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first needed; then data.size()
    bool requires_grad = false;
    int tape_id = -1;            // node index on the tape that produced this tensor
    std::uint64_t tape_serial = 0;  // identifies which tape the id refers to

    std::size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), 0.0);
        }
    }
};

}  // namespace detail

/// Dense row-major f64 tensor. Copies are shallow handles to shared storage;
/// values are written only at creation, by the optimizer, or through
/// mutable_data() (tests, initialization). Gradients live beside the data and
/// accumulate additively across backward() calls until zero_grad().
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    /// i.i.d. N(0, stddev^2) entries drawn from rng in row-major order.
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t ndim() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape[i]; }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    std::span<double> mutable_data() { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const;
    std::span<double> grad_buffer();
    void zero_grad();

    int tape_id() const { return impl_->tape_id; }

    /// Value of a one-element tensor.
    double value() const;
    double at(std::span<const std::size_t> index) const;
    double at(std::initializer_list<std::size_t> index) const;

    /// Deep copy of values; the copy is a leaf (no tape link, no grad).
    Tensor clone() const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Records the operations of one training step. Constructing a Tape makes it
/// the active tape of the current thread; destruction restores the previous
/// one. A tensor produced under a tape must not be reused under a later tape
/// (fresh graph per step).
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    struct Node {
        std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
        std::shared_ptr<detail::TensorImpl> output;
        std::function<void()> backward_fn;
    };

    int record(std::vector<std::shared_ptr<detail::TensorImpl>> inputs,
               std::shared_ptr<detail::TensorImpl> output,
               std::function<void()> backward_fn);

    /// True if grad should flow out of t under this tape: t is a parameter or
    /// was produced by a node recorded here.
    bool tracks(const detail::TensorImpl& t) const {
        return t.requires_grad || (t.tape_id >= 0 && t.tape_serial == serial_);
    }
    bool tracks(const Tensor& t) const { return tracks(*t.impl()); }

    void backward_from(const Tensor& loss);

    std::size_t size() const { return nodes_.size(); }
    std::uint64_t serial() const { return serial_; }

private:
    std::vector<Node> nodes_;
    std::uint64_t serial_;
    Tape* prev_ = nullptr;
};

/// Seeds d(loss)/d(loss)=1 and walks the active tape in reverse. Every
/// reachable requires_grad tensor accumulates its gradient additively;
/// intermediate (tape-produced) gradients are reset at the start of each call
/// so repeated calls add exactly one full gradient each.
void backward(const Tensor& loss);

void zero_grad(std::span<Tensor> params);

// ---- differentiable ops ----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

/// Elementwise ops accept identical shapes, or b as a trailing-dimension
/// vector broadcast across leading dimensions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double c);

Tensor transpose(const Tensor& a);  // 2-D only
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);

/// Softmax over the last axis, computed with per-row max subtraction.
Tensor softmax(const Tensor& x);

/// Exact GELU x * Phi(x) with Phi the standard normal CDF (erf-based).
Tensor gelu(const Tensor& x);

Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// Per-row normalization over the last axis (population variance), then
/// elementwise affine gamma * xhat + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

/// Sum of all elements, as a scalar tensor.
Tensor sum(const Tensor& x);

bool all_finite(const Tensor& x);

}  // namespace mcmkd
