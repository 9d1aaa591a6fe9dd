#include "mcmkd/tensor.hpp"

#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "record.hpp"

namespace mcmkd {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (const std::size_t d : shape) {
        n *= d;
    }
    return n;
}

void check_positive_dims(const Shape& shape) {
    for (const std::size_t d : shape) {
        if (d == 0) {
            throw std::invalid_argument("tensor shape has a zero dimension: " + shape_str(shape));
        }
    }
}

[[noreturn]] void dim_error(const std::string& op, const Shape& a, const Shape& b,
                            const std::string& detail) {
    throw std::invalid_argument(op + ": " + detail + ": " + shape_str(a) + " vs " + shape_str(b));
}

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_tape_serial{1};

}  // namespace

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) {
            os << 'x';
        }
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_positive_dims(shape);
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->data.assign(shape_numel(shape), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    check_positive_dims(shape);
    if (shape_numel(shape) != data.size()) {
        throw std::invalid_argument("from_data: shape " + shape_str(shape) + " needs " +
                                    std::to_string(shape_numel(shape)) + " values, got " +
                                    std::to_string(data.size()));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    rng.fill_normal(t.mutable_data(), stddev);
    return t;
}

std::span<const double> Tensor::grad() const {
    if (impl_->grad.empty()) {
        throw std::logic_error("tensor has no gradient buffer");
    }
    return impl_->grad;
}

std::span<double> Tensor::grad_buffer() {
    impl_->ensure_grad();
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) {
        std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }
}

double Tensor::value() const {
    if (numel() != 1) {
        throw std::logic_error("value(): tensor is not one-element, shape " + shape_str(shape()));
    }
    return impl_->data[0];
}

double Tensor::at(std::span<const std::size_t> index) const {
    if (index.size() != ndim()) {
        throw std::logic_error("at(): index rank mismatch");
    }
    std::size_t offset = 0;
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= impl_->shape[i]) {
            throw std::out_of_range("at(): index out of range");
        }
        offset = offset * impl_->shape[i] + index[i];
    }
    return impl_->data[offset];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    return at(std::span<const std::size_t>(index.begin(), index.size()));
}

Tensor Tensor::clone() const {
    return from_data(impl_->shape, impl_->data, false);
}

// ---- Tape -------------------------------------------------------------------

Tape::Tape() : serial_(g_tape_serial.fetch_add(1)) {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() {
    g_active_tape = prev_;
}

Tape* Tape::active() {
    return g_active_tape;
}

int Tape::record(std::vector<std::shared_ptr<detail::TensorImpl>> inputs,
                 std::shared_ptr<detail::TensorImpl> output,
                 std::function<void()> backward_fn) {
    for (const auto& in : inputs) {
        if (tracks(*in)) {
            in->ensure_grad();
        }
    }
    output->ensure_grad();
    const int id = static_cast<int>(nodes_.size());
    output->tape_id = id;
    output->tape_serial = serial_;
    nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward_fn)});
    return id;
}

void Tape::backward_from(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                    shape_str(loss.shape()));
    }
    const auto& li = loss.impl();
    if (li->tape_serial != serial_ || li->tape_id < 0 ||
        nodes_[static_cast<std::size_t>(li->tape_id)].output != li) {
        throw std::invalid_argument("backward: loss was not produced on the active tape");
    }
    // Reset intermediate gradients so each call contributes exactly one full
    // gradient; leaf gradients are left to accumulate.
    for (auto& node : nodes_) {
        std::fill(node.output->grad.begin(), node.output->grad.end(), 0.0);
    }
    li->grad[0] = 1.0;
    for (int i = li->tape_id; i >= 0; --i) {
        nodes_[static_cast<std::size_t>(i)].backward_fn();
    }
}

void backward(const Tensor& loss) {
    Tape* tape = Tape::active();
    if (tape == nullptr) {
        throw std::invalid_argument("backward: no active tape");
    }
    tape->backward_from(loss);
}

void zero_grad(std::span<Tensor> params) {
    for (Tensor& p : params) {
        p.zero_grad();
    }
}

// ---- op helpers --------------------------------------------------------------

namespace {

using detail::maybe_record;

enum class EwKind { Add, Sub, Mul };

bool trailing_broadcast(const Shape& a, const Shape& b) {
    return b.size() == 1 && !a.empty() && b[0] == a.back();
}

}  // namespace

// ---- matmul -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        dim_error("matmul", a.shape(), b.shape(), "inner dimensions disagree");
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    {
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        double* pc = out.mutable_data().data();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double av = pa[i * k + kk];
                const double* pbrow = pb + kk * n;
                double* pcrow = pc + i * n;
                for (std::size_t j = 0; j < n; ++j) {
                    pcrow[j] += av * pbrow[j];
                }
            }
        }
    }
    maybe_record({a, b}, out, [&](const std::vector<bool>& tracked) {
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        const bool ta = tracked[0], tb = tracked[1];
        return [ai, bi, oi, m, k, n, ta, tb]() {
            const double* dc = oi->grad.data();
            if (ta) {
                // dA += dC * B^T
                double* da = ai->grad.data();
                const double* pb = bi->data.data();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const double* dcrow = dc + i * n;
                        const double* pbrow = pb + kk * n;
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) {
                            acc += dcrow[j] * pbrow[j];
                        }
                        da[i * k + kk] += acc;
                    }
                }
            }
            if (tb) {
                // dB += A^T * dC
                double* db = bi->grad.data();
                const double* pa = ai->data.data();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const double av = pa[i * k + kk];
                        const double* dcrow = dc + i * n;
                        double* dbrow = db + kk * n;
                        for (std::size_t j = 0; j < n; ++j) {
                            dbrow[j] += av * dcrow[j];
                        }
                    }
                }
            }
        };
    });
    return out;
}

// ---- elementwise -------------------------------------------------------------

namespace {

Tensor elementwise(const Tensor& a, const Tensor& b, EwKind kind, const char* name) {
    const bool same = a.shape() == b.shape();
    const bool bcast = !same && trailing_broadcast(a.shape(), b.shape());
    if (!same && !bcast) {
        dim_error(name, a.shape(), b.shape(),
                  "shapes are not broadcast-compatible (b must match or be a trailing vector)");
    }
    const std::size_t n = a.numel();
    const std::size_t w = b.numel();
    Tensor out = Tensor::zeros(a.shape());
    {
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        double* po = out.mutable_data().data();
        switch (kind) {
            case EwKind::Add:
                for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[same ? i : i % w];
                break;
            case EwKind::Sub:
                for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[same ? i : i % w];
                break;
            case EwKind::Mul:
                for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[same ? i : i % w];
                break;
        }
    }
    maybe_record({a, b}, out, [&](const std::vector<bool>& tracked) {
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        const bool ta = tracked[0], tb = tracked[1];
        return [ai, bi, oi, kind, same, n, w, ta, tb]() {
            const double* dc = oi->grad.data();
            if (ta) {
                double* da = ai->grad.data();
                if (kind == EwKind::Mul) {
                    const double* pb = bi->data.data();
                    for (std::size_t i = 0; i < n; ++i) da[i] += dc[i] * pb[same ? i : i % w];
                } else {
                    for (std::size_t i = 0; i < n; ++i) da[i] += dc[i];
                }
            }
            if (tb) {
                double* db = bi->grad.data();
                const double sign = (kind == EwKind::Sub) ? -1.0 : 1.0;
                if (kind == EwKind::Mul) {
                    const double* pa = ai->data.data();
                    for (std::size_t i = 0; i < n; ++i) db[same ? i : i % w] += dc[i] * pa[i];
                } else {
                    for (std::size_t i = 0; i < n; ++i) db[same ? i : i % w] += sign * dc[i];
                }
            }
        };
    });
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Mul, "mul"); }

Tensor scale(const Tensor& a, double c) {
    const std::size_t n = a.numel();
    Tensor out = Tensor::zeros(a.shape());
    {
        const double* pa = a.data().data();
        double* po = out.mutable_data().data();
        for (std::size_t i = 0; i < n; ++i) po[i] = c * pa[i];
    }
    maybe_record({a}, out, [&](const std::vector<bool>&) {
        auto ai = a.impl();
        auto oi = out.impl();
        return [ai, oi, c, n]() {
            double* da = ai->grad.data();
            const double* dc = oi->grad.data();
            for (std::size_t i = 0; i < n; ++i) da[i] += c * dc[i];
        };
    });
    return out;
}

// ---- shape ops ----------------------------------------------------------------

Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) {
        throw std::invalid_argument("transpose: expected 2-D tensor, got " + shape_str(a.shape()));
    }
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor out = Tensor::zeros({c, r});
    {
        const double* pa = a.data().data();
        double* po = out.mutable_data().data();
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                po[j * r + i] = pa[i * c + j];
            }
        }
    }
    maybe_record({a}, out, [&](const std::vector<bool>&) {
        auto ai = a.impl();
        auto oi = out.impl();
        return [ai, oi, r, c]() {
            double* da = ai->grad.data();
            const double* dc = oi->grad.data();
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    da[i * c + j] += dc[j * r + i];
                }
            }
        };
    });
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    check_positive_dims(shape);
    if (shape_numel(shape) != a.numel()) {
        dim_error("reshape", a.shape(), shape, "element counts disagree");
    }
    Tensor out = Tensor::from_data(std::move(shape), {a.data().begin(), a.data().end()});
    maybe_record({a}, out, [&](const std::vector<bool>&) {
        auto ai = a.impl();
        auto oi = out.impl();
        return [ai, oi]() {
            double* da = ai->grad.data();
            const double* dc = oi->grad.data();
            for (std::size_t i = 0; i < ai->numel(); ++i) da[i] += dc[i];
        };
    });
    return out;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
    if (a.ndim() != 2 || begin + count > a.dim(1) || count == 0) {
        throw std::invalid_argument("slice_cols: invalid range [" + std::to_string(begin) + ", " +
                                    std::to_string(begin + count) + ") for " + shape_str(a.shape()));
    }
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor out = Tensor::zeros({r, count});
    {
        const double* pa = a.data().data();
        double* po = out.mutable_data().data();
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < count; ++j) {
                po[i * count + j] = pa[i * c + begin + j];
            }
        }
    }
    maybe_record({a}, out, [&](const std::vector<bool>&) {
        auto ai = a.impl();
        auto oi = out.impl();
        return [ai, oi, r, c, begin, count]() {
            double* da = ai->grad.data();
            const double* dc = oi->grad.data();
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < count; ++j) {
                    da[i * c + begin + j] += dc[i * count + j];
                }
            }
        };
    });
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_cols: no parts");
    }
    const std::size_t r = parts[0].dim(0);
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != 2 || p.dim(0) != r) {
            dim_error("concat_cols", parts[0].shape(), p.shape(), "row counts disagree");
        }
        total += p.dim(1);
    }
    Tensor out = Tensor::zeros({r, total});
    {
        double* po = out.mutable_data().data();
        std::size_t off = 0;
        for (const Tensor& p : parts) {
            const std::size_t c = p.dim(1);
            const double* pp = p.data().data();
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    po[i * total + off + j] = pp[i * c + j];
                }
            }
            off += c;
        }
    }
    maybe_record(parts, out, [&](const std::vector<bool>& tracked) {
        std::vector<std::shared_ptr<detail::TensorImpl>> impls;
        impls.reserve(parts.size());
        for (const Tensor& p : parts) {
            impls.push_back(p.impl());
        }
        auto oi = out.impl();
        return [impls, oi, tracked, r, total]() {
            const double* dc = oi->grad.data();
            std::size_t off = 0;
            for (std::size_t pi = 0; pi < impls.size(); ++pi) {
                const std::size_t c = impls[pi]->shape[1];
                if (tracked[pi]) {
                    double* da = impls[pi]->grad.data();
                    for (std::size_t i = 0; i < r; ++i) {
                        for (std::size_t j = 0; j < c; ++j) {
                            da[i * c + j] += dc[i * total + off + j];
                        }
                    }
                }
                off += c;
            }
        };
    });
    return out;
}

// ---- nonlinearities ------------------------------------------------------------

Tensor softmax(const Tensor& x) {
    if (x.ndim() == 0 || x.shape().back() == 0) {
        throw std::invalid_argument("softmax: needs a non-empty last axis");
    }
    const std::size_t w = x.shape().back();
    const std::size_t rows = x.numel() / w;
    Tensor out = Tensor::zeros(x.shape());
    {
        const double* px = x.data().data();
        double* po = out.mutable_data().data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* row = px + r * w;
            double* orow = po + r * w;
            double mx = row[0];
            for (std::size_t j = 1; j < w; ++j) mx = std::max(mx, row[j]);
            double denom = 0.0;
            for (std::size_t j = 0; j < w; ++j) {
                orow[j] = std::exp(row[j] - mx);
                denom += orow[j];
            }
            for (std::size_t j = 0; j < w; ++j) orow[j] /= denom;
        }
    }
    maybe_record({x}, out, [&](const std::vector<bool>&) {
        auto xi = x.impl();
        auto oi = out.impl();
        return [xi, oi, rows, w]() {
            double* dx = xi->grad.data();
            const double* dy = oi->grad.data();
            const double* y = oi->data.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* yrow = y + r * w;
                const double* dyrow = dy + r * w;
                double dot = 0.0;
                for (std::size_t j = 0; j < w; ++j) dot += dyrow[j] * yrow[j];
                double* dxrow = dx + r * w;
                for (std::size_t j = 0; j < w; ++j) dxrow[j] += (dyrow[j] - dot) * yrow[j];
            }
        };
    });
    return out;
}

namespace {

double normal_cdf(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2));
}

}  // namespace

Tensor gelu(const Tensor& x) {
    const std::size_t n = x.numel();
    Tensor out = Tensor::zeros(x.shape());
    {
        const double* px = x.data().data();
        double* po = out.mutable_data().data();
        for (std::size_t i = 0; i < n; ++i) po[i] = px[i] * normal_cdf(px[i]);
    }
    maybe_record({x}, out, [&](const std::vector<bool>&) {
        auto xi = x.impl();
        auto oi = out.impl();
        return [xi, oi, n]() {
            double* dx = xi->grad.data();
            const double* dy = oi->grad.data();
            const double* px = xi->data.data();
            for (std::size_t i = 0; i < n; ++i) {
                const double v = px[i];
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                dx[i] += dy[i] * (normal_cdf(v) + v * pdf);
            }
        };
    });
    return out;
}

Tensor tanh(const Tensor& x) {
    const std::size_t n = x.numel();
    Tensor out = Tensor::zeros(x.shape());
    {
        const double* px = x.data().data();
        double* po = out.mutable_data().data();
        for (std::size_t i = 0; i < n; ++i) po[i] = std::tanh(px[i]);
    }
    maybe_record({x}, out, [&](const std::vector<bool>&) {
        auto xi = x.impl();
        auto oi = out.impl();
        return [xi, oi, n]() {
            double* dx = xi->grad.data();
            const double* dy = oi->grad.data();
            const double* y = oi->data.data();
            for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * (1.0 - y[i] * y[i]);
        };
    });
    return out;
}

Tensor sigmoid(const Tensor& x) {
    const std::size_t n = x.numel();
    Tensor out = Tensor::zeros(x.shape());
    {
        const double* px = x.data().data();
        double* po = out.mutable_data().data();
        for (std::size_t i = 0; i < n; ++i) {
            const double v = px[i];
            if (v >= 0.0) {
                po[i] = 1.0 / (1.0 + std::exp(-v));
            } else {
                const double e = std::exp(v);
                po[i] = e / (1.0 + e);
            }
        }
    }
    maybe_record({x}, out, [&](const std::vector<bool>&) {
        auto xi = x.impl();
        auto oi = out.impl();
        return [xi, oi, n]() {
            double* dx = xi->grad.data();
            const double* dy = oi->grad.data();
            const double* y = oi->data.data();
            for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * y[i] * (1.0 - y[i]);
        };
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.ndim() == 0) {
        throw std::invalid_argument("layer_norm: scalar input");
    }
    const std::size_t d = x.shape().back();
    if (gamma.numel() != d || beta.numel() != d) {
        dim_error("layer_norm", gamma.shape(), beta.shape(),
                  "gamma/beta must have " + std::to_string(d) + " elements");
    }
    if (eps <= 0.0) {
        throw std::invalid_argument("layer_norm: eps must be positive");
    }
    const std::size_t rows = x.numel() / d;
    Tensor out = Tensor::zeros(x.shape());
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    {
        const double* px = x.data().data();
        const double* pg = gamma.data().data();
        const double* pb = beta.data().data();
        double* po = out.mutable_data().data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* row = px + r * d;
            double mu = 0.0;
            for (std::size_t j = 0; j < d; ++j) mu += row[j];
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double c = row[j] - mu;
                var += c * c;
            }
            var /= static_cast<double>(d);
            const double inv = 1.0 / std::sqrt(var + eps);
            (*inv_std)[r] = inv;
            for (std::size_t j = 0; j < d; ++j) {
                const double xh = (row[j] - mu) * inv;
                (*xhat)[r * d + j] = xh;
                po[r * d + j] = pg[j] * xh + pb[j];
            }
        }
    }
    maybe_record({x, gamma, beta}, out, [&](const std::vector<bool>& tracked) {
        auto xi = x.impl();
        auto gi = gamma.impl();
        auto bi = beta.impl();
        auto oi = out.impl();
        const bool tx = tracked[0], tg = tracked[1], tb = tracked[2];
        return [xi, gi, bi, oi, xhat, inv_std, rows, d, tx, tg, tb]() {
            const double* dy = oi->grad.data();
            const double* pg = gi->data.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* dyrow = dy + r * d;
                const double* xhrow = xhat->data() + r * d;
                if (tg) {
                    double* dg = gi->grad.data();
                    for (std::size_t j = 0; j < d; ++j) dg[j] += dyrow[j] * xhrow[j];
                }
                if (tb) {
                    double* db = bi->grad.data();
                    for (std::size_t j = 0; j < d; ++j) db[j] += dyrow[j];
                }
                if (tx) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = dyrow[j] * pg[j];
                        m1 += dxh;
                        m2 += dxh * xhrow[j];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    double* dx = xi->grad.data();
                    const double inv = (*inv_std)[r];
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = dyrow[j] * pg[j];
                        dx[r * d + j] += inv * (dxh - m1 - xhrow[j] * m2);
                    }
                }
            }
        };
    });
    return out;
}

Tensor sum(const Tensor& x) {
    const std::size_t n = x.numel();
    double acc = 0.0;
    for (const double v : x.data()) {
        acc += v;
    }
    Tensor out = Tensor::scalar(acc);
    maybe_record({x}, out, [&](const std::vector<bool>&) {
        auto xi = x.impl();
        auto oi = out.impl();
        return [xi, oi, n]() {
            double* dx = xi->grad.data();
            const double g = oi->grad[0];
            for (std::size_t i = 0; i < n; ++i) dx[i] += g;
        };
    });
    return out;
}

bool all_finite(const Tensor& x) {
    for (const double v : x.data()) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

}  // namespace mcmkd
