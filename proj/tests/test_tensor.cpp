#include <cmath>
#include <vector>

#include "doctest.h"
#include "mcmkd/adamw.hpp"
#include "mcmkd/gradcheck.hpp"
#include "mcmkd/tensor.hpp"

using namespace mcmkd;

namespace {

Tensor leaf(Shape shape, std::vector<double> data) {
    return Tensor::from_data(std::move(shape), std::move(data), true);
}

}  // namespace

TEST_CASE("tensor construction and access") {
    Tensor z = Tensor::zeros({2, 3});
    CHECK(z.numel() == 6);
    CHECK(z.at({1, 2}) == 0.0);
    CHECK_FALSE(z.requires_grad());

    Tensor f = Tensor::full({2, 2}, 1.5);
    for (double v : f.data()) CHECK(v == 1.5);

    Tensor s = Tensor::scalar(-3.25);
    CHECK(s.value() == -3.25);
    CHECK(s.numel() == 1);

    Tensor d = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    CHECK(d.at({0, 0}) == 1.0);
    CHECK(d.at({0, 1}) == 2.0);
    CHECK(d.at({1, 0}) == 3.0);
    CHECK(d.at({1, 1}) == 4.0);
}

TEST_CASE("copies are shallow, clone is deep") {
    Tensor a = Tensor::from_data({2}, {1, 2});
    Tensor b = a;
    CHECK(b.same_storage(a));
    b.mutable_data()[0] = 9;
    CHECK(a.at({0}) == 9.0);

    Tensor c = a.clone();
    CHECK_FALSE(c.same_storage(a));
    c.mutable_data()[0] = 5;
    CHECK(a.at({0}) == 9.0);
    CHECK_FALSE(c.requires_grad());
}

TEST_CASE("randn is reproducible and respects stddev") {
    Rng r1(42), r2(42);
    Tensor a = Tensor::randn({4, 4}, r1, 0.5);
    Tensor b = Tensor::randn({4, 4}, r2, 0.5);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);

    Rng r3(42);
    Tensor c = Tensor::randn({4, 4}, r3, 1.0);
    for (std::size_t i = 0; i < a.numel(); ++i) {
        CHECK(a.data()[i] == doctest::Approx(0.5 * c.data()[i]));
    }
}

TEST_CASE("matmul worked examples") {
    // Identity times A leaves A unchanged.
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    Tape tape;
    Tensor out = matmul(eye, a);
    for (std::size_t i = 0; i < 6; ++i) CHECK(out.data()[i] == a.data()[i]);

    // [[1,2]] * [[3],[4]] = [[11]].
    Tensor row = Tensor::from_data({1, 2}, {1, 2});
    Tensor col = Tensor::from_data({2, 1}, {3, 4});
    CHECK(matmul(row, col).value() == 11.0);
}

TEST_CASE("matmul gradient against finite differences") {
    Rng rng(7);
    Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor b = Tensor::randn({4, 2}, rng, 1.0, true);
    std::vector<Tensor> inputs{a, b};
    auto res = grad_check([&] { return sum(matmul(a, b)); }, inputs);
    CHECK_MESSAGE(res.pass, res.worst, " rel_err=", res.max_rel_err);
}

TEST_CASE("elementwise op gradients") {
    Rng rng(11);
    Tensor a = Tensor::randn({2, 5}, rng, 1.0, true);
    Tensor b = Tensor::randn({2, 5}, rng, 1.0, true);
    std::vector<Tensor> ab{a, b};

    SUBCASE("add") {
        auto res = grad_check([&] { return sum(mul(add(a, b), add(a, b))); }, ab);
        CHECK_MESSAGE(res.pass, res.worst);
    }
    SUBCASE("sub") {
        auto res = grad_check([&] { return sum(mul(sub(a, b), sub(a, b))); }, ab);
        CHECK_MESSAGE(res.pass, res.worst);
    }
    SUBCASE("mul") {
        auto res = grad_check([&] { return sum(mul(a, b)); }, ab);
        CHECK_MESSAGE(res.pass, res.worst);
    }
    SUBCASE("scale") {
        std::vector<Tensor> just_a{a};
        auto res = grad_check([&] { return sum(scale(mul(a, a), -2.5)); }, just_a);
        CHECK_MESSAGE(res.pass, res.worst);
    }
}

TEST_CASE("broadcast add of a trailing vector") {
    Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tensor b = Tensor::from_data({3}, {10, 20, 30}, true);
    {
        Tape tape;
        Tensor out = add(a, b);
        CHECK(out.at({0, 0}) == 11.0);
        CHECK(out.at({1, 2}) == 36.0);
    }
    // The broadcast dimension sums gradients across rows.
    std::vector<Tensor> inputs{a, b};
    auto res = grad_check([&] { return sum(mul(add(a, b), add(a, b))); }, inputs);
    CHECK_MESSAGE(res.pass, res.worst);
}

TEST_CASE("shape reorganization ops") {
    Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);

    SUBCASE("transpose values and gradient") {
        {
            Tape tape;
            Tensor t = transpose(a);
            CHECK(t.dim(0) == 3);
            CHECK(t.dim(1) == 2);
            CHECK(t.at({0, 1}) == 4.0);
            CHECK(t.at({2, 0}) == 3.0);
        }
        std::vector<Tensor> inputs{a};
        auto res = grad_check([&] { return sum(mul(transpose(a), transpose(a))); }, inputs);
        CHECK_MESSAGE(res.pass, res.worst);
    }
    SUBCASE("reshape preserves row-major order") {
        Tape tape;
        Tensor r = reshape(a, {3, 2});
        CHECK(r.at({0, 1}) == 2.0);
        CHECK(r.at({2, 1}) == 6.0);
    }
    SUBCASE("slice_cols and concat_cols invert each other") {
        {
            Tape tape;
            Tensor left = slice_cols(a, 0, 2);
            Tensor right = slice_cols(a, 2, 1);
            Tensor glued = concat_cols({left, right});
            for (std::size_t i = 0; i < a.numel(); ++i) CHECK(glued.data()[i] == a.data()[i]);
        }
        std::vector<Tensor> inputs{a};
        auto res = grad_check(
            [&] {
                Tensor glued = concat_cols({slice_cols(a, 2, 1), slice_cols(a, 0, 2)});
                return sum(mul(glued, glued));
            },
            inputs);
        CHECK_MESSAGE(res.pass, res.worst);
    }
}

TEST_CASE("softmax properties") {
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, -1, 0, 1}, true);
    {
        Tape tape;
        Tensor p = softmax(x);
        for (std::size_t r = 0; r < 2; ++r) {
            double row = 0.0;
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = p.at({r, c});
                CHECK(v > 0.0);
                row += v;
            }
            CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
        }
        // Shift invariance per row: both rows are {1,2,3} up to a constant.
        for (std::size_t c = 0; c < 3; ++c) {
            CHECK(p.at({0, c}) == doctest::Approx(p.at({1, c})).epsilon(1e-12));
        }
    }
    // Max subtraction keeps large logits finite.
    {
        Tape tape;
        Tensor big = Tensor::from_data({1, 2}, {1000.0, 999.0});
        Tensor p = softmax(big);
        CHECK(all_finite(p));
        CHECK(p.at({0, 0}) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
    }
    std::vector<Tensor> inputs{x};
    auto res = grad_check(
        [&] {
            Tensor w = Tensor::from_data({2, 3}, {0.3, -1.2, 0.5, 2.0, 0.1, -0.4});
            return sum(mul(softmax(x), w));
        },
        inputs);
    CHECK_MESSAGE(res.pass, res.worst);
}

TEST_CASE("nonlinearity values and gradients") {
    SUBCASE("gelu closed-form points") {
        Tape tape;
        Tensor x = Tensor::from_data({1, 3}, {0.0, 1.0, -1.0});
        Tensor y = gelu(x);
        CHECK(y.at({0, 0}) == 0.0);
        const double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
        CHECK(y.at({0, 1}) == doctest::Approx(phi1).epsilon(1e-12));
        CHECK(y.at({0, 2}) == doctest::Approx(-(1.0 - phi1)).epsilon(1e-12));
    }
    SUBCASE("tanh and sigmoid closed-form points") {
        Tape tape;
        Tensor x = Tensor::from_data({1, 2}, {0.0, 1.0});
        CHECK(tanh(x).at({0, 1}) == doctest::Approx(std::tanh(1.0)));
        CHECK(sigmoid(x).at({0, 0}) == 0.5);
        CHECK(sigmoid(x).at({0, 1}) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
    }
    Rng rng(13);
    Tensor x = Tensor::randn({3, 4}, rng, 1.5, true);
    std::vector<Tensor> inputs{x};
    SUBCASE("gelu gradient") {
        auto res = grad_check([&] { return sum(gelu(x)); }, inputs);
        CHECK_MESSAGE(res.pass, res.worst);
    }
    SUBCASE("tanh gradient") {
        auto res = grad_check([&] { return sum(mul(tanh(x), tanh(x))); }, inputs);
        CHECK_MESSAGE(res.pass, res.worst);
    }
    SUBCASE("sigmoid gradient") {
        auto res = grad_check([&] { return sum(mul(sigmoid(x), sigmoid(x))); }, inputs);
        CHECK_MESSAGE(res.pass, res.worst);
    }
}

TEST_CASE("layer_norm normalizes rows and differentiates") {
    Tensor x = Tensor::from_data({2, 4}, {1, 2, 3, 4, -2, 0, 2, 8}, true);
    Tensor gamma = Tensor::full({1, 4}, 1.0, true);
    Tensor beta = Tensor::zeros({1, 4}, true);
    {
        Tape tape;
        Tensor y = layer_norm(x, gamma, beta, 1e-5);
        for (std::size_t r = 0; r < 2; ++r) {
            double mean = 0.0, var = 0.0;
            for (std::size_t c = 0; c < 4; ++c) mean += y.at({r, c});
            mean /= 4.0;
            for (std::size_t c = 0; c < 4; ++c) {
                var += (y.at({r, c}) - mean) * (y.at({r, c}) - mean);
            }
            CHECK(mean == doctest::Approx(0.0).epsilon(1e-10));
            CHECK(var / 4.0 == doctest::Approx(1.0).epsilon(1e-3));
        }
    }
    std::vector<Tensor> inputs{x, gamma, beta};
    auto res = grad_check(
        [&] {
            Tensor w = Tensor::from_data({2, 4}, {0.5, -1, 2, 0.25, 1, 1, -3, 0.5});
            return sum(mul(layer_norm(x, gamma, beta, 1e-5), w));
        },
        inputs);
    CHECK_MESSAGE(res.pass, res.worst);
}

TEST_CASE("a tensor used twice accumulates both gradient paths") {
    Tensor x = leaf({1, 1}, {3.0});
    Tape tape;
    // loss = x*x + 2x; dloss/dx = 2x + 2 = 8.
    Tensor loss = add(mul(x, x), scale(x, 2.0));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(8.0));
}

TEST_CASE("backward accumulates across calls until zero_grad") {
    Tensor x = leaf({1, 1}, {2.0});
    Tape tape;
    Tensor loss = mul(x, x);
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(4.0));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(8.0));
    x.zero_grad();
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("tape scoping keeps graphs per step") {
    Tensor x = leaf({1, 1}, {1.5});
    {
        Tape t1;
        Tensor a = mul(x, x);
        backward(a);
    }
    CHECK(x.grad()[0] == doctest::Approx(3.0));
    {
        Tape t2;
        CHECK(Tape::active() == &t2);
        CHECK(t2.size() == 0);
        Tensor b = scale(x, 4.0);
        backward(b);
    }
    CHECK(x.grad()[0] == doctest::Approx(7.0));
    // Constants without requires_grad are not tracked.
    Tape t3;
    Tensor c = Tensor::from_data({1, 1}, {2.0});
    CHECK_FALSE(t3.tracks(c));
    CHECK(t3.tracks(x));
}

TEST_CASE("grad_check rejects a broken backward") {
    // d/dx of x*x is 2x; lie by differentiating through only one factor.
    Tensor x = leaf({1, 1}, {1.0});
    std::vector<Tensor> inputs{x};
    auto res = grad_check(
        [&] {
            Tensor frozen = x.clone();
            return mul(x, frozen);
        },
        inputs);
    CHECK_FALSE(res.pass);
    CHECK(res.max_rel_err > 0.1);
}

TEST_CASE("adamw first step matches the closed form") {
    // With fresh moments, mhat = g, vhat = g^2, so the Adam term is
    // lr * g / (|g| + eps) = lr * sign(g); decay subtracts lr * wd * theta.
    Tensor w = leaf({1, 2}, {1.0, -2.0});
    {
        Tape tape;
        Tensor loss = sum(mul(w, Tensor::from_data({1, 2}, {3.0, -0.5})));
        backward(loss);
    }
    AdamWState st;
    st.lr = 0.1;
    st.weight_decay = 0.01;
    std::vector<Tensor> params{w};
    adamw_step(params, st);

    const double eps = 1e-8;
    const double expect0 = 1.0 - 0.1 * (3.0 / (3.0 + eps)) - 0.1 * 0.01 * 1.0;
    const double expect1 = -2.0 - 0.1 * (-0.5 / (0.5 + eps)) - 0.1 * 0.01 * -2.0;
    CHECK(w.at({0, 0}) == doctest::Approx(expect0).epsilon(1e-9));
    CHECK(w.at({0, 1}) == doctest::Approx(expect1).epsilon(1e-9));
    CHECK(st.step == 1);
    CHECK(st.m.size() == 2);
}

TEST_CASE("adamw two steps match a scalar oracle") {
    const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.1;
    double theta = 0.7, m = 0.0, v = 0.0;
    Tensor w = leaf({1, 1}, {theta});
    AdamWState st;
    st.lr = lr;
    st.weight_decay = wd;
    std::vector<Tensor> params{w};

    for (int step = 1; step <= 2; ++step) {
        w.zero_grad();
        {
            Tape tape;
            backward(mul(w, w));  // g = 2 theta
        }
        const double g = 2.0 * theta;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mhat = m / (1 - std::pow(b1, step));
        const double vhat = v / (1 - std::pow(b2, step));
        theta -= lr * mhat / (std::sqrt(vhat) + eps) + lr * wd * theta;

        adamw_step(params, st);
        CHECK(w.value() == doctest::Approx(theta).epsilon(1e-12));
    }
}

TEST_CASE("adamw decay is decoupled from the gradient") {
    // Zero gradient: the update must be exactly theta *= (1 - lr*wd).
    Tensor w = leaf({1, 1}, {4.0});
    w.grad_buffer();  // zeros
    AdamWState st;
    st.lr = 0.5;
    st.weight_decay = 0.1;
    std::vector<Tensor> params{w};
    adamw_step(params, st);
    CHECK(w.value() == doctest::Approx(4.0 * (1.0 - 0.05)).epsilon(1e-12));
}

TEST_CASE("adamw wrapper zeroes grads and steps in order") {
    Tensor a = leaf({1, 1}, {1.0});
    Tensor b = leaf({1, 1}, {2.0});
    AdamW opt({a, b});
    {
        Tape tape;
        backward(add(mul(a, a), mul(b, b)));
    }
    CHECK(a.grad()[0] == doctest::Approx(2.0));
    opt.step();
    opt.zero_grad();
    CHECK(a.grad()[0] == 0.0);
    CHECK(b.grad()[0] == 0.0);
    CHECK(opt.state().step == 1);
    CHECK(opt.state().m.size() == 2);  // concatenated across params
}

TEST_CASE("all_finite flags non-finite values") {
    Tensor ok = Tensor::from_data({1, 2}, {1.0, -2.0});
    CHECK(all_finite(ok));
    Tensor bad = Tensor::from_data({1, 2}, {1.0, std::nan("")});
    CHECK_FALSE(all_finite(bad));
    Tensor inf = Tensor::from_data({1, 2}, {1.0, std::numeric_limits<double>::infinity()});
    CHECK_FALSE(all_finite(inf));
}
