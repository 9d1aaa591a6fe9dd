#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "mcmkd/blocks.hpp"
#include "mcmkd/gradcheck.hpp"

using namespace mcmkd;

TEST_CASE("linear layer computes x W^T + b") {
    Rng rng(1);
    LinearLayer lin(2, 3, rng);
    lin.W.mutable_data()[0] = 1;  // W = [[1,2],[3,4],[5,6]]
    lin.W.mutable_data()[1] = 2;
    lin.W.mutable_data()[2] = 3;
    lin.W.mutable_data()[3] = 4;
    lin.W.mutable_data()[4] = 5;
    lin.W.mutable_data()[5] = 6;
    lin.b.mutable_data()[0] = 0.5;
    lin.b.mutable_data()[1] = -0.5;
    lin.b.mutable_data()[2] = 0.0;

    Tape tape;
    Tensor x = Tensor::from_data({1, 2}, {1.0, -1.0});
    Tensor y = linear_forward(lin, x);
    CHECK(y.at({0, 0}) == doctest::Approx(1 - 2 + 0.5));
    CHECK(y.at({0, 1}) == doctest::Approx(3 - 4 - 0.5));
    CHECK(y.at({0, 2}) == doctest::Approx(5 - 6 + 0.0));
}

TEST_CASE("linear layer gradient and param registry") {
    Rng rng(2);
    LinearLayer lin(3, 2, rng);
    Tensor x = Tensor::randn({4, 3}, rng, 1.0, true);
    std::vector<Tensor> inputs = lin.params();
    inputs.push_back(x);
    auto res = grad_check(
        [&] {
            Tensor y = linear_forward(lin, x);
            return sum(mul(y, y));
        },
        inputs);
    CHECK_MESSAGE(res.pass, res.worst);

    NamedParams named;
    lin.append_named("fc", named);
    REQUIRE(named.size() == 2);
    CHECK(named[0].first == "fc.w");
    CHECK(named[1].first == "fc.b");
    CHECK(param_count(lin.params()) == 3 * 2 + 2);
}

TEST_CASE("mlp is linear-gelu-linear") {
    Rng rng(3);
    Mlp mlp(2, 4, 2, rng);
    Tensor x = Tensor::randn({3, 2}, rng, 1.0);
    Tape tape;
    Tensor got = mlp_forward(mlp, x);
    Tensor expect = linear_forward(mlp.out, gelu(linear_forward(mlp.hidden, x)));
    for (std::size_t i = 0; i < got.numel(); ++i) {
        CHECK(got.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-14));
    }
}

TEST_CASE("conv2d valid cross-correlation by hand") {
    Rng rng(4);
    ConvLayer conv(1, 1, 2, 1, rng);
    // Kernel [[1,0],[0,-1]], bias 0.25.
    conv.kernels.mutable_data()[0] = 1;
    conv.kernels.mutable_data()[1] = 0;
    conv.kernels.mutable_data()[2] = 0;
    conv.kernels.mutable_data()[3] = -1;
    conv.bias.mutable_data()[0] = 0.25;

    Tape tape;
    Tensor x = Tensor::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor y = conv2d_forward(conv, x);
    REQUIRE(y.shape() == Shape{1, 1, 2, 2});
    // Each output = top-left - bottom-right + 0.25 = -4 + 0.25.
    for (double v : y.data()) CHECK(v == doctest::Approx(-3.75));
}

TEST_CASE("conv2d stride and multichannel shapes") {
    Rng rng(5);
    ConvLayer conv(3, 8, 4, 4, rng);
    Tape tape;
    Tensor x = Tensor::randn({2, 3, 16, 16}, rng, 1.0);
    Tensor y = conv2d_forward(conv, x);
    CHECK(y.shape() == Shape{2, 8, 4, 4});
}

TEST_CASE("conv2d gradient") {
    Rng rng(6);
    ConvLayer conv(2, 3, 2, 2, rng);
    Tensor x = Tensor::randn({1, 2, 6, 6}, rng, 1.0, true);
    std::vector<Tensor> inputs = conv.params();
    inputs.push_back(x);
    auto res = grad_check(
        [&] {
            Tensor y = conv2d_forward(conv, x);
            return sum(mul(y, y));
        },
        inputs);
    CHECK_MESSAGE(res.pass, res.worst);
}

TEST_CASE("avg_pool2x2 ceil mode covers edge cells once") {
    Tape tape;
    SUBCASE("even extent") {
        Tensor x = Tensor::from_data({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
        Tensor y = avg_pool2x2(x);
        REQUIRE(y.shape() == Shape{1, 1, 1, 2});
        CHECK(y.at({0, 0, 0, 0}) == doctest::Approx((1 + 2 + 5 + 6) / 4.0));
        CHECK(y.at({0, 0, 0, 1}) == doctest::Approx((3 + 4 + 7 + 8) / 4.0));
    }
    SUBCASE("odd extent means over covered cells only") {
        Tensor x = Tensor::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
        Tensor y = avg_pool2x2(x);
        REQUIRE(y.shape() == Shape{1, 1, 2, 2});
        CHECK(y.at({0, 0, 0, 0}) == doctest::Approx((1 + 2 + 4 + 5) / 4.0));
        CHECK(y.at({0, 0, 0, 1}) == doctest::Approx((3 + 6) / 2.0));
        CHECK(y.at({0, 0, 1, 0}) == doctest::Approx((7 + 8) / 2.0));
        CHECK(y.at({0, 0, 1, 1}) == doctest::Approx(9.0));
    }
}

TEST_CASE("avg_pool2x2 gradient at an odd extent") {
    Rng rng(7);
    Tensor x = Tensor::randn({1, 2, 3, 5}, rng, 1.0, true);
    std::vector<Tensor> inputs{x};
    auto res = grad_check(
        [&] {
            Tensor y = avg_pool2x2(x);
            return sum(mul(y, y));
        },
        inputs);
    CHECK_MESSAGE(res.pass, res.worst);
}

TEST_CASE("attention over identical tokens is the value projection") {
    // All rows equal: softmax weights are uniform over equal scores, and the
    // attention output per row equals wo(wv(token)).
    Rng rng(8);
    MultiHeadAttention mha(6, 2, rng);
    std::vector<double> row{0.3, -0.2, 0.9, 0.1, -0.5, 0.4};
    std::vector<double> seq;
    for (int i = 0; i < 4; ++i) seq.insert(seq.end(), row.begin(), row.end());

    Tape tape;
    Tensor x = Tensor::from_data({4, 6}, seq);
    Tensor y = mha.forward(x, x, x);
    REQUIRE(y.shape() == Shape{4, 6});
    Tensor one = Tensor::from_data({1, 6}, row);
    Tensor expect = linear_forward(mha.wo, linear_forward(mha.wv, one));
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 6; ++c) {
            CHECK(y.at({r, c}) == doctest::Approx(expect.at({0, c})).epsilon(1e-10));
        }
    }
}

TEST_CASE("attention with one token ignores q and k entirely") {
    Rng rng(9);
    MultiHeadAttention mha(4, 2, rng);
    Tape tape;
    Tensor x = Tensor::from_data({1, 4}, {1.0, -2.0, 0.5, 3.0});
    Tensor y = mha.forward(x, x, x);
    Tensor expect = linear_forward(mha.wo, linear_forward(mha.wv, x));
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(y.at({0, c}) == doctest::Approx(expect.at({0, c})).epsilon(1e-12));
    }
}

TEST_CASE("attention gradient") {
    Rng rng(10);
    MultiHeadAttention mha(4, 2, rng);
    Tensor x = Tensor::randn({3, 4}, rng, 1.0, true);
    std::vector<Tensor> inputs = mha.params();
    inputs.push_back(x);
    auto res = grad_check(
        [&] {
            Tensor y = mha.forward(x, x, x);
            return sum(mul(y, y));
        },
        inputs);
    CHECK_MESSAGE(res.pass, res.worst);
}

TEST_CASE("transformer with zeroed output projections is the identity") {
    // Pre-norm residual: zeroing wo and the MLP's second layer turns every
    // sublayer into x + 0.
    Rng rng(11);
    TransformerEncoder enc(5, 8, 2, 16, 2, rng);
    for (auto& layer : enc.layers) {
        for (double& v : layer.attn.wo.W.mutable_data()) v = 0.0;
        for (double& v : layer.attn.wo.b.mutable_data()) v = 0.0;
        for (double& v : layer.mlp.out.W.mutable_data()) v = 0.0;
        for (double& v : layer.mlp.out.b.mutable_data()) v = 0.0;
    }
    Tape tape;
    Tensor x = Tensor::randn({5, 8}, rng, 1.0);
    Tensor y = enc.encode(x);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-14));
    }
}

TEST_CASE("transformer encode is permutation-equivariant") {
    // encode() itself adds no positions (the caller owns pos_emb), so
    // permuting input rows permutes output rows identically.
    Rng rng(12);
    TransformerEncoder enc(4, 8, 2, 16, 2, rng);
    Tensor x = Tensor::randn({4, 8}, rng, 1.0);

    std::vector<std::size_t> perm{2, 0, 3, 1};
    std::vector<double> permuted(x.numel());
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 8; ++c) {
            permuted[r * 8 + c] = x.at({perm[r], c});
        }
    }
    Tape tape;
    Tensor y = enc.encode(x);
    Tensor yp = enc.encode(Tensor::from_data({4, 8}, permuted));
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 8; ++c) {
            CHECK(yp.at({r, c}) == doctest::Approx(y.at({perm[r], c})).epsilon(1e-10));
        }
    }
}

TEST_CASE("transformer gradient reaches every parameter") {
    Rng rng(13);
    TransformerEncoder enc(3, 4, 2, 8, 1, rng);
    Tensor x = Tensor::randn({3, 4}, rng, 1.0, true);
    std::vector<Tensor> inputs = enc.params();
    inputs.push_back(x);
    auto res = grad_check(
        [&] {
            Tensor y = enc.encode(add(x, enc.pos_emb));
            Tensor shifted = add(y, enc.mask_token);
            return sum(mul(shifted, shifted));
        },
        inputs, 1e-5, 2e-4);
    CHECK_MESSAGE(res.pass, res.worst);
}

TEST_CASE("transformer parameter count closed form") {
    // Per layer: MHA 4 d(d+1); MLP d*m + m + m*d + d; two LayerNorms 4d.
    // Plus pos_emb L*d and mask_token d.
    auto closed_form = [](std::size_t L, std::size_t d, std::size_t m, std::size_t layers) {
        const std::size_t per_layer = 4 * d * (d + 1) + (2 * d * m + m + d) + 4 * d;
        return layers * per_layer + L * d + d;
    };
    Rng rng(14);
    TransformerEncoder small(4, 8, 2, 16, 2, rng);
    CHECK(param_count(small.params()) == closed_form(4, 8, 16, 2));

    // At d=512, h=4, mlp 3072, 8 layers, context 64 the total lands at
    // 33,649,152 parameters.
    CHECK(closed_form(64, 512, 3072, 8) == 33'649'152);
}

TEST_CASE("cross_entropy matches a hand logsumexp") {
    Tape tape;
    Tensor logits = Tensor::from_data({2, 3}, {2.0, 1.0, 0.0, 0.0, 0.0, 0.0});
    std::vector<std::size_t> labels{0, 2};
    Tensor loss = cross_entropy(logits, labels);

    auto nll = [](std::vector<double> row, std::size_t label) {
        double mx = *std::max_element(row.begin(), row.end());
        double lse = 0.0;
        for (double v : row) lse += std::exp(v - mx);
        return -(row[label] - mx - std::log(lse));
    };
    const double expect = 0.5 * (nll({2, 1, 0}, 0) + nll({0, 0, 0}, 2));
    CHECK(loss.value() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("cross_entropy is safe at extreme logits and differentiates") {
    {
        Tape tape;
        Tensor logits = Tensor::from_data({1, 2}, {1000.0, -1000.0});
        std::vector<std::size_t> labels{0};
        Tensor loss = cross_entropy(logits, labels);
        CHECK(all_finite(loss));
        CHECK(loss.value() == doctest::Approx(0.0));
    }
    Rng rng(15);
    Tensor logits = Tensor::randn({4, 3}, rng, 2.0, true);
    std::vector<std::size_t> labels{0, 2, 1, 1};
    std::vector<Tensor> inputs{logits};
    auto res = grad_check([&] { return cross_entropy(logits, labels); }, inputs);
    CHECK_MESSAGE(res.pass, res.worst);
}

TEST_CASE("init scale follows kInitStddev") {
    // Weight entries are N(0, 0.02^2); at 60k samples the sample sd is within
    // a few percent of 0.02 and biases start at zero.
    Rng rng(16);
    LinearLayer lin(300, 200, rng);
    double ss = 0.0;
    for (double v : lin.W.data()) ss += v * v;
    const double sd = std::sqrt(ss / static_cast<double>(lin.W.numel()));
    CHECK(sd == doctest::Approx(kInitStddev).epsilon(0.05));
    for (double v : lin.b.data()) CHECK(v == 0.0);
}
