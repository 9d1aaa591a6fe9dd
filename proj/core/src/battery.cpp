#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "mcmkd/experiment.hpp"
#include "mcmkd/gradcheck.hpp"
#include "mcmkd/heatmap.hpp"

namespace mcmkd {

namespace {

struct BatteryCase {
    std::string name;
    std::vector<Tensor> inputs;
    std::function<Tensor()> f;
};

/// Random constant weighting so gradients vary per coordinate (a plain sum
/// would feed the same upstream gradient 1 into every element).
Tensor weights_like(const Tensor& t, Rng& rng) {
    return Tensor::randn(t.shape(), rng, 1.0);
}

Tensor wsum(const Tensor& t, const Tensor& w) { return sum(mul(t, w)); }

std::vector<BatteryCase> build_battery() {
    std::vector<BatteryCase> cases;
    Rng rng(418);

    {
        Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor b = Tensor::randn({4, 2}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 2}, rng, 1.0);
        cases.push_back({"matmul", {a, b}, [=] { return wsum(matmul(a, b), w); }});
    }
    {
        Tensor a = Tensor::randn({2, 3}, rng, 1.0, true);
        Tensor b = Tensor::randn({3}, rng, 1.0, true);
        Tensor w = Tensor::randn({2, 3}, rng, 1.0);
        cases.push_back({"add broadcast", {a, b}, [=] { return wsum(add(a, b), w); }});
        cases.push_back({"sub broadcast", {a, b}, [=] { return wsum(sub(a, b), w); }});
        cases.push_back({"mul broadcast", {a, b}, [=] { return wsum(mul(a, b), w); }});
    }
    {
        Tensor a = Tensor::randn({2, 5}, rng, 1.0, true);
        Tensor w = Tensor::randn({2, 5}, rng, 1.0);
        cases.push_back({"scale", {a}, [=] { return wsum(scale(a, -1.7), w); }});
        cases.push_back({"sum", {a}, [=] { return sum(a); }});
    }
    {
        Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor w = Tensor::randn({4, 3}, rng, 1.0);
        cases.push_back({"transpose", {a}, [=] { return wsum(transpose(a), w); }});
    }
    {
        Tensor a = Tensor::randn({2, 6}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 4}, rng, 1.0);
        cases.push_back({"reshape", {a}, [=] { return wsum(reshape(a, {3, 4}), w); }});
    }
    {
        Tensor a = Tensor::randn({3, 6}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 4}, rng, 1.0);
        cases.push_back({"slice and concat", {a}, [=] {
                             return wsum(concat_cols({slice_cols(a, 4, 2), slice_cols(a, 0, 2)}),
                                         w);
                         }});
    }
    {
        Tensor x = Tensor::randn({3, 5}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 5}, rng, 1.0);
        cases.push_back({"softmax", {x}, [=] { return wsum(softmax(x), w); }});
    }
    {
        Tensor x = Tensor::randn({2, 7}, rng, 1.5, true);
        Tensor w = Tensor::randn({2, 7}, rng, 1.0);
        cases.push_back({"gelu", {x}, [=] { return wsum(gelu(x), w); }});
        cases.push_back({"tanh", {x}, [=] { return wsum(tanh(x), w); }});
        cases.push_back({"sigmoid", {x}, [=] { return wsum(sigmoid(x), w); }});
    }
    {
        Tensor x = Tensor::randn({3, 6}, rng, 1.0, true);
        Tensor gamma = Tensor::randn({6}, rng, 1.0, true);
        Tensor beta = Tensor::randn({6}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 6}, rng, 1.0);
        cases.push_back({"layer norm", {x, gamma, beta}, [=] {
                             return wsum(layer_norm(x, gamma, beta, kLayerNormEps), w);
                         }});
    }
    {
        ConvLayer conv(2, 3, 3, 1, rng);
        Tensor x = Tensor::randn({1, 2, 5, 5}, rng, 1.0, true);
        Tensor w = Tensor::randn({1, 3, 3, 3}, rng, 1.0);
        cases.push_back({"conv2d", {x, conv.kernels, conv.bias},
                         [=] { return wsum(conv2d_forward(conv, x), w); }});
    }
    {
        Tensor x = Tensor::randn({1, 2, 5, 5}, rng, 1.0, true);
        Tensor w = Tensor::randn({1, 2, 3, 3}, rng, 1.0);
        cases.push_back({"avg pool ceil", {x}, [=] { return wsum(avg_pool2x2(x), w); }});
    }
    {
        Tensor logits = Tensor::randn({4, 3}, rng, 1.0, true);
        std::vector<std::size_t> labels = {0, 2, 1, 0};
        cases.push_back({"cross entropy", {logits}, [=] { return cross_entropy(logits, labels); }});
    }
    {
        Tensor x = Tensor::randn({4, 6}, rng, 1.0, true);
        Tensor token = Tensor::randn({6}, rng, 1.0, true);
        Tensor pos = Tensor::randn({4, 6}, rng, 1.0, true);
        Tensor w = Tensor::randn({4, 6}, rng, 1.0);
        MaskPlan plan{4, {1, 3}, 0.5};
        cases.push_back({"apply mask and positions", {x, token, pos}, [=] {
                             return wsum(add_positions(apply_mask(x, plan, token), pos), w);
                         }});
    }
    {
        Tensor y = Tensor::randn({4, 5}, rng, 1.0, true);
        Tensor y_pred = Tensor::randn({4, 5}, rng, 1.0, true);
        MaskPlan plan{4, {0, 2}, 0.5};
        cases.push_back({"masked l1", {y, y_pred}, [=] { return masked_l1_loss(y, y_pred, plan); }});
        cases.push_back({"mean l1", {y, y_pred}, [=] { return mean_l1_loss(y, y_pred); }});
    }
    {
        MultiHeadAttention attn(8, 2, rng);
        Tensor x = Tensor::randn({3, 8}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 8}, rng, 1.0);
        std::vector<Tensor> inputs = {x};
        for (const Tensor& p : attn.params()) {
            inputs.push_back(p);
        }
        cases.push_back({"multi-head attention", std::move(inputs),
                         [=] { return wsum(attn.forward(x, x, x), w); }});
    }
    {
        TransformerEncoder enc(4, 8, 2, 16, 1, rng);
        Tensor x = Tensor::randn({4, 8}, rng, 1.0, true);
        Tensor w = Tensor::randn({4, 8}, rng, 1.0);
        std::vector<Tensor> inputs = {x};
        for (const Tensor& p : enc.params()) {
            inputs.push_back(p);
        }
        cases.push_back({"transformer encoder", std::move(inputs),
                         [=] { return wsum(enc.encode(x), w); }});
    }
    {
        Rng clf_rng(rng.next_u64());
        AttentionMilClassifier clf(8, 4, clf_rng);
        Bag bag;
        bag.instances = Tensor::randn({5, 8}, rng, 1.0, true);
        bag.label = 1;
        Tensor w = Tensor::randn({1, 8}, rng, 1.0);
        std::vector<Tensor> inputs = {bag.instances};
        for (const Tensor& p : clf.params()) {
            inputs.push_back(p);
        }
        std::vector<Tensor> pool_inputs = inputs;
        cases.push_back({"attention pool", std::move(pool_inputs),
                         [=] { return wsum(attention_pool(clf, bag).z, w); }});
        std::vector<std::size_t> labels = {1};
        cases.push_back({"mil forward cross entropy", std::move(inputs),
                         [=] { return cross_entropy(mil_forward(clf, bag), labels); }});
    }
    {
        // Full fine-tuning loss graph on a 2x2 context window.
        ContextWindow window;
        window.s = 2;
        window.patch = 4;
        window.channels = 3;
        window.patch_data.resize(4 * 48);
        Rng render_rng(91);
        const PatchClass classes[4] = {PatchClass::kStromaA, PatchClass::kLesion,
                                       PatchClass::kStromaB, PatchClass::kLesion};
        for (std::size_t i = 0; i < 4; ++i) {
            render_patch(classes[i], 4, 3, 0.05, render_rng,
                         std::span<double>(window.patch_data).subspan(i * 48, 48));
        }
        window.tissue_fraction = recompute_tissue_fraction(window);

        Rng enc_rng(rng.next_u64());
        PatchEncoder student(EncoderConfig{4, 3, {4}, 8}, enc_rng);
        PatchEncoder teacher(EncoderConfig{4, 3, {5}, 12}, enc_rng);
        teacher.freeze();
        TaskConfig tc;
        tc.s = 2;
        tc.d_f = 8;
        tc.d_t = 12;
        tc.tf_layers = 1;
        tc.tf_heads = 2;
        tc.tf_mlp_hidden = 16;
        tc.predictor_hidden = 16;
        tc.mask_ratio = 0.5;
        tc.variant = Variant::kMcmKd;
        McmKdModel model = build_task_model(tc, student, teacher, rng.next_u64());
        Rng mask_rng(rng.next_u64());
        MaskPlan plan = sample_mask(4, 0.5, mask_rng);
        cases.push_back({"full masked-context loss graph", model.trainable_params(),
                         [=] { return variant_forward(model, window, plan).loss; }});
    }
    return cases;
}

}  // namespace

int run_gradcheck_battery(std::ostream& os) {
    int failures = 0;
    for (BatteryCase& c : build_battery()) {
        const GradCheckResult result = grad_check(c.f, c.inputs);
        if (result.pass) {
            os << "PASS gradcheck " << c.name << " max_rel_err=" << result.max_rel_err << "\n";
        } else {
            ++failures;
            os << "FAIL gradcheck " << c.name << " max_rel_err=" << result.max_rel_err << " at "
               << result.worst << "\n";
        }
    }
    return failures;
}

}  // namespace mcmkd
