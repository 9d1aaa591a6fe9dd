#include <cmath>
#include <vector>

#include "doctest.h"
#include "mcmkd/encoders.hpp"
#include "mcmkd/heatmap.hpp"
#include "mcmkd/synth.hpp"

using namespace mcmkd;

namespace {

Tensor render_batch(PatchClass cls, std::size_t n, double sigma, std::uint64_t seed) {
    const std::size_t p = 16, c = 3;
    Rng rng(seed);
    std::vector<double> data(n * c * p * p);
    for (std::size_t i = 0; i < n; ++i) {
        render_patch(cls, p, c, sigma, rng,
                     std::span<double>(data).subspan(i * c * p * p, c * p * p));
    }
    return Tensor::from_data({n, c, p, p}, std::move(data));
}

}  // namespace

TEST_CASE("encoder forward shapes for both architectures") {
    Rng rng(1);
    PatchEncoder student(student_encoder_config(), rng);
    PatchEncoder teacher(teacher_encoder_config(), rng);

    Tape tape;
    Tensor batch = render_batch(PatchClass::kStromaA, 3, 0.05, 9);
    Tensor fs = student.forward(batch);
    Tensor ft = teacher.forward(batch);
    CHECK(fs.shape() == Shape{3, 64});
    CHECK(ft.shape() == Shape{3, 128});
    CHECK(student.out_dim() == 64);
    CHECK(teacher.out_dim() == 128);
    CHECK(all_finite(fs));
    CHECK(all_finite(ft));
}

TEST_CASE("encode_window yields one row per patch in window order") {
    Rng rng(2);
    PatchEncoder student(student_encoder_config(), rng);
    SlideConfig cfg;
    SyntheticSlide slide = generate_slide(cfg, 77);
    ContextWindow w = extract_context_windows(slide, 4).front();

    Tape tape;
    Tensor feats = student.encode_window(w);
    REQUIRE(feats.shape() == Shape{16, 64});

    // Row i equals the forward pass of patch i alone.
    const std::size_t d = w.patch_dim();
    auto p0 = w.patch_at(5);
    Tensor one = Tensor::from_data({1, 3, 16, 16}, std::vector<double>(p0.begin(), p0.end()));
    Tensor f0 = student.forward(one);
    for (std::size_t j = 0; j < 64; ++j) {
        CHECK(feats.at({5, j}) == doctest::Approx(f0.at({0, j})).epsilon(1e-12));
    }
    CHECK(d == 3 * 16 * 16);
}

TEST_CASE("initialization is reproducible and parameters are counted in closed form") {
    Rng r1(3), r2(3);
    PatchEncoder a(student_encoder_config(), r1);
    PatchEncoder b(student_encoder_config(), r2);
    NamedParams na = a.named_params("e");
    NamedParams nb = b.named_params("e");
    REQUIRE(na.size() == nb.size());
    for (std::size_t i = 0; i < na.size(); ++i) {
        CHECK(na[i].first == nb[i].first);
        CHECK(na[i].second.data()[0] == nb[i].second.data()[0]);
    }

    // Student: one 3x3 conv 3->8 plus head 8*8*8 -> 64 after one pool
    // (16 -> 14 conv -> 7 pool).
    const std::size_t conv = 8 * 3 * 3 * 3 + 8;
    const std::size_t head = 64 * (8 * 7 * 7) + 64;
    CHECK(a.param_count() == conv + head);
    CHECK(param_count(a.params()) == a.param_count());

    // Teacher: 3->16 and 16->32 convs, two pools (16->14->7->5->3 ceil),
    // head 32*3*3 -> 128.
    Rng r3(4);
    PatchEncoder t(teacher_encoder_config(), r3);
    const std::size_t conv1 = 16 * 3 * 3 * 3 + 16;
    const std::size_t conv2 = 32 * 16 * 3 * 3 + 32;
    const std::size_t thead = 128 * (32 * 3 * 3) + 128;
    CHECK(t.param_count() == conv1 + conv2 + thead);

    // The teacher spends more compute per patch than the student.
    CHECK(t.flops_per_patch() > a.flops_per_patch());
}

TEST_CASE("freeze stops gradient flow into the encoder") {
    Rng rng(5);
    PatchEncoder enc(student_encoder_config(), rng);
    enc.freeze();
    CHECK(enc.frozen());
    for (const Tensor& p : enc.params()) CHECK_FALSE(p.requires_grad());

    Tape tape;
    Tensor batch = render_batch(PatchClass::kStromaB, 2, 0.05, 11);
    Tensor f = enc.forward(batch);
    backward(sum(f));
    for (const Tensor& p : enc.params()) CHECK_FALSE(p.has_grad());
}

TEST_CASE("clone is deep and controls requires_grad") {
    Rng rng(6);
    PatchEncoder enc(student_encoder_config(), rng);
    PatchEncoder frozen = enc.clone(false);
    PatchEncoder live = enc.clone(true);

    CHECK_FALSE(frozen.params()[0].same_storage(enc.params()[0]));
    CHECK_FALSE(frozen.params()[0].requires_grad());
    CHECK(live.params()[0].requires_grad());

    // Same values, independent storage.
    enc.params()[0].mutable_data()[0] += 1.0;
    CHECK(frozen.params()[0].data()[0] != enc.params()[0].data()[0]);

    Tape tape;
    Tensor batch = render_batch(PatchClass::kBackground, 1, 0.05, 12);
    Tensor a = frozen.forward(batch);
    Tensor b = live.forward(batch);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("ema_update interpolates exactly at the endpoints") {
    Rng rng(7);
    PatchEncoder student(student_encoder_config(), rng);
    PatchEncoder mirror = student.clone(false);

    // Nudge the student away from the mirror.
    for (Tensor p : student.params()) {
        for (double& v : p.mutable_data()) v += 0.25;
    }

    SUBCASE("tau=1 keeps the teacher") {
        std::vector<Tensor> tp = mirror.params(), sp = student.params();
        const double before = tp[0].data()[0];
        ema_update(tp, sp, 1.0);
        CHECK(tp[0].data()[0] == before);
    }
    SUBCASE("tau=0 copies the student") {
        std::vector<Tensor> tp = mirror.params(), sp = student.params();
        ema_update(tp, sp, 0.0);
        for (std::size_t i = 0; i < tp.size(); ++i) {
            for (std::size_t j = 0; j < tp[i].numel(); ++j) {
                CHECK(tp[i].data()[j] == sp[i].data()[j]);
            }
        }
    }
    SUBCASE("tau=0.999 moves a thousandth of the gap") {
        std::vector<Tensor> tp = mirror.params(), sp = student.params();
        const double t0 = tp[0].data()[0], s0 = sp[0].data()[0];
        ema_update(tp, sp, 0.999);
        CHECK(tp[0].data()[0] == doctest::Approx(0.999 * t0 + 0.001 * s0).epsilon(1e-15));
    }
    SUBCASE("EmaTeacher wrapper stays frozen while tracking") {
        EmaTeacher ema(student, 0.5);
        for (const Tensor& p : ema.encoder.params()) CHECK_FALSE(p.requires_grad());
        const double before = ema.encoder.params()[0].data()[0];
        for (Tensor p : student.params()) {
            for (double& v : p.mutable_data()) v += 1.0;
        }
        ema.update(student);
        const double after = ema.encoder.params()[0].data()[0];
        CHECK(after == doctest::Approx(before + 0.5).epsilon(1e-12));
    }
}

TEST_CASE("pretraining reaches the proxy target and transfers to features") {
    PretrainConfig cfg;
    cfg.train_samples = 512;
    cfg.holdout_samples = 256;
    cfg.max_epochs = 40;
    PretrainReport report;
    PatchEncoder enc = pretrain_encoder(student_encoder_config(), cfg, 99, &report);

    CHECK(report.epochs >= 1);
    CHECK(report.holdout_accuracy >= kPretrainFloorAccuracy);
    CHECK(report.epoch_losses.size() == report.epochs);
    // Loss moves downward overall.
    CHECK(report.epoch_losses.back() < report.epoch_losses.front());

    // Features cluster by class: within-class cosine beats between-class for
    // the colour-separated pair.
    Tape tape;
    Tensor a = enc.forward(render_batch(PatchClass::kStromaA, 16, 0.05, 21));
    Tensor b = enc.forward(render_batch(PatchClass::kStromaB, 16, 0.05, 22));
    std::vector<double> rows;
    const std::size_t d = enc.out_dim();
    for (const Tensor& block : {a, b}) {
        rows.insert(rows.end(), block.data().begin(), block.data().end());
    }
    CosineGrid grid = cosine_similarity_grid(Tensor::from_data({32, d}, rows), 0);
    double within = 0.0, between = 0.0;
    for (std::size_t i = 1; i < 16; ++i) within += grid.values[i];
    for (std::size_t i = 16; i < 32; ++i) between += grid.values[i];
    CHECK(within / 15.0 > between / 16.0);
    CHECK(grid.n_degenerate == 0);
}

TEST_CASE("teacher pretraining is frozen and reproducible") {
    PretrainConfig cfg;
    cfg.train_samples = 512;
    cfg.holdout_samples = 256;
    cfg.max_epochs = 10;
    // A tiny budget cannot hit the early-stop target, so the multiplier is
    // exercised; the floor still applies at the end.
    cfg.budget_multiplier = 2;
    PretrainReport r1, r2;
    PatchEncoder t1 = pretrain_teacher(teacher_encoder_config(), cfg, 7, &r1);
    PatchEncoder t2 = pretrain_teacher(teacher_encoder_config(), cfg, 7, &r2);

    CHECK(t1.frozen());
    CHECK(r1.epochs == r2.epochs);
    CHECK(r1.holdout_accuracy == r2.holdout_accuracy);
    const auto p1 = t1.params(), p2 = t2.params();
    for (std::size_t i = 0; i < p1.size(); ++i) {
        for (std::size_t j = 0; j < p1[i].numel(); ++j) {
            CHECK(p1[i].data()[j] == p2[i].data()[j]);
        }
    }
    CHECK(r1.epochs <= cfg.max_epochs * cfg.budget_multiplier);
}

TEST_CASE("student initialization stays trainable") {
    PretrainConfig cfg;
    cfg.sigma = 0.15;
    cfg.train_samples = 512;
    cfg.holdout_samples = 256;
    cfg.max_epochs = 30;
    PatchEncoder s = init_student(student_encoder_config(), cfg, 7);
    CHECK_FALSE(s.frozen());
    for (const Tensor& p : s.params()) CHECK(p.requires_grad());
}
