#include <benchmark/benchmark.h>

#include "mcmkd/blocks.hpp"
#include "mcmkd/encoders.hpp"
#include "mcmkd/mil.hpp"
#include "mcmkd/rng.hpp"
#include "mcmkd/synth.hpp"
#include "mcmkd/tensor.hpp"

namespace {

using namespace mcmkd;

void BM_Matmul(benchmark::State& state) {
    const std::size_t n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    Tensor a = Tensor::randn({n, n}, rng, 1.0);
    Tensor b = Tensor::randn({n, n}, rng, 1.0);
    for (auto _ : state) {
        benchmark::DoNotOptimize(matmul(a, b));
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                            static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_AttentionForward(benchmark::State& state) {
    Rng rng(2);
    MultiHeadAttention attn(64, 2, rng);
    Tensor x = Tensor::randn({16, 64}, rng, 1.0);
    for (auto _ : state) {
        benchmark::DoNotOptimize(attn.forward(x, x, x));
    }
}
BENCHMARK(BM_AttentionForward);

void BM_TransformerEncode(benchmark::State& state) {
    Rng rng(3);
    TransformerEncoder enc(16, 64, 2, 128, 2, rng);
    Tensor x = Tensor::randn({16, 64}, rng, 1.0);
    for (auto _ : state) {
        benchmark::DoNotOptimize(enc.encode(x));
    }
}
BENCHMARK(BM_TransformerEncode);

void BM_StudentEncodeWindow(benchmark::State& state) {
    Rng rng(4);
    PatchEncoder student(student_encoder_config(), rng);
    SlideConfig sc;
    const SyntheticSlide slide = generate_slide(sc, 7);
    const auto windows = extract_context_windows(slide, 4);
    for (auto _ : state) {
        benchmark::DoNotOptimize(student.encode_window(windows.front()));
    }
}
BENCHMARK(BM_StudentEncodeWindow);

void BM_AttentionPool(benchmark::State& state) {
    const std::size_t n = static_cast<std::size_t>(state.range(0));
    Rng rng(5);
    AttentionMilClassifier clf(64, 64, rng);
    Bag bag;
    bag.instances = Tensor::randn({n, 64}, rng, 1.0);
    for (auto _ : state) {
        benchmark::DoNotOptimize(attention_pool(clf, bag).z);
    }
}
BENCHMARK(BM_AttentionPool)->Arg(64)->Arg(256);

}  // namespace

BENCHMARK_MAIN();
