#include <benchmark/benchmark.h>

#include "lrq/model.hpp"
#include "lrq/reconstruct.hpp"
#include "lrq/rng.hpp"

using namespace lrq;

static void BM_matmul(benchmark::State& state) {
    const int64_t n = state.range(0);
    Rng rng(1);
    Tensor a = rng.normal({n, n}, 0.0, 1.0);
    Tensor b = rng.normal({n, n}, 0.0, 1.0);
    for (auto _ : state) {
        benchmark::DoNotOptimize(matmul(a, b));
    }
    state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_matmul)->Arg(32)->Arg(64)->Arg(128);

static void BM_fake_quant(benchmark::State& state) {
    const int64_t n = state.range(0);
    Rng rng(2);
    Tensor x = rng.normal({n, n}, 0.0, 1.0);
    QParams qp = affine_qparams(-3.0f, 3.0f, 8);
    for (auto _ : state) {
        benchmark::DoNotOptimize(fake_quant(x, qp, 8));
    }
    state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_fake_quant)->Arg(64)->Arg(256);

static void BM_rtn_init(benchmark::State& state) {
    const int64_t n = state.range(0);
    Rng rng(3);
    Tensor w = rng.normal({n, n}, 0.0, 1.0);
    for (auto _ : state) {
        benchmark::DoNotOptimize(rtn_init_weight(w, 4, Granularity::per_channel));
    }
}
BENCHMARK(BM_rtn_init)->Arg(64)->Arg(128);

static void BM_dequantize_lrq(benchmark::State& state) {
    const int64_t n = state.range(0);
    Rng rng(4);
    Tensor w = rng.normal({n, n}, 0.0, 1.0);
    Rng init_rng(5);
    LrqParams p = init_lrq(w, 4, int(n / 4), init_rng, 0.01f);
    p.l2 = rng.normal({n, n / 4}, 0.0, 0.1);
    for (auto _ : state) {
        benchmark::DoNotOptimize(dequantize_lrq(w, p, 4));
    }
    state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_dequantize_lrq)->Arg(64)->Arg(128);

static void BM_block_forward(benchmark::State& state) {
    ModelConfig cfg;
    cfg.vocab_size = 64;
    cfg.d_model = state.range(0);
    cfg.n_layers = 1;
    cfg.n_heads = 4;
    cfg.d_ff = 2 * cfg.d_model;
    Model m = make_toy_model(cfg, 6);
    Rng rng(7);
    Tensor x = rng.normal({32, cfg.d_model}, 0.0, 1.0);
    for (auto _ : state) {
        benchmark::DoNotOptimize(block_forward(m.blocks[0], x, cfg));
    }
}
BENCHMARK(BM_block_forward)->Arg(32)->Arg(64);

static void BM_ste_iteration(benchmark::State& state) {
    ModelConfig cfg;
    cfg.vocab_size = 64;
    cfg.d_model = state.range(0);
    cfg.n_layers = 1;
    cfg.n_heads = 4;
    cfg.d_ff = 2 * cfg.d_model;
    Model m = make_toy_model(cfg, 8);
    Rng rng(9);
    Tensor x = rng.normal({32, cfg.d_model}, 0.0, 1.0);
    std::vector<const Tensor*> batch = {&x, &x};

    BlockRounding st;
    Rng init_rng(10);
    const auto ws = block_weights(m.blocks[0]);
    for (int i = 0; i < kBlockLayers; ++i) {
        st.layers[size_t(i)] = init_layer_rounding(*ws[size_t(i)], RoundVariant::lrq, 4, 0, 0.01f, init_rng);
    }
    for (auto _ : state) {
        benchmark::DoNotOptimize(ste_gradients(m.blocks[0], cfg, st, batch, batch));
    }
}
BENCHMARK(BM_ste_iteration)->Arg(32)->Arg(64);

BENCHMARK_MAIN();
