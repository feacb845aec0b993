#include <benchmark/benchmark.h>

#include "upcycle/gdn.hpp"
#include "upcycle/hybrid.hpp"
#include "upcycle/losses.hpp"
#include "upcycle/numerics.hpp"

using namespace upcycle;

namespace {

Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    Tensor t({rows, cols});
    for (double& v : t.values()) v = rng.uniform(-scale, scale);
    return t;
}

TransformerConfig toy() {
    TransformerConfig c;
    c.d_model = 64;
    c.n_layers = 4;
    c.n_q_heads = 8;
    c.n_kv_heads = 2;
    c.head_dim = 8;
    c.vocab = 256;
    c.mlp_hidden = 128;
    return c;
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    const Tensor a = random_tensor(rng, n, n), b = random_tensor(rng, n, n);
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_Gdn(benchmark::State& state) {
    const auto T = static_cast<std::size_t>(state.range(0));
    const auto mode = state.range(1) ? GdnMode::chunked : GdnMode::sequential;
    const auto c = toy();
    const auto teacher = gen_toy_teacher(c, 2);
    const auto gc = default_gdn_config(c.d_model, 2);
    const auto w = init_gdn_from_teacher(teacher.layers[0].attn, c, gc, 2);
    Rng rng(3);
    const Tensor x = random_tensor(rng, T, c.d_model);
    for (auto _ : state) benchmark::DoNotOptimize(gdn_forward(w, gc, x, nullptr, mode));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(T));
    state.SetLabel(mode == GdnMode::chunked ? "chunked" : "sequential");
}
BENCHMARK(BM_Gdn)->ArgsProduct({{256, 1024}, {0, 1}});

void BM_KlPath(benchmark::State& state) {
    const std::size_t T = 1024, V = 512, d = 32;
    Rng rng(4);
    const Tensor hs = random_tensor(rng, T, d), ws = random_tensor(rng, V, d, 0.5);
    const Tensor ht = random_tensor(rng, T, d), wt = random_tensor(rng, V, d, 0.5);
    const Tensor zs = linear(hs, ws), zt = linear(ht, wt);
    const LossConfig lc{.kl_chunk = 128, .vocab_tile = 64};
    const auto path = state.range(0);
    for (auto _ : state) {
        switch (path) {
            case 0: benchmark::DoNotOptimize(kl_naive(zs, zt, lc)); break;
            case 1: benchmark::DoNotOptimize(kl_chunked(zs, zt, lc)); break;
            case 2: benchmark::DoNotOptimize(kl_online(zs, zt, lc)); break;
            default: benchmark::DoNotOptimize(kl_hidden(hs, ws, ht, wt, lc)); break;
        }
    }
    static const char* names[] = {"naive", "chunked", "online", "hidden"};
    state.SetLabel(names[path]);
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(T));
}
BENCHMARK(BM_KlPath)->DenseRange(0, 3);

void BM_DecodeStep(benchmark::State& state) {
    const auto c = toy();
    const auto teacher = gen_toy_teacher(c, 5);
    const auto layout = state.range(0) ? HybridLayout{4, {1}, "gdn"} : HybridLayout::all_mla(4);
    const auto model = convert_teacher(teacher, default_mla_config(c, 24), default_gdn_config(c.d_model), layout, 5);
    Rng rng(6);
    std::vector<TokenId> prompt(512);
    for (auto& t : prompt) t = static_cast<TokenId>(rng.below(c.vocab));
    for (auto _ : state) {
        state.PauseTiming();
        DecodeSession s(model);
        s.feed(prompt);
        state.ResumeTiming();
        for (int i = 0; i < 16; ++i) benchmark::DoNotOptimize(s.logits({static_cast<TokenId>(i)}));
    }
    state.SetLabel(state.range(0) ? "1 MLA + 3 GDN" : "4 MLA");
    state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_DecodeStep)->Arg(0)->Arg(1);

}  // namespace

BENCHMARK_MAIN();
