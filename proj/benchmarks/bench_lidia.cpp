#include <benchmark/benchmark.h>

#include <vector>

#include "lidia/image_io.hpp"
#include "lidia/net.hpp"
#include "lidia/nn.hpp"
#include "lidia/patch.hpp"
#include "lidia/rng.hpp"

using namespace lidia;

namespace {

ImagePlane random_image(int h, int w, std::uint64_t seed) {
    ImagePlane img(h, w, 1);
    Xoshiro256pp rng(seed);
    for (auto& v : img.data) v = float(rng.next_unit());
    return img;
}

// full-size gray layer: 49x14 groups into 64 features
void BM_sl_forward(benchmark::State& state) {
    Xoshiro256pp rng(1);
    SLParams<float> p = SLParams<float>::sized(64, 49, 14, 14);
    for (auto* t : {&p.w1, &p.w2, &p.bias})
        for (auto& v : t->data) v = float(rng.next_unit()) - 0.5f;
    std::vector<float> z(49 * 14), a(64 * 14), y(64 * 14);
    for (auto& v : z) v = float(rng.next_unit());
    for (auto _ : state) {
        sl_forward(z.data(), p, a.data(), y.data());
        benchmark::DoNotOptimize(y.data());
    }
}
BENCHMARK(BM_sl_forward);

void BM_knn_group(benchmark::State& state) {
    const int window = int(state.range(0));
    PatchConfig cfg{7, 1, 14, window};
    ImagePlane img = random_image(128, 128, 2);
    Plane<float> padded = mirror_pad(img, cfg.margin());
    Xoshiro256pp rng(3);
    for (auto _ : state) {
        const int r = cfg.margin() + int(rng.next_below(128));
        const int c = cfg.margin() + int(rng.next_below(128));
        auto g = knn_group<float>(padded, nullptr, cfg, r, c);
        benchmark::DoNotOptimize(g.dists.data());
    }
}
BENCHMARK(BM_knn_group)->Arg(37)->Arg(21);

void BM_build_pyramid(benchmark::State& state) {
    PatchConfig cfg{7, 1, 14, 37};
    ImagePlane img = random_image(128, 128, 4);
    for (auto _ : state) {
        auto pyr = build_pyramid(img, cfg);
        benchmark::DoNotOptimize(pyr.full.data.data());
    }
}
BENCHMARK(BM_build_pyramid);

void BM_aggregate(benchmark::State& state) {
    PatchConfig cfg{7, 1, 14, 37};
    ImagePlane img = random_image(64, 64, 5);
    Plane<float> padded = mirror_pad(img, cfg.margin());
    const int mg = cfg.margin(), n = cfg.patch_len();
    std::vector<float> patches(std::size_t(img.pixels()) * n);
    std::vector<PatchRef<float>> refs(img.pixels());
    for (int r = 0; r < 64; ++r)
        for (int c = 0; c < 64; ++c) {
            float* dst = &patches[(std::size_t(r) * 64 + c) * n];
            extract_patch(padded, r + mg, c + mg, cfg.patch_side, dst);
            refs[std::size_t(r) * 64 + c] = {r + mg, c + mg, dst};
        }
    for (auto _ : state) {
        auto out = aggregate<float>(refs, {}, padded.height, padded.width, 1, cfg.patch_side,
                                    false);
        benchmark::DoNotOptimize(out.data.data());
    }
}
BENCHMARK(BM_aggregate);

void BM_denoise_small(benchmark::State& state) {
    ArchDescriptor arch;  // shrunken: 3x3 patches, 3 neighbors, 8 features
    arch.channels = 1;
    arch.patch_side = 3;
    arch.group_size = 3;
    arch.feature_dim = 8;
    arch.search_window = 5;
    Model<float> m = init_model<float>(arch, 6);
    ImagePlane img = random_image(32, 32, 7);
    DenoiseOptions<float> opt;
    opt.threads = int(state.range(0));
    for (auto _ : state) {
        auto res = denoise(img, m, opt);
        benchmark::DoNotOptimize(res.image.data.data());
    }
}
BENCHMARK(BM_denoise_small)->Arg(1)->Arg(2);

void BM_denoise_full_arch(benchmark::State& state) {
    Model<float> m = init_model<float>(ArchDescriptor::full_gray(), 8);
    ImagePlane img = random_image(64, 64, 9);
    DenoiseOptions<float> opt;
    opt.threads = int(state.range(0));
    for (auto _ : state) {
        auto res = denoise(img, m, opt);
        benchmark::DoNotOptimize(res.image.data.data());
    }
}
BENCHMARK(BM_denoise_full_arch)->Unit(benchmark::kMillisecond)->Arg(1)->Arg(2);

}  // namespace

BENCHMARK_MAIN();
