#include <benchmark/benchmark.h>

#include "vcdm/aux_model.hpp"
#include "vcdm/diffusion.hpp"
#include "vcdm/embedding.hpp"
#include "vcdm/evaluation.hpp"
#include "vcdm/image_model.hpp"
#include "vcdm/nn/ops.hpp"

using namespace vcdm;
using nn::Var;

namespace {

Matrix random_matrix(int rows, int cols, Rng& rng) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

void BM_SampleGaussianDenoiser(benchmark::State& state) {
    const int rows = static_cast<int>(state.range(0));
    diffusion::Denoiser d = [](const Var& x, std::span<const double> sigma) {
        std::vector<double> f(sigma.size());
        for (std::size_t i = 0; i < f.size(); ++i) f[i] = 1.0 / (1.0 + sigma[i] * sigma[i]);
        return nn::scale_rows(x, f);
    };
    const auto cfg = diffusion::SamplerConfig::image_default();
    for (auto _ : state) {
        Rng rng(1);
        benchmark::DoNotOptimize(diffusion::sample(d, {rows, 2}, cfg, diffusion::ScheduleConfig{}, std::span<Rng>(&rng, 1)));
    }
    state.SetItemsProcessed(state.iterations() * rows);
}
BENCHMARK(BM_SampleGaussianDenoiser)->Arg(1000)->Arg(10000);

void BM_AuxDenoiseForward(benchmark::State& state) {
    aux::AuxModelConfig cfg;
    cfg.embed_dim = 64;
    cfg.token_dim = static_cast<int>(state.range(0));
    cfg.num_layers = 2;
    cfg.num_heads = 4;
    cfg.sigma_features = 32;
    Rng rng(2);
    aux::AuxModel model(cfg, rng);
    const int rows = 32;
    const Var y = Var::constant({rows, 64}, rng.normal_vector(rows * 64));
    const std::vector<double> sigma(rows, 1.0);
    nn::NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(model.denoise(y, sigma, {}));
    state.SetItemsProcessed(state.iterations() * rows);
}
BENCHMARK(BM_AuxDenoiseForward)->Arg(64)->Arg(128);

void BM_ImageDenoiseForward(benchmark::State& state) {
    image_model::ImageModelConfig cfg;
    cfg.arch = image_model::Architecture::kUNet;
    cfg.resolution = static_cast<int>(state.range(0));
    cfg.channels = 3;
    cfg.base_width = 16;
    cfg.channel_multipliers = {1, 2};
    cfg.sigma_features = 16;
    Rng rng(3);
    image_model::ImageModel model(cfg, rng);
    const int rows = 8, n = rows * 3 * cfg.resolution * cfg.resolution;
    const Var x = Var::constant({rows, 3, cfg.resolution, cfg.resolution}, rng.normal_vector(n));
    const std::vector<double> sigma(rows, 1.0);
    nn::NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(model.denoise(x, sigma, {}));
    state.SetItemsProcessed(state.iterations() * rows);
}
BENCHMARK(BM_ImageDenoiseForward)->Arg(8)->Arg(16);

void BM_FrechetDistance(benchmark::State& state) {
    const int k = static_cast<int>(state.range(0));
    Rng rng(4);
    auto stats = [&] {
        const Matrix a = random_matrix(k, k, rng);
        eval::GaussianStats g;
        g.mean = Vector::Zero(k);
        g.cov = a * a.transpose();
        g.count = 1000;
        return g;
    };
    const auto a = stats(), b = stats();
    for (auto _ : state) benchmark::DoNotOptimize(eval::frechet_distance(a, b));
}
BENCHMARK(BM_FrechetDistance)->Arg(64)->Arg(512);

void BM_KMeansFit(benchmark::State& state) {
    Rng rng(5);
    const Matrix data = random_matrix(5000, 32, rng);
    for (auto _ : state) {
        Rng fit(6);
        benchmark::DoNotOptimize(embedding::kmeans_fit(data, static_cast<int>(state.range(0)), fit));
    }
}
BENCHMARK(BM_KMeansFit)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_PcaFit(benchmark::State& state) {
    Rng rng(7);
    const Matrix data = random_matrix(5000, 64, rng);
    for (auto _ : state) benchmark::DoNotOptimize(embedding::pca_fit(data, static_cast<int>(state.range(0))));
}
BENCHMARK(BM_PcaFit)->Arg(8)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
