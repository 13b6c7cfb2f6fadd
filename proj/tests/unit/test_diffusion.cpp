#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "test_support.hpp"
#include "vcdm/diffusion.hpp"
#include "vcdm/errors.hpp"
#include "vcdm/nn/ops.hpp"

using namespace vcdm;
using namespace vcdm::diffusion;

namespace {

// x_hat = s^2 x / (s^2 + sigma^2): the exact posterior mean for N(0, s^2 I) data.
Denoiser gaussian_denoiser(double s) {
    return [s](const nn::Var& x, std::span<const double> sigma) {
        std::vector<double> f(sigma.size());
        for (std::size_t i = 0; i < f.size(); ++i) f[i] = s * s / (s * s + sigma[i] * sigma[i]);
        return nn::scale_rows(x, f);
    };
}

Denoiser identity_denoiser() {
    return [](const nn::Var& x, std::span<const double>) { return x; };
}

}  // namespace

TEST(Corrupt, ZeroNoiseIsIdentity) {
    const std::vector<double> x{1.0, -2.0, 3.5};
    const std::vector<double> eps{0.3, 0.1, -7.0};
    EXPECT_EQ(corrupt(x, 0.0, eps), x);
}

TEST(Corrupt, ZeroSignalIsScaledNoise) {
    const std::vector<double> x(3, 0.0);
    const std::vector<double> eps{0.3, 0.1, -7.0};
    const auto out = corrupt(x, 2.0, eps);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(out[i], 2.0 * eps[i]);
}

TEST(Corrupt, ShapeMismatchThrows) {
    EXPECT_THROW(corrupt(std::vector<double>(3), 1.0, std::vector<double>(2)), InvalidArgument);
}

TEST(Corrupt, EmpiricalStdMatchesSigma) {
    Rng rng(11);
    const std::size_t n = 100000;
    const std::vector<double> x = testutil::random_vector(n, rng);
    const std::vector<double> eps = rng.normal_vector(n);
    const auto out = corrupt(x, 1.5, eps);
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += out[i] - x[i];
    mean /= n;
    for (std::size_t i = 0; i < n; ++i) sq += (out[i] - x[i] - mean) * (out[i] - x[i] - mean);
    const double sd = std::sqrt(sq / (n - 1));
    EXPECT_GE(sd, 1.485);
    EXPECT_LE(sd, 1.515);
}

TEST(Corrupt, DifferenceIsExactlyScaledNoiseProperty) {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        const auto x = testutil::random_vector(8, rng, 10.0);
        const auto eps = rng.normal_vector(8);
        const double sigma = std::exp(rng.normal());
        const auto out = corrupt(x, sigma, eps);
        for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(out[i], x[i] + sigma * eps[i]);
    }
}

TEST(TrainSigma, DegenerateWhenStdZero) {
    Rng rng(1);
    LossWeighting w{.sigma_data = 1.0, .p_mean = 0.7, .p_std = 0.0};
    for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_train_sigma(w, rng), std::exp(0.7));
}

TEST(TrainSigma, MedianMatchesLogNormal) {
    Rng rng(2);
    LossWeighting w;
    std::vector<double> draws(100000);
    for (double& d : draws) d = sample_train_sigma(w, rng);
    std::nth_element(draws.begin(), draws.begin() + draws.size() / 2, draws.end());
    const double median = draws[draws.size() / 2];
    EXPECT_NEAR(median / std::exp(-1.2), 1.0, 0.03);
}

TEST(TrainSigma, AllDrawsPositive) {
    Rng rng(3);
    LossWeighting w;
    for (int i = 0; i < 1000000; ++i) ASSERT_GT(sample_train_sigma(w, rng), 0.0);
}

TEST(Weighting, LambdaFinitePositive) {
    LossWeighting w;
    for (double s : {1e-6, 0.002, 0.5, 1.0, 80.0, 1e6}) {
        const double l = w.lambda(s);
        EXPECT_TRUE(std::isfinite(l));
        EXPECT_GT(l, 0.0);
    }
}

TEST(Loss, PerfectDenoiserGivesZero) {
    Rng rng(4);
    nn::Var x = nn::Var::constant({16, 3}, testutil::random_vector(48, rng));
    Denoiser oracle = [&x](const nn::Var&, std::span<const double>) { return x; };
    EXPECT_EQ(denoising_loss(oracle, x, LossWeighting{}, rng).item(), 0.0);
}

TEST(Loss, IdentityDenoiserMatchesExpectedNoiseEnergy) {
    Rng rng(5);
    const int dim = 4;
    const double sigma = 0.8;
    LossWeighting w{.sigma_data = 0.5};
    nn::Var x = nn::Var::constant({1, dim}, {0.1, -0.4, 0.9, 0.0});
    double acc = 0.0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        const auto eps = rng.normal_vector(dim);
        acc += denoising_loss_at(identity_denoiser(), x, std::vector<double>{sigma}, eps, w).item();
    }
    const double expected = w.lambda(sigma) * sigma * sigma * dim;
    EXPECT_NEAR(acc / draws / expected, 1.0, 0.02);
}

TEST(Loss, NonFiniteOutputReportsSigma) {
    Rng rng(6);
    nn::Var x = nn::Var::constant({2, 2}, {1.0, 2.0, 3.0, 4.0});
    Denoiser bad = [](const nn::Var& xs, std::span<const double>) {
        std::vector<double> v(xs.value().begin(), xs.value().end());
        v[3] = std::nan("");
        return nn::Var::constant(xs.shape(), v);
    };
    try {
        denoising_loss_at(bad, x, std::vector<double>{0.3, 1.7}, std::vector<double>(4, 0.0), LossWeighting{});
        FAIL() << "expected NumericFailure";
    } catch (const NumericFailure& e) {
        EXPECT_DOUBLE_EQ(e.sigma(), 1.7);
    }
}

TEST(Loss, OptimalGaussianDenoiserBeatsPerturbations) {
    Rng rng(7);
    const int rows = 20000, dim = 2;
    LossWeighting w{.sigma_data = 1.0};
    nn::Var x = nn::Var::constant({rows, dim}, testutil::random_vector(rows * dim, rng));
    std::vector<double> sigmas(rows);
    for (double& s : sigmas) s = sample_train_sigma(w, rng);
    const auto eps = rng.normal_vector(rows * dim);
    const double best = denoising_loss_at(gaussian_denoiser(1.0), x, sigmas, eps, w).item();
    for (int p = 0; p < 20; ++p) {
        const double delta = 0.2 * rng.normal();
        Denoiser perturbed = [delta](const nn::Var& xs, std::span<const double> sigma) {
            std::vector<double> f(sigma.size());
            for (std::size_t i = 0; i < f.size(); ++i) {
                // Offset scaled by c_out keeps the weighted error bounded as sigma -> 0.
                const double c_out = sigma[i] / std::sqrt(1.0 + sigma[i] * sigma[i]);
                f[i] = 1.0 / (1.0 + sigma[i] * sigma[i]) + delta * c_out;
            }
            return nn::scale_rows(xs, f);
        };
        EXPECT_LE(best, denoising_loss_at(perturbed, x, sigmas, eps, w).item()) << "perturbation " << p;
    }
}

TEST(Schedule, SingleStep) {
    ScheduleConfig cfg;
    cfg.num_steps = 1;
    EXPECT_EQ(build_sigma_schedule(cfg), (std::vector<double>{80.0, 0.0}));
}

TEST(Schedule, EndpointsAndClosedForm) {
    ScheduleConfig cfg;
    const auto s = build_sigma_schedule(cfg);
    ASSERT_EQ(s.size(), 41u);
    EXPECT_EQ(s[0], 80.0);
    EXPECT_EQ(s[39], 0.002);
    EXPECT_EQ(s[40], 0.0);
    const double hi = std::pow(80.0, 1.0 / 7.0), lo = std::pow(0.002, 1.0 / 7.0);
    const double expected = std::pow(hi + 20.0 / 39.0 * (lo - hi), 7.0);
    EXPECT_NEAR(s[20] / expected, 1.0, 1e-12);
}

TEST(Schedule, StrictlyDecreasingAndStableEndpoints) {
    for (int n : {1, 2, 3, 10, 40, 64, 200}) {
        ScheduleConfig cfg;
        cfg.num_steps = n;
        const auto s = build_sigma_schedule(cfg);
        for (std::size_t i = 1; i < s.size(); ++i) EXPECT_LT(s[i], s[i - 1]);
        EXPECT_EQ(s.front(), 80.0);
        if (n > 1) EXPECT_EQ(s[n - 1], 0.002);
    }
}

TEST(Schedule, ZeroStepsRejected) {
    ScheduleConfig cfg;
    cfg.num_steps = 0;
    EXPECT_THROW(build_sigma_schedule(cfg), InvalidArgument);
}

TEST(Precondition, SkipDominatesAtSmallSigma) {
    RawNet zero = [](const nn::Var& in, std::span<const double>) { return nn::Var::zeros(in.shape()); };
    Denoiser d = precondition(zero, 0.5);
    nn::Var x = nn::Var::constant({1, 3}, {1.0, -2.0, 0.5});
    const std::vector<double> sigma{0.002};
    nn::Var out = d(x, sigma);
    const double c_skip = out.value()[0] / 1.0;
    EXPECT_GE(c_skip, 0.99998);
    for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(out.value()[j], c_skip * x.value()[j]);
}

TEST(Precondition, InputScaleNormalises) {
    for (double s : {1e-3, 0.1, 1.0, 7.0, 80.0}) {
        const auto c = precondition_coefficients(s, 0.5);
        EXPECT_NEAR(c.c_in * std::sqrt(s * s + 0.25), 1.0, 1e-15);
    }
}

TEST(Precondition, JacobianOfZeroNetIsSkipIdentity) {
    RawNet zero = [](const nn::Var& in, std::span<const double>) { return nn::scale(in, 0.0); };
    Denoiser d = precondition(zero, 0.5);
    const double sigma = 0.7;
    const double c_skip = precondition_coefficients(sigma, 0.5).c_skip;
    const std::vector<double> base{0.3, -1.1, 2.0};
    const double h = 1e-6;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            auto plus = base, minus = base;
            plus[i] += h;
            minus[i] -= h;
            const double fp = d(nn::Var::constant({1, 3}, plus), std::vector<double>{sigma}).value()[j];
            const double fm = d(nn::Var::constant({1, 3}, minus), std::vector<double>{sigma}).value()[j];
            const double fd = (fp - fm) / (2 * h);
            const double expected = i == j ? c_skip : 0.0;
            if (i == j) {
                EXPECT_LT(std::abs(fd - expected) / expected, 1e-6);
            } else {
                EXPECT_LT(std::abs(fd), 1e-9);
            }
        }
    }
}

TEST(Sampler, ZeroDenoiserCollapsesExactlyToZero) {
    Denoiser zero = [](const nn::Var& x, std::span<const double>) { return nn::Var::zeros(x.shape()); };
    Rng rng(21);
    SamplerConfig cfg;
    const auto out = sample(zero, {64, 3}, cfg, ScheduleConfig{}, std::span<Rng>(&rng, 1));
    for (double v : out) EXPECT_EQ(v, 0.0);
}

TEST(Sampler, GaussianMomentsDeterministic) {
    Rng rng(22);
    SamplerConfig cfg;
    const auto out = sample(gaussian_denoiser(1.0), {50000, 2}, cfg, ScheduleConfig{}, std::span<Rng>(&rng, 1));
    for (int j = 0; j < 2; ++j) {
        double m = 0.0, v = 0.0;
        for (int i = 0; i < 50000; ++i) m += out[i * 2 + j];
        m /= 50000;
        for (int i = 0; i < 50000; ++i) v += (out[i * 2 + j] - m) * (out[i * 2 + j] - m);
        v /= 49999;
        EXPECT_LE(std::abs(m), 0.02);
        EXPECT_GE(v, 0.95);
        EXPECT_LE(v, 1.05);
    }
}

TEST(Sampler, EqualSeedsGiveBitwiseEqualOutput) {
    SamplerConfig cfg;
    cfg.num_steps = 12;
    Rng a(5), b(5);
    const auto x = sample(gaussian_denoiser(0.7), {10, 4}, cfg, ScheduleConfig{}, std::span<Rng>(&a, 1));
    const auto y = sample(gaussian_denoiser(0.7), {10, 4}, cfg, ScheduleConfig{}, std::span<Rng>(&b, 1));
    EXPECT_EQ(x, y);
}

TEST(Sampler, PerRowStreamsAreBatchIndependent) {
    SamplerConfig cfg = SamplerConfig::image_default();
    cfg.num_steps = 10;
    std::vector<Rng> rngs{Rng(1), Rng(2), Rng(3)};
    const auto batch = sample(gaussian_denoiser(1.0), {3, 2}, cfg, ScheduleConfig{}, rngs);
    Rng solo(2);
    const auto single = sample(gaussian_denoiser(1.0), {1, 2}, cfg, ScheduleConfig{}, std::span<Rng>(&solo, 1));
    EXPECT_EQ(batch[2], single[0]);
    EXPECT_EQ(batch[3], single[1]);
}

TEST(Sampler, NonFiniteStateReportsStep) {
    Denoiser blowup = [](const nn::Var& x, std::span<const double> sigma) {
        std::vector<double> v(x.value().begin(), x.value().end());
        if (sigma[0] < 1.0) v[0] = std::numeric_limits<double>::infinity();
        return nn::Var::constant(x.shape(), v);
    };
    Rng rng(1);
    try {
        sample(blowup, {2, 2}, SamplerConfig{}, ScheduleConfig{}, std::span<Rng>(&rng, 1));
        FAIL() << "expected NumericFailure";
    } catch (const NumericFailure& e) {
        EXPECT_GE(e.step(), 0);
    }
}

TEST(Sampler, RejectsMismatchedGeneratorCount) {
    std::vector<Rng> rngs(2);
    EXPECT_THROW(sample(identity_denoiser(), {3, 2}, SamplerConfig{}, ScheduleConfig{}, rngs), InvalidArgument);
}

TEST(SigmaData, RmsOfCenteredData) {
    const std::vector<double> data{1.0, 10.0, 3.0, 14.0};  // two rows, two dims
    // Centered: {-1, -2, 1, 2} -> RMS sqrt(10/4).
    EXPECT_DOUBLE_EQ(estimate_sigma_data(data, 2), std::sqrt(2.5));
}
