#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "vcdm/errors.hpp"
#include "vcdm/evaluation.hpp"

using namespace vcdm;
using namespace vcdm::eval;

namespace {

GaussianStats gauss(std::vector<double> mean, Eigen::MatrixXd cov) {
    GaussianStats g;
    g.mean = Eigen::Map<Vector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    g.cov = std::move(cov);
    g.count = 100;
    return g;
}

GaussianStats gauss1(double mu, double var) {
    Eigen::MatrixXd c(1, 1);
    c(0, 0) = var;
    return gauss({mu}, c);
}

GaussianStats random_psd(int k, Rng& rng, bool rank_deficient = false) {
    Eigen::MatrixXd a(k, rank_deficient ? k / 2 : k);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
    std::vector<double> mu(static_cast<std::size_t>(k));
    for (auto& m : mu) m = rng.normal();
    return gauss(mu, a * a.transpose());
}

// Independent oracle: principal square root via Schur-free Denman-Beavers
// iteration on the (generally non-symmetric) product S1 S2.
double frechet_denman_beavers(const GaussianStats& a, const GaussianStats& b) {
    Eigen::MatrixXd y = a.cov * b.cov;
    Eigen::MatrixXd z = Eigen::MatrixXd::Identity(y.rows(), y.cols());
    for (int it = 0; it < 100; ++it) {
        const Eigen::MatrixXd y_next = 0.5 * (y + z.inverse());
        const Eigen::MatrixXd z_next = 0.5 * (z + y.inverse());
        y = y_next;
        z = z_next;
    }
    return (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * y.trace();
}

Matrix gaussian_rows(int n, const Vector& mean, const Eigen::MatrixXd& chol, Rng& rng) {
    Matrix out(n, mean.size());
    Vector z(mean.size());
    for (int i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < z.size(); ++j) z[j] = rng.normal();
        out.row(i) = (mean + chol * z).transpose();
    }
    return out;
}

}  // namespace

TEST(FrechetDistance, IdenticalGaussiansGiveZero) {
    Rng rng(1);
    for (int k : {1, 3, 16}) {
        const auto g = random_psd(k, rng);
        EXPECT_NEAR(frechet_distance(g, g), 0.0, 1e-10) << "k = " << k;
    }
}

TEST(FrechetDistance, UnivariateClosedForms) {
    EXPECT_NEAR(frechet_distance(gauss1(0, 1), gauss1(1, 1)), 1.0, 1e-8);
    EXPECT_NEAR(frechet_distance(gauss1(0, 1), gauss1(0, 4)), 1.0, 1e-8);
    // (mu1 - mu2)^2 + (s1 - s2)^2
    EXPECT_NEAR(frechet_distance(gauss1(2, 9), gauss1(-1, 0.25)), 9.0 + 6.25, 1e-8);
}

TEST(FrechetDistance, SymmetricOnRandomPsdPairs) {
    Rng rng(2);
    for (int i = 0; i < 100; ++i) {
        const int k = 1 + static_cast<int>(rng.below(12));
        const auto a = random_psd(k, rng, i % 4 == 0), b = random_psd(k, rng);
        const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
        EXPECT_NEAR(ab, ba, 1e-8 * std::max(1.0, ab)) << "pair " << i;
        EXPECT_GE(ab, 0.0);
    }
}

TEST(FrechetDistance, MatchesIterativeSquareRootOracle) {
    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
        const int k = 2 + static_cast<int>(rng.below(6));
        auto a = random_psd(k, rng), b = random_psd(k, rng);
        a.cov.diagonal().array() += 0.5;
        b.cov.diagonal().array() += 0.5;
        const double ours = frechet_distance(a, b);
        EXPECT_NEAR(ours, frechet_denman_beavers(a, b), 1e-8 * std::max(1.0, ours));
    }
}

TEST(FrechetDistance, DiagonalCaseIsSumOfUnivariateTerms) {
    Eigen::MatrixXd c1 = Eigen::Vector3d(1, 4, 9).asDiagonal(), c2 = Eigen::Vector3d(4, 4, 1).asDiagonal();
    const double expected = (1.0 + 0.0 + 4.0) + (1.0 + 0.0 + 4.0);  // means then (s1 - s2)^2
    EXPECT_NEAR(frechet_distance(gauss({0, 0, 0}, c1), gauss({1, 0, 2}, c2)), expected, 1e-10);
}

TEST(FrechetDistance, DimensionMismatchAndNonPsdAreRejected) {
    Rng rng(4);
    EXPECT_THROW(frechet_distance(random_psd(2, rng), random_psd(3, rng)), InvalidArgument);
    Eigen::MatrixXd bad(2, 2);
    bad << 1, 0, 0, -1;
    EXPECT_THROW(frechet_distance(gauss({0, 0}, bad), random_psd(2, rng)), InvalidArgument);
}

TEST(FitGaussian, TwoPointHandArithmetic) {
    Matrix x(2, 1);
    x << 0, 2;
    const auto g = fit_gaussian(x);
    EXPECT_DOUBLE_EQ(g.mean[0], 1.0);
    EXPECT_DOUBLE_EQ(g.cov(0, 0), 2.0);
    EXPECT_EQ(g.count, 2);
}

TEST(FitGaussian, NeedsTwoRows) {
    EXPECT_THROW(fit_gaussian(Matrix(1, 3)), InvalidArgument);
    EXPECT_THROW(fit_gaussian(Matrix(0, 3)), InvalidArgument);
}

TEST(FitGaussian, CovarianceIsExactlySymmetric) {
    Rng rng(5);
    Matrix x(50, 7);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal() * (1 + i % 3);
    const auto g = fit_gaussian(x);
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 7; ++j) EXPECT_EQ(g.cov(i, j), g.cov(j, i));
}

TEST(FitGaussian, MonteCarloMatchesKnownGaussian) {
    Rng rng(6);
    Eigen::MatrixXd l(3, 3);
    l << 1.0, 0, 0, 0.5, 2.0, 0, -0.3, 0.2, 0.7;
    const Vector mean = Eigen::Vector3d(1, -2, 0.5);
    const Eigen::MatrixXd cov = l * l.transpose();
    const auto g = fit_gaussian(gaussian_rows(100000, mean, l, rng));
    EXPECT_LT((g.cov - cov).norm() / cov.norm(), 0.02);
    EXPECT_LT((g.mean - mean).norm(), 0.05);
}

TEST(FidProtocol, ResamplerScoresBelowSplitHalfBaseline) {
    Rng rng(7);
    Eigen::MatrixXd l = Eigen::MatrixXd::Identity(4, 4);
    l(1, 0) = 0.8;
    const Matrix reference = gaussian_rows(10000, Vector::Zero(4), l, rng);
    const IdentityExtractor ext(4);
    Rng base_rng(8);
    const double baseline = split_half_baseline(reference, 5000, base_rng);
    const Generator resampler = [&](int n, std::uint64_t seed) {
        Rng r(seed);
        Matrix out(n, 4);
        for (int i = 0; i < n; ++i) out.row(i) = reference.row(static_cast<Eigen::Index>(r.below(10000)));
        return out;
    };
    FidOptions opts;
    opts.n = 5000;
    opts.seed = 9;
    const auto res = fid_protocol(resampler, reference, ext, opts);
    EXPECT_LT(res.score, baseline);
    EXPECT_EQ(res.n, 5000);
    EXPECT_EQ(res.extractor, "identity");

    const Generator constant = [](int n, std::uint64_t) { return Matrix(Matrix::Constant(n, 4, 0.1)); };
    // A constant generator has a zero covariance; shrinkage keeps it PSD.
    FidOptions shrink = opts;
    shrink.shrinkage = 1e-6;
    EXPECT_GE(fid_protocol(constant, reference, ext, shrink).score, 10.0 * baseline);
}

TEST(FidProtocol, InvariantToSampleOrder) {
    Rng rng(10);
    const Matrix reference = gaussian_rows(3000, Vector::Zero(3), Eigen::MatrixXd::Identity(3, 3), rng);
    const Matrix generated = gaussian_rows(2000, Vector::Ones(3), Eigen::MatrixXd::Identity(3, 3), rng);
    Matrix shuffled = generated;
    std::vector<int> perm(2000);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    for (int i = 0; i < 2000; ++i) shuffled.row(i) = generated.row(perm[static_cast<std::size_t>(i)]);
    const IdentityExtractor ext(3);
    FidOptions opts;
    opts.n = 2000;
    const double a = fid_protocol([&](int, std::uint64_t) { return generated; }, reference, ext, opts).score;
    const double b = fid_protocol([&](int, std::uint64_t) { return shuffled; }, reference, ext, opts).score;
    EXPECT_NEAR(a, b, 1e-10);
}

TEST(FidProtocol, TooFewSamplesNeedShrinkage) {
    Rng rng(11);
    const Matrix reference = gaussian_rows(100, Vector::Zero(8), Eigen::MatrixXd::Identity(8, 8), rng);
    const IdentityExtractor ext(8);
    const Generator gen = [&](int n, std::uint64_t) { return Matrix(reference.topRows(n)); };
    FidOptions opts;
    opts.n = 8;
    EXPECT_THROW(fid_protocol(gen, reference, ext, opts), InvalidArgument);
    opts.shrinkage = 0.1;
    EXPECT_NO_THROW(fid_protocol(gen, reference, ext, opts));
}

TEST(SplitHalf, BaselineDecreasesWithSampleSize) {
    Rng rng(12);
    const Matrix reference = gaussian_rows(10000, Vector::Zero(6), Eigen::MatrixXd::Identity(6, 6), rng);
    Rng r(13);
    const double b500 = split_half_baseline(reference, 500, r, 5);
    const double b2000 = split_half_baseline(reference, 2000, r, 5);
    const double b5000 = split_half_baseline(reference, 5000, r, 5);
    EXPECT_GT(b500, b2000);
    EXPECT_GT(b2000, b5000);
    EXPECT_THROW(split_half_baseline(reference, 6000, r), InvalidArgument);
}

TEST(Extractors, InceptionIsExternalOnly) {
    EXPECT_THROW(make_extractor(ExtractorBackend::kInceptionExternal, {3, 8, 8}), BackendUnavailable);
    EXPECT_EQ(make_extractor(ExtractorBackend::kIdentity, {3, 4, 4})->output_dim(), 48);
    EXPECT_EQ(extractor_from_string("proxy"), ExtractorBackend::kProxyEmbedder);
    EXPECT_THROW(extractor_from_string("vgg"), ConfigError);
}

TEST(Extractors, ProxyIsDeterministicWithFixedDimension) {
    const auto ext = make_extractor(ExtractorBackend::kProxyEmbedder, {3, 8, 8});
    Rng rng(14);
    Matrix items(5, 192);
    for (Eigen::Index i = 0; i < items.size(); ++i) items.data()[i] = 2 * rng.uniform() - 1;
    const Matrix a = ext->extract(items), b = ext->extract(items);
    EXPECT_EQ(a.cols(), ext->output_dim());
    EXPECT_TRUE(a == b);
    EXPECT_THROW(ext->extract(Matrix(2, 10)), InvalidArgument);
}

TEST(ToyDivergence, IdenticalSetsScoreZero) {
    toy::RingConfig ring;
    Rng rng(15);
    const auto d = toy::make_ring(2000, ring, rng);
    const auto t = toy_divergence(d.x, d.x, ring);
    EXPECT_NEAR(t.frechet, 0.0, 1e-10);
    EXPECT_EQ(std::accumulate(t.counts.begin(), t.counts.end(), 0L), 2000);
}

TEST(ToyDivergence, TranslationBoundsFrechetBelow) {
    toy::RingConfig ring;
    Rng rng(16);
    const auto d = toy::make_ring(3000, ring, rng);
    for (double delta : {0.1, 0.5, 2.0}) {
        Matrix shifted = d.x;
        shifted.col(0).array() += delta;
        EXPECT_GE(toy_divergence(shifted, d.x, ring).frechet, delta * delta - 1e-12);
    }
}

TEST(ToyDivergence, MissingModeFlagsExactlyOneEmptyBin) {
    toy::RingConfig ring;
    Rng rng(17);
    const auto ref = toy::make_ring(4000, ring, rng);
    auto gen = toy::make_ring(4000, ring, rng);
    std::vector<int> keep;
    for (int i = 0; i < gen.x.rows(); ++i)
        if (gen.mode[static_cast<std::size_t>(i)] != 5) keep.push_back(i);
    Matrix missing(static_cast<Eigen::Index>(keep.size()), 2);
    for (std::size_t i = 0; i < keep.size(); ++i) missing.row(static_cast<Eigen::Index>(i)) = gen.x.row(keep[i]);
    const auto t = toy_divergence(missing, ref.x, ring);
    EXPECT_EQ(t.empty_modes(), std::vector<int>{5});
    EXPECT_TRUE(toy_divergence(gen.x, ref.x, ring).empty_modes().empty());
}

TEST(MetricsCsv, AppendsRowsUnderOneHeader) {
    const auto path = std::filesystem::temp_directory_path() / "vcdm_metrics_test.csv";
    std::filesystem::remove(path);
    append_metric_row(path, {"abc", "vcdm", 100, 5000, "proxy", 1.25, 3});
    append_metric_row(path, {"abc", "edm", 100, 5000, "proxy", 2.5, 3});
    const auto rows = read_metric_rows(path);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[1].method, "edm");
    EXPECT_EQ(rows[0].score, 1.25);
    EXPECT_EQ(rows[0].seed, 3u);
    std::filesystem::remove(path);
}
