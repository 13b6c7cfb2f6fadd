#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "test_support.hpp"
#include "vcdm/aux_model.hpp"
#include "vcdm/errors.hpp"

using namespace vcdm;
using namespace vcdm::aux;
using nn::Var;

namespace {

AuxModelConfig small_config(int embed_dim = 6, int class_count = 0, int aug = 0, int token_dim = 16) {
    AuxModelConfig c;
    c.embed_dim = embed_dim;
    c.token_dim = token_dim;
    c.num_layers = 2;
    c.num_heads = 2;
    c.class_count = class_count;
    c.aug_label_dim = aug;
    c.sigma_features = 16;
    return c;
}

Matrix gaussian_rows(int n, int d, Rng& rng, double scale = 1.0) {
    Matrix m(n, d);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
}

// Two clusters along the first coordinate at +-6 with spread 0.3.
AuxTrainData two_clusters(int n, int d, Rng& rng) {
    AuxTrainData data;
    data.embeddings = gaussian_rows(n, d, rng, 0.3);
    for (int i = 0; i < n; ++i) {
        const int c = i % 2;
        data.embeddings(i, 0) += c == 0 ? -6.0 : 6.0;
        data.classes.push_back(c);
    }
    return data;
}

AuxTrainSettings quick_settings(long steps, double lr) {
    AuxTrainSettings s;
    s.options.steps = steps;
    s.options.batch_size = 32;
    s.options.adam.lr = lr;
    s.options.ema_decay = 0.999;
    return s;
}

// Fixed-draw evaluation of the objective on standardized data.
double fixed_loss(const AuxModel& model, const Matrix& raw, std::span<const int> classes, std::uint64_t seed) {
    nn::NoGradGuard guard;
    const Matrix z = model.stats.apply(raw);
    Rng rng(seed);
    diffusion::LossWeighting w;
    w.sigma_data = model.sigma_data;
    const int reps = 64;
    const int d = static_cast<int>(z.cols());
    std::vector<double> x, sig;
    std::vector<int> cls;
    for (int r = 0; r < reps; ++r)
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            x.insert(x.end(), z.row(i).data(), z.row(i).data() + d);
            sig.push_back(diffusion::sample_train_sigma(w, rng));
            if (!classes.empty()) cls.push_back(classes[i]);
        }
    const auto eps = rng.normal_vector(x.size());
    const int rows = static_cast<int>(sig.size());
    return diffusion::denoising_loss_at(model.denoiser(cls), Var::constant({rows, d}, x), sig, eps, w).item();
}

}  // namespace

TEST(AuxModel, OutputShapeMatchesInputForSeveralBatchSizes) {
    Rng rng(1);
    AuxModel model(small_config(), rng);
    for (int b : {1, 7, 64}) {
        const Var y = Var::constant({b, 6}, rng.normal_vector(b * 6));
        std::vector<double> sigma(b, 0.7);
        const Var out = model.denoise(y, sigma, {});
        EXPECT_EQ(out.shape(), (nn::Shape{b, 6}));
    }
}

TEST(AuxModel, RejectsOutOfRangeClass) {
    Rng rng(2);
    AuxModel model(small_config(6, 3), rng);
    const Var y = Var::constant({2, 6}, rng.normal_vector(12));
    std::vector<double> sigma(2, 1.0);
    std::vector<int> bad{0, 3};
    EXPECT_THROW(model.denoise(y, sigma, bad), InvalidArgument);
    std::vector<int> ok{kNullClass, 2};
    EXPECT_NO_THROW(model.denoise(y, sigma, ok));
}

TEST(AuxModel, JacobianVectorProductMatchesFiniteDifferences) {
    Rng rng(3);
    AuxModel model(small_config(6, 3, 4), rng);
    for (int point = 0; point < 10; ++point) {
        Var y = Var::parameter({3, 6}, rng.normal_vector(18));
        const std::vector<double> sigma{0.05 + rng.uniform(), 0.5 + rng.uniform(), 3.0 * rng.uniform() + 0.1};
        const std::vector<int> cls{kNullClass, 1, 2};
        const std::vector<double> aug = testutil::random_vector(12, rng);
        const Var weights = Var::constant({3, 6}, rng.normal_vector(18));
        auto f = [&] { return nn::sum(nn::mul(model.denoise(y, sigma, cls, aug), weights)); };
        EXPECT_LT(testutil::gradient_check(f, {y}, rng), 1e-3) << "point " << point;
    }
}

TEST(AuxModel, ParameterGradientMatchesFiniteDifferences) {
    Rng rng(4);
    AuxModel model(small_config(5, 2), rng);
    std::vector<Var> params;
    for (std::size_t i = 0; i < model.params().size(); ++i) params.push_back(model.params().at(i));
    for (int point = 0; point < 10; ++point) {
        const Var y = Var::constant({2, 5}, rng.normal_vector(10));
        const std::vector<double> sigma{0.1 + rng.uniform(), 1.0 + rng.uniform()};
        const std::vector<int> cls{0, kNullClass};
        const Var weights = Var::constant({2, 5}, rng.normal_vector(10));
        auto f = [&] { return nn::sum(nn::mul(model.denoise(y, sigma, cls), weights)); };
        EXPECT_LT(testutil::gradient_check(f, params, rng), 1e-3) << "point " << point;
    }
}

TEST(AuxModel, BatchPermutationPermutesOutputs) {
    Rng rng(5);
    AuxModel model(small_config(6, 3), rng);
    const int b = 5;
    const auto yv = rng.normal_vector(b * 6);
    const std::vector<double> sigma{0.1, 0.5, 1.0, 2.0, 4.0};
    const std::vector<int> cls{0, kNullClass, 2, 1, kNullClass};
    const Var out = model.denoise(Var::constant({b, 6}, yv), sigma, cls);
    const std::vector<int> perm{3, 0, 4, 1, 2};
    std::vector<double> yp, sp;
    std::vector<int> cp;
    for (int i : perm) {
        yp.insert(yp.end(), yv.begin() + i * 6, yv.begin() + (i + 1) * 6);
        sp.push_back(sigma[i]);
        cp.push_back(cls[i]);
    }
    const Var outp = model.denoise(Var::constant({b, 6}, yp), sp, cp);
    for (int r = 0; r < b; ++r)
        for (int j = 0; j < 6; ++j) EXPECT_NEAR(outp.value()[r * 6 + j], out.value()[perm[r] * 6 + j], 1e-12);
}

TEST(AuxModel, NullRowMatchesSingleRowWithoutConditionToken) {
    Rng rng(6);
    AuxModel model(small_config(6, 3), rng);
    const auto yv = rng.normal_vector(12);
    const std::vector<double> sigma{0.8, 0.8};
    const std::vector<int> mixed{1, kNullClass};
    const Var both = model.denoise(Var::constant({2, 6}, yv), sigma, mixed);
    const std::vector<double> second(yv.begin() + 6, yv.end());
    const Var alone = model.denoise(Var::constant({1, 6}, second), std::vector<double>{0.8}, {});
    for (int j = 0; j < 6; ++j) EXPECT_EQ(both.value()[6 + j], alone.value()[j]);
}

TEST(AuxModel, EvaluationIsRepeatable) {
    Rng rng(7);
    AuxModel model(small_config(6, 0, 4), rng);
    const Var y = Var::constant({3, 6}, rng.normal_vector(18));
    const std::vector<double> sigma{0.3, 0.3, 0.3};
    const auto a = model.denoise(y, sigma, {});
    const auto b = model.denoise(y, sigma, {}, std::vector<double>(12, 0.0));
    EXPECT_TRUE(std::equal(a.value().begin(), a.value().end(), b.value().begin()));
}

TEST(Standardizer, RoundTripIsIdentity) {
    Rng rng(8);
    Matrix data = gaussian_rows(50, 7, rng, 3.0);
    data.col(2).setConstant(4.0);
    const auto s = Standardizer::fit(data);
    EXPECT_LT((s.invert(s.apply(data)) - data).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(TrainAux, OverfitsThreePointsWithinBudget) {
    Rng rng(9);
    AuxTrainData data;
    data.embeddings = gaussian_rows(3, 32, rng);
    AuxModel model(small_config(32, 0, 0, 64), rng);
    // Initial objective under the statistics train_aux will fit.
    model.stats = Standardizer::fit(data.embeddings);
    const Matrix z = model.stats.apply(data.embeddings);
    model.sigma_data = diffusion::estimate_sigma_data({z.data(), static_cast<std::size_t>(z.size())}, 32);
    const double initial = fixed_loss(model, data.embeddings, {}, 77);

    auto settings = quick_settings(2000, 2e-3);
    const auto result = train_aux(model, data, settings, Rng(10));
    ASSERT_EQ(result.history.size(), 2000u);
    const double final_loss = fixed_loss(model, data.embeddings, {}, 77);
    EXPECT_LT(final_loss, 0.1 * initial) << "initial " << initial << " final " << final_loss;

    auto median = [&](long lo, long hi) {
        std::vector<double> v;
        for (long s = lo; s < hi; ++s) v.push_back(result.history[s].loss);
        std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
        return v[v.size() / 2];
    };
    EXPECT_LT(median(1800, 2000), median(0, 200));
}

TEST(TrainAux, ZeroLearningRateLeavesParametersBitwiseUnchanged) {
    Rng rng(11);
    AuxModel model(small_config(), rng);
    const auto before = model.params().values();
    AuxTrainData data;
    data.embeddings = gaussian_rows(10, 6, rng);
    train_aux(model, data, quick_settings(100, 0.0), Rng(12));
    EXPECT_EQ(model.params().values(), before);
}

TEST(TrainAux, EqualSeedsGiveIdenticalLossCurves) {
    Rng data_rng(13);
    AuxTrainData data;
    data.embeddings = gaussian_rows(20, 6, data_rng);
    auto run = [&] {
        Rng init(14);
        AuxModel model(small_config(), init);
        return train_aux(model, data, quick_settings(40, 1e-3), Rng(15)).history;
    };
    const auto a = run(), b = run();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].loss, b[i].loss);
}

TEST(TrainAux, NonFiniteLossReportsStepAndSigma) {
    Rng rng(16);
    AuxModel model(small_config(), rng);
    AuxTrainData data;
    data.embeddings = gaussian_rows(10, 6, rng);
    auto settings = quick_settings(20, 1e300);
    try {
        train_aux(model, data, settings, Rng(17));
        FAIL() << "expected NumericFailure";
    } catch (const NumericFailure& e) {
        EXPECT_GE(e.step(), 1);
        EXPECT_GT(e.sigma(), 0.0);
    }
}

class TrainedTwoClusterPrior : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        Rng rng(18);
        data_ = new AuxTrainData(two_clusters(200, 4, rng));
        model_ = new AuxModel(small_config(4, 2), rng);
        auto settings = quick_settings(1500, 2e-3);
        settings.null_class_prob = 0.3;
        train_aux(*model_, *data_, settings, Rng(19));
    }
    static void TearDownTestSuite() {
        delete model_;
        delete data_;
    }
    static AuxModel* model_;
    static AuxTrainData* data_;
};
AuxModel* TrainedTwoClusterPrior::model_ = nullptr;
AuxTrainData* TrainedTwoClusterPrior::data_ = nullptr;

TEST_F(TrainedTwoClusterPrior, UnconditionalSamplesCoverClusters) {
    std::vector<int> cls(1000, kNullClass);
    Rng rng(20);
    const Matrix s = sample_embedding(*model_, cls, diffusion::SamplerConfig::embedding_default(), {},
                                      std::span<Rng>(&rng, 1));
    // Cluster radius: RMS distance of members to their center (spread 0.3 in 4-D).
    const double radius = 0.3 * 2.0;
    int inside = 0;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        Vector c0 = Vector::Zero(4), c1 = Vector::Zero(4);
        c0[0] = -6.0;
        c1[0] = 6.0;
        const Vector v = s.row(i).transpose();
        if (std::min((v - c0).norm(), (v - c1).norm()) <= 3.0 * radius) ++inside;
    }
    EXPECT_GE(inside, 950);
}

TEST_F(TrainedTwoClusterPrior, ClassZeroSamplesLandInClusterZero) {
    std::vector<int> cls(1000, 0);
    Rng rng(21);
    const Matrix s = sample_embedding(*model_, cls, diffusion::SamplerConfig::embedding_default(), {},
                                      std::span<Rng>(&rng, 1));
    int in_zero = 0;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        Vector c0 = Vector::Zero(4);
        c0[0] = -6.0;
        if ((s.row(i).transpose() - c0).norm() <= 3.0 * 0.6) ++in_zero;
    }
    EXPECT_GE(in_zero, 950);
}

TEST_F(TrainedTwoClusterPrior, DroppingConditionChangesOutput) {
    Rng rng(22);
    const Var y = Var::constant({1, 4}, rng.normal_vector(4));
    const std::vector<double> sigma{2.0};
    const Var with_null = model_->denoise(y, sigma, std::vector<int>{kNullClass});
    const Var with_zero = model_->denoise(y, sigma, std::vector<int>{0});
    double diff = 0.0;
    for (int j = 0; j < 4; ++j) diff = std::max(diff, std::abs(with_null.value()[j] - with_zero.value()[j]));
    EXPECT_GT(diff, 0.0);
}

TEST_F(TrainedTwoClusterPrior, SamplingIsDeterministicGivenSeed) {
    std::vector<int> cls(16, kNullClass);
    Rng a(23), b(23);
    const auto cfg = diffusion::SamplerConfig::embedding_default();
    EXPECT_EQ(sample_embedding(*model_, cls, cfg, {}, std::span<Rng>(&a, 1)),
              sample_embedding(*model_, cls, cfg, {}, std::span<Rng>(&b, 1)));
}

TEST(AuxModel, SamplingFeedsZeroAugmentationLabel) {
    Rng rng(24);
    AuxModel model(small_config(6, 0, 4), rng);
    model.stats = Standardizer::fit(gaussian_rows(10, 6, rng));
    std::vector<TokenTrace> traces;
    model.set_token_observer([&](const TokenTrace& t) { traces.push_back(t); });
    std::vector<int> cls(3, kNullClass);
    auto cfg = diffusion::SamplerConfig::embedding_default();
    cfg.num_steps = 4;
    sample_embedding(model, cls, cfg, {}, std::span<Rng>(&rng, 1));
    ASSERT_FALSE(traces.empty());
    for (const auto& t : traces) {
        EXPECT_EQ(t.tokens, (std::vector<std::string>{"sigma", "noisy", "aug", "query"}));
        ASSERT_EQ(t.aug_labels.size(), 12u);
        for (double v : t.aug_labels) EXPECT_EQ(v, 0.0);
    }
}

TEST(AuxModel, TokenOrderWithConditionHasQueryLast) {
    Rng rng(25);
    AuxModel model(small_config(6, 2, 3), rng);
    TokenTrace seen;
    model.set_token_observer([&](const TokenTrace& t) { seen = t; });
    model.denoise(Var::constant({1, 6}, rng.normal_vector(6)), std::vector<double>{1.0}, std::vector<int>{1});
    EXPECT_EQ(seen.tokens, (std::vector<std::string>{"sigma", "cond", "noisy", "aug", "query"}));
}

TEST(AuxModel, CheckpointRoundTripReproducesOutputs) {
    Rng rng(26);
    AuxModel model(small_config(6, 2), rng);
    model.stats = Standardizer::fit(gaussian_rows(10, 6, rng));
    model.sigma_data = 0.9;
    train::TrainOptions opts;
    Checkpoint ck;
    model.write_meta(ck);
    // Minimal checkpoint: parameters under both prefixes.
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        const auto& p = model.params().at(i);
        ck.put("ema/" + model.params().name(i), p.shape(), {p.value().begin(), p.value().end()});
    }
    const AuxModel loaded = AuxModel::load(ck);
    const Var y = Var::constant({2, 6}, rng.normal_vector(12));
    const std::vector<double> sigma{0.4, 2.0};
    const std::vector<int> cls{0, 1};
    const auto a = model.denoise(y, sigma, cls), b = loaded.denoise(y, sigma, cls);
    EXPECT_TRUE(std::equal(a.value().begin(), a.value().end(), b.value().begin()));
    EXPECT_THROW(AuxModel::load(std::filesystem::path("/nonexistent/aux.ckpt")), NotReady);
}
