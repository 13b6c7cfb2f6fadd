#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "vcdm/errors.hpp"
#include "vcdm/evaluation.hpp"
#include "vcdm/pipeline.hpp"
#include "vcdm/toy.hpp"

using namespace vcdm;
using namespace vcdm::pipeline;

namespace {

image_model::ImageModelConfig point_model(image_model::Regime regime, int y_dim, int width = 16) {
    image_model::ImageModelConfig c;
    c.arch = image_model::Architecture::kMlp;
    c.data_dim = 2;
    c.mlp_width = width;
    c.mlp_blocks = 1;
    c.sigma_features = 8;
    c.regime = regime;
    c.y_dim = y_dim;
    return c;
}

aux::AuxModelConfig small_aux(int dim) {
    aux::AuxModelConfig c;
    c.embed_dim = dim;
    c.token_dim = 16;
    c.num_layers = 1;
    c.num_heads = 2;
    c.sigma_features = 8;
    return c;
}

SamplingPlan quick_plan(int count, std::uint64_t seed) {
    SamplingPlan p;
    p.count = count;
    p.seed = seed;
    p.stage1_sampler.num_steps = 4;
    p.stage2_sampler.num_steps = 4;
    p.chunk_size = 64;
    return p;
}

bool same(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && std::equal(a.data(), a.data() + a.size(), b.data());
}

}  // namespace

TEST(Pipeline, PointMassPriorReproducesOracleBitwise) {
    Rng rng(1);
    image_model::ImageModel cond(point_model(image_model::Regime::kEmbedding, 3), rng);
    const std::vector<double> y{0.3, -1.2, 2.0};
    EmbeddingDataset data;
    data.y = Eigen::Map<const Matrix>(y.data(), 1, 3);
    const auto plan = quick_plan(50, 7);
    const auto v = vcdm_sample(plan, point_mass_source(y), 3, "point-mass", {&cond, "cond"});
    const auto o = oracle_sample(plan, data, {&cond, "cond"});
    EXPECT_TRUE(same(v.x, o.x));
}

TEST(Pipeline, EqualSeedsGiveBitwiseEqualBatches) {
    Rng rng(2);
    aux::AuxModel prior(small_aux(3), rng);
    image_model::ImageModel cond(point_model(image_model::Regime::kEmbedding, 3), rng);
    const auto a = vcdm_sample(quick_plan(20, 5), prior, "aux", {&cond, "cond"});
    const auto b = vcdm_sample(quick_plan(20, 5), prior, "aux", {&cond, "cond"});
    const auto c = vcdm_sample(quick_plan(20, 6), prior, "aux", {&cond, "cond"});
    EXPECT_TRUE(same(a.x, b.x));
    EXPECT_FALSE(same(a.x, c.x));
}

TEST(Pipeline, EmbeddingsAreDiscardedUnlessDebugging) {
    Rng rng(3);
    aux::AuxModel prior(small_aux(3), rng);
    image_model::ImageModel cond(point_model(image_model::Regime::kEmbedding, 3), rng);
    auto plan = quick_plan(6, 1);
    const auto plain = vcdm_sample(plan, prior, "aux", {&cond, "cond"});
    EXPECT_EQ(plain.y.size(), 0);
    EXPECT_EQ(plain.x.rows(), 6);
    plan.keep_embeddings = true;
    const auto debug = vcdm_sample(plan, prior, "aux", {&cond, "cond"});
    EXPECT_EQ(debug.y.rows(), 6);
    EXPECT_EQ(debug.y.cols(), 3);
    EXPECT_TRUE(same(plain.x, debug.x));
}

TEST(Pipeline, StageDimensionMismatchNamesBothModels) {
    Rng rng(4);
    aux::AuxModel prior(small_aux(4), rng);
    image_model::ImageModel cond(point_model(image_model::Regime::kEmbedding, 3), rng);
    try {
        vcdm_sample(quick_plan(2, 0), prior, "prior-A.ckpt", {&cond, "image-B.ckpt"});
        FAIL() << "expected a configuration error";
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("prior-A.ckpt"), std::string::npos);
        EXPECT_NE(msg.find("image-B.ckpt"), std::string::npos);
    }
}

TEST(Oracle, FullCountUsesEachRowExactlyOnce) {
    EmbeddingDataset data;
    data.y = Matrix::Random(37, 2);
    auto rows = oracle_rows(data, {}, 37, 9);
    std::sort(rows.begin(), rows.end());
    for (int i = 0; i < 37; ++i) EXPECT_EQ(rows[static_cast<std::size_t>(i)], i);
}

TEST(Oracle, DrawsWithReplacementBeyondDatasetSize) {
    EmbeddingDataset data;
    data.y = Matrix::Random(5, 2);
    const auto rows = oracle_rows(data, {}, 40, 3);
    EXPECT_EQ(rows.size(), 40u);
    for (int r : rows) EXPECT_TRUE(r >= 0 && r < 5);
    std::vector<int> counts(5);
    for (int r : rows) ++counts[static_cast<std::size_t>(r)];
    EXPECT_GT(*std::max_element(counts.begin(), counts.end()), 1);
}

TEST(Oracle, ConditionalProtocolDrawsFromMatchingClass) {
    EmbeddingDataset data;
    data.y = Matrix::Random(30, 2);
    for (int i = 0; i < 30; ++i) data.classes.push_back(i % 3);
    for (int r : oracle_rows(data, {1}, 10, 4)) EXPECT_EQ(r % 3, 1);
    EXPECT_THROW(oracle_rows(data, {7}, 3, 0), InvalidArgument);
    EmbeddingDataset unlabelled;
    unlabelled.y = Matrix::Random(4, 2);
    EXPECT_THROW(matching_rows(unlabelled, {0}), InvalidArgument);
}

TEST(ClassCond, DegenerateCodebookMatchesConstantConditioning) {
    Rng rng(5);
    image_model::ImageModel model(point_model(image_model::Regime::kCluster, 1), rng);
    embedding::KMeansCodebook cb;
    cb.centroids = Matrix::Zero(1, 3);
    const std::vector<double> dist{1.0};
    const auto plan = quick_plan(30, 8);
    const auto batch = class_cond_sample(plan, cb, dist, {&model, "cc"});
    const Matrix ones = Matrix::Ones(30, 1);
    EXPECT_TRUE(same(batch.x, sample_images(plan, model, ones)));
}

TEST(ClassCond, ClusterFrequenciesMatchCategorical) {
    Rng rng(6);
    image_model::ImageModel model(point_model(image_model::Regime::kCluster, 4, 4), rng);
    embedding::KMeansCodebook cb;
    cb.centroids = Matrix::Random(4, 2);
    const std::vector<double> dist{0.1, 0.2, 0.3, 0.4};
    auto plan = quick_plan(10000, 11);
    plan.stage2_sampler.num_steps = 1;
    plan.chunk_size = 2500;
    const auto batch = class_cond_sample(plan, cb, dist, {&model, "cc"});
    std::vector<long> counts(4);
    for (int id : batch.cluster_ids) ++counts[static_cast<std::size_t>(id)];
    for (int k = 0; k < 4; ++k) {
        const double p = dist[static_cast<std::size_t>(k)];
        EXPECT_NEAR(counts[static_cast<std::size_t>(k)], 10000 * p, 3.0 * std::sqrt(10000 * p * (1 - p)));
    }
    const auto again = class_cond_sample(plan, cb, dist, {&model, "cc"});
    EXPECT_EQ(again.cluster_ids, batch.cluster_ids);
    EXPECT_TRUE(same(again.x, batch.x));
}

TEST(ClassCond, SizeMismatchIsInvalid) {
    Rng rng(7);
    image_model::ImageModel model(point_model(image_model::Regime::kCluster, 3), rng);
    embedding::KMeansCodebook cb;
    cb.centroids = Matrix::Zero(3, 2);
    const std::vector<double> wrong{0.5, 0.5};
    EXPECT_THROW(class_cond_sample(quick_plan(2, 0), cb, wrong, {&model, "cc"}), InvalidArgument);
    cb.centroids = Matrix::Zero(2, 2);
    EXPECT_THROW(class_cond_sample(quick_plan(2, 0), cb, wrong, {&model, "cc"}), InvalidArgument);
}

TEST(EdmDirect, RequiresUnconditionalModel) {
    Rng rng(8);
    image_model::ImageModel cond(point_model(image_model::Regime::kEmbedding, 3), rng);
    EXPECT_THROW(edm_direct(quick_plan(2, 0), {&cond, "cond"}), ConfigError);
    image_model::ImageModel base(point_model(image_model::Regime::kUnconditional, 0), rng);
    EXPECT_EQ(edm_direct(quick_plan(3, 0), {&base, "base"}).x.rows(), 3);
}

TEST(Seeds, NoCollisionsAcrossAMillionItems) {
    std::unordered_set<std::uint64_t> seen;
    seen.reserve(2'000'000);
    for (std::uint64_t i = 0; i < 1'000'000; ++i) {
        EXPECT_TRUE(seen.insert(item_seed(42, i, 0)).second) << i;
        EXPECT_TRUE(seen.insert(item_seed(42, i, 1)).second) << i;
    }
}

TEST(Timing, OverheadFractionIsAProperFraction) {
    Rng rng(9);
    aux::AuxModel prior(small_aux(3), rng);
    image_model::ImageModelConfig big = point_model(image_model::Regime::kEmbedding, 3, 128);
    big.mlp_blocks = 4;
    image_model::ImageModel image(big, rng);
    ASSERT_GE(image.params().scalar_count(), 10 * prior.params().scalar_count());
    SamplingPlan plan = quick_plan(5, 1);
    plan.stage1_sampler = diffusion::SamplerConfig::embedding_default();
    plan.stage2_sampler = diffusion::SamplerConfig::image_default();
    const auto t = timing_report(plan, prior, image);
    EXPECT_GT(t.overhead_fraction, 0.0);
    EXPECT_LT(t.overhead_fraction, 1.0);
    EXPECT_EQ(t.items, 5);
    EXPECT_NE(format_timing(t).find("overhead"), std::string::npos);
}

TEST(Methods, NamesRoundTrip) {
    for (Method m : {Method::kVcdm, Method::kEdmDirect, Method::kClassCond, Method::kVcdmOracle})
        EXPECT_EQ(method_from_string(to_string(m)), m);
    EXPECT_THROW(method_from_string("gan"), ConfigError);
}

// Trained ring toy shared by the coverage checks.
class TrainedRing : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        Rng data_rng(100);
        data_ = new toy::RingData(toy::make_ring(8000, ring_, data_rng));
        Rng init(101);
        aux::AuxModelConfig ac = small_aux(ring_.y_dim());
        ac.token_dim = 32;
        prior_ = new aux::AuxModel(ac, init);
        aux::AuxTrainSettings as;
        as.options.steps = 1500;
        as.options.batch_size = 128;
        as.options.adam.lr = 2e-3;
        as.options.ema_decay = 0.999;
        const auto ar = aux::train_aux(*prior_, {data_->y, {}, {}}, as, Rng(102));
        prior_->params().assign(ar.ema_values);

        image_ = new image_model::ImageModel(point_model(image_model::Regime::kEmbedding, ring_.y_dim(), 64), init);
        image_model::ImageTrainSettings is;
        is.options.steps = 400;
        is.options.batch_size = 128;
        is.options.adam.lr = 2e-3;
        is.options.ema_decay = 0.99;
        const auto ir = image_model::train_image_model(*image_, {data_->x, data_->y, {}}, is, Rng(103));
        image_->params().assign(ir.ema_values);
    }
    static void TearDownTestSuite() {
        delete image_;
        delete prior_;
        delete data_;
    }

    static inline toy::RingConfig ring_{};
    static inline toy::RingData* data_ = nullptr;
    static inline aux::AuxModel* prior_ = nullptr;
    static inline image_model::ImageModel* image_ = nullptr;
};

TEST_F(TrainedRing, VcdmCoversEveryMode) {
    SamplingPlan plan;
    plan.count = 10000;
    plan.seed = 1;
    plan.chunk_size = 1000;
    const auto batch = vcdm_sample(plan, *prior_, "aux", {image_, "image"});
    const auto d = eval::toy_divergence(batch.x, data_->x, ring_);
    for (long c : d.counts) EXPECT_GE(c, 500) << "mode share below 5%";
}

TEST_F(TrainedRing, OracleCoverageIsACeiling) {
    EmbeddingDataset data{data_->y, {}};
    std::vector<double> diffs;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SamplingPlan plan;
        plan.count = 2000;
        plan.seed = 10 + seed;
        plan.chunk_size = 1000;
        const double v =
            eval::toy_divergence(vcdm_sample(plan, *prior_, "aux", {image_, "image"}).x, data_->x, ring_).coverage();
        const double o = eval::toy_divergence(oracle_sample(plan, data, {image_, "image"}).x, data_->x, ring_).coverage();
        diffs.push_back(o - v);
    }
    std::nth_element(diffs.begin(), diffs.begin() + 2, diffs.end());
    EXPECT_GE(diffs[2], -0.02);
}
