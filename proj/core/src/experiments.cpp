#include "vcdm/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "vcdm/embedding.hpp"
#include "vcdm/errors.hpp"

namespace vcdm::experiments {

namespace {

// Stream ids under the run seed.
enum Stream : std::uint64_t {
    kData = 0,
    kAuxInit = 1,
    kAuxTrain = 2,
    kImageTrain = 3,
    kImageInit = 4,
    kKMeans = 5,
    kPlan = 6,
    kFloor = 7,
};

std::uint64_t stream(std::uint64_t seed, Stream s) { return derive_seed(seed, s); }

train::TrainOptions options_for(const ToyBudget& b) {
    train::TrainOptions o;
    o.steps = b.steps;
    o.batch_size = b.batch_size;
    o.adam.lr = b.lr;
    o.ema_decay = b.ema_decay;
    return o;
}

Matrix one_hot_codes(const embedding::KMeansCodebook& cb, const Matrix& y) {
    Matrix out = Matrix::Zero(y.rows(), cb.size());
    for (Eigen::Index i = 0; i < y.rows(); ++i)
        out(i, embedding::kmeans_assign(cb, {y.row(i).data(), static_cast<std::size_t>(y.cols())})) = 1.0;
    return out;
}

}  // namespace

aux::AuxModelConfig ToyConfig::default_aux() {
    aux::AuxModelConfig c;
    c.embed_dim = toy::RingConfig{}.y_dim();
    c.token_dim = 32;
    c.num_layers = 2;
    c.num_heads = 2;
    c.sigma_features = 16;
    return c;
}

diffusion::SamplerConfig ToyConfig::default_stage1_sampler() {
    diffusion::SamplerConfig s = diffusion::SamplerConfig::image_default();
    s.num_steps = 64;
    return s;
}

image_model::ImageModelConfig ToyConfig::image_config(image_model::Regime regime, int y_dim) const {
    image_model::ImageModelConfig c;
    c.arch = image_model::Architecture::kMlp;
    c.data_dim = 2;
    c.mlp_width = mlp_width;
    c.mlp_blocks = mlp_blocks;
    c.sigma_features = sigma_features;
    c.regime = regime;
    c.y_dim = regime == image_model::Regime::kUnconditional ? 0 : y_dim;
    return c;
}

ToyData make_toy_data(const ToyConfig& cfg, std::uint64_t seed) {
    Rng rng(stream(seed, kData));
    ToyData d;
    d.train = toy::make_ring(cfg.n_train, cfg.ring, rng);
    d.reference = toy::make_ring(cfg.n_reference, cfg.ring, rng);
    return d;
}

aux::AuxModel train_toy_aux(const ToyConfig& cfg, const Matrix& y, std::uint64_t seed) {
    aux::AuxModelConfig ac = cfg.aux;
    ac.embed_dim = static_cast<int>(y.cols());
    Rng init(stream(seed, kAuxInit));
    aux::AuxModel model(ac, init);
    aux::AuxTrainSettings s;
    s.options = options_for(cfg.aux_budget);
    const auto r = aux::train_aux(model, {y, {}, {}}, s, Rng(stream(seed, kAuxTrain)));
    model.params().assign(r.ema_values);
    return model;
}

image_model::ImageModel train_toy_image(const ToyConfig& cfg, image_model::Regime regime, const Matrix& x,
                                        const Matrix& y, const ToyBudget& budget, std::uint64_t seed) {
    Rng init(stream(seed, kImageInit));
    image_model::ImageModel model(cfg.image_config(regime, static_cast<int>(y.cols())), init);
    image_model::ImageTrainSettings s;
    s.options = options_for(budget);
    image_model::ImageTrainData data;
    data.x = x;
    if (regime != image_model::Regime::kUnconditional) data.y = y;
    const auto r = image_model::train_image_model(model, data, s, Rng(stream(seed, kImageTrain)));
    model.params().assign(r.ema_values);
    return model;
}

ToyComparison run_toy_comparison(const ToyConfig& cfg, std::uint64_t seed) {
    using image_model::Regime;
    using pipeline::Method;
    const ToyData data = make_toy_data(cfg, seed);
    const Matrix& x = data.train.x;
    const Matrix& y = data.train.y;

    const aux::AuxModel prior = train_toy_aux(cfg, y, seed);
    const auto edm = train_toy_image(cfg, Regime::kUnconditional, x, Matrix(), cfg.image_budget, seed);
    const auto cond = train_toy_image(cfg, Regime::kEmbedding, x, y, cfg.image_budget, seed);
    Rng km(stream(seed, kKMeans));
    const auto codebook = embedding::kmeans_fit(y, cfg.clusters, km);
    const auto cluster_model =
        train_toy_image(cfg, Regime::kCluster, x, one_hot_codes(codebook, y), cfg.image_budget, seed);
    const auto distribution = embedding::empirical_cluster_distribution(codebook, y);

    pipeline::SamplingPlan plan;
    plan.count = cfg.n_samples;
    plan.seed = stream(seed, kPlan);
    plan.stage1_sampler = cfg.stage1_sampler;
    plan.stage2_sampler = cfg.stage2_sampler;
    plan.stage1_schedule = plan.stage2_schedule = cfg.schedule;

    const Matrix& ref = data.reference.x;
    ToyComparison out;
    out.scores[Method::kEdmDirect] = eval::toy_divergence(pipeline::edm_direct(plan, {&edm, "edm"}).x, ref, cfg.ring);
    out.scores[Method::kVcdm] =
        eval::toy_divergence(pipeline::vcdm_sample(plan, prior, "aux", {&cond, "cond"}).x, ref, cfg.ring);
    out.scores[Method::kVcdmOracle] =
        eval::toy_divergence(pipeline::oracle_sample(plan, {y, {}}, {&cond, "cond"}).x, ref, cfg.ring);
    out.scores[Method::kClassCond] = eval::toy_divergence(
        pipeline::class_cond_sample(plan, codebook, distribution, {&cluster_model, "class-cond"}).x, ref, cfg.ring);

    Rng floor_rng(stream(seed, kFloor));
    out.data_floor = eval::toy_divergence(toy::make_ring(cfg.n_samples, cfg.ring, floor_rng).x, ref, cfg.ring).frechet;
    return out;
}

std::vector<SweepRow> run_toy_sweep(const ToyConfig& cfg, const std::string& arm, const std::vector<int>& grid,
                                    const std::vector<long>& budgets, std::uint64_t seed) {
    if (arm != "pca" && arm != "kmeans") throw InvalidArgument("sweep arm must be 'pca' or 'kmeans'");
    const int y_dim = cfg.ring.y_dim();
    for (int g : grid) {
        if (g < 1) throw InvalidArgument("sweep grid entries must be positive");
        if (arm == "pca" && g > y_dim)
            throw InvalidArgument("sweep grid entry " + std::to_string(g) + " exceeds the embedding dimension " +
                                  std::to_string(y_dim));
    }
    const ToyData data = make_toy_data(cfg, seed);
    const Matrix& x = data.train.x;
    const Matrix& y = data.train.y;

    std::vector<SweepRow> rows;
    for (int g : grid) {
        Matrix codes;
        double recon = std::numeric_limits<double>::quiet_NaN();
        if (arm == "pca") {
            const auto pca = embedding::pca_fit(y, g);
            codes = embedding::pca_apply(pca, y);
            recon = embedding::pca_reconstruction_error(pca, y);
        } else {
            Rng km(stream(seed, kKMeans));
            codes = one_hot_codes(embedding::kmeans_fit(y, g, km), y);
        }
        for (long budget : budgets) {
            ToyBudget b = cfg.image_budget;
            b.steps = budget;
            const auto model = train_toy_image(cfg, image_model::Regime::kEmbedding, x, codes, b, seed);
            pipeline::SamplingPlan plan;
            plan.count = cfg.n_samples;
            plan.seed = stream(seed, kPlan);
            plan.stage2_sampler = cfg.stage2_sampler;
            plan.stage2_schedule = cfg.schedule;
            const auto batch = pipeline::oracle_sample(plan, {codes, {}}, {&model, "sweep"});
            rows.push_back({arm, g, budget, eval::toy_divergence(batch.x, data.reference.x, cfg.ring).frechet, seed,
                            recon});
        }
    }
    return rows;
}

int best_dim(const std::vector<SweepRow>& rows, const std::string& arm, long budget, std::uint64_t seed) {
    int best = -1;
    double best_score = std::numeric_limits<double>::infinity();
    for (const auto& r : rows) {
        if (r.arm != arm || r.budget != budget || r.seed != seed) continue;
        if (r.score < best_score) {
            best_score = r.score;
            best = r.dim;
        }
    }
    if (best < 0) throw InvalidArgument("best_dim: no rows for this slice");
    return best;
}

}  // namespace vcdm::experiments
