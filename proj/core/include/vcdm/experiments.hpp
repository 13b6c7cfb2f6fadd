#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vcdm/aux_model.hpp"
#include "vcdm/diffusion.hpp"
#include "vcdm/evaluation.hpp"
#include "vcdm/image_model.hpp"
#include "vcdm/pipeline.hpp"
#include "vcdm/toy.hpp"

// End-to-end toy runs on the 2-D ring: every method trained and sampled from
// the same data, seeds and budgets, scored with toy_divergence.
namespace vcdm::experiments {

struct ToyBudget {
    long steps = 150;
    int batch_size = 128;
    double lr = 2e-3;
    double ema_decay = 0.999;
};

struct ToyConfig {
    toy::RingConfig ring{};
    int n_train = 20000;
    int n_reference = 50000;
    int n_samples = 10000;

    aux::AuxModelConfig aux = default_aux();
    ToyBudget aux_budget{3000, 128, 2e-3, 0.999};

    int mlp_width = 64;
    int mlp_blocks = 2;
    int sigma_features = 16;
    ToyBudget image_budget{};

    int clusters = 8;  // K for the class-cond ablation

    diffusion::SamplerConfig stage1_sampler = default_stage1_sampler();
    diffusion::SamplerConfig stage2_sampler = diffusion::SamplerConfig::image_default();
    diffusion::ScheduleConfig schedule{};

    static aux::AuxModelConfig default_aux();
    static diffusion::SamplerConfig default_stage1_sampler();
    image_model::ImageModelConfig image_config(image_model::Regime regime, int y_dim) const;
};

struct ToyData {
    toy::RingData train;
    toy::RingData reference;
};
ToyData make_toy_data(const ToyConfig& cfg, std::uint64_t seed);

aux::AuxModel train_toy_aux(const ToyConfig& cfg, const Matrix& y, std::uint64_t seed);
// Trains an MLP image model on (x, y) and returns it with EMA weights.
image_model::ImageModel train_toy_image(const ToyConfig& cfg, image_model::Regime regime, const Matrix& x,
                                        const Matrix& y, const ToyBudget& budget, std::uint64_t seed);

struct ToyComparison {
    std::map<pipeline::Method, eval::ToyDivergence> scores;
    double data_floor = 0.0;  // fresh data draw vs the reference set
};
ToyComparison run_toy_comparison(const ToyConfig& cfg, std::uint64_t seed);

// One point of the conditioning-dimension sweep.
struct SweepRow {
    std::string arm;         // "pca" or "kmeans"
    int dim = 0;             // k components or K clusters
    long budget = 0;         // image-model steps
    double score = 0.0;
    std::uint64_t seed = 0;
    double reconstruction_error = 0.0;  // PCA arm only, else NaN
};

// For every grid point, compresses the toy embeddings (PCA to k dims or
// K-means one-hots), trains the image model on them for each budget and
// scores samples drawn with dataset codes (the conditional protocol).
// Throws InvalidArgument for a grid entry larger than the embedding size
// (PCA arm) or a non-positive entry.
std::vector<SweepRow> run_toy_sweep(const ToyConfig& cfg, const std::string& arm, const std::vector<int>& grid,
                                    const std::vector<long>& budgets, std::uint64_t seed);

// Grid entry with the lowest score for one (arm, budget, seed) slice.
int best_dim(const std::vector<SweepRow>& rows, const std::string& arm, long budget, std::uint64_t seed);

}  // namespace vcdm::experiments
