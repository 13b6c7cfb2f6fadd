#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vcdm/aux_model.hpp"
#include "vcdm/diffusion.hpp"
#include "vcdm/embedding.hpp"
#include "vcdm/image_model.hpp"
#include "vcdm/types.hpp"

// Two-stage sampling y ~ p(y | a), x ~ p(x | y, a) and its comparators.
//
// Seeds: item i of a plan owns the streams
//   stage 1: derive_seed(derive_seed(plan.seed, i), 0)
//   stage 2: derive_seed(derive_seed(plan.seed, i), 1)
// so an item's noise does not depend on how items are chunked, and two methods that
// differ only in stage 1 share their stage-2 noise.
namespace vcdm::pipeline {

enum class Method { kVcdm, kEdmDirect, kClassCond, kVcdmOracle };
const char* to_string(Method m);
// Accepts "vcdm", "edm" / "edm_direct", "class-cond" / "class_cond", "oracle" / "vcdm_oracle".
Method method_from_string(const std::string& s);

// Light conditioning a; aux::kNullClass for none.
struct CondInput {
    int class_id = aux::kNullClass;
};

struct SamplingPlan {
    Method method = Method::kVcdm;
    CondInput a{};
    int count = 16;
    std::uint64_t seed = 0;
    diffusion::SamplerConfig stage1_sampler = diffusion::SamplerConfig::embedding_default();
    diffusion::ScheduleConfig stage1_schedule{};
    diffusion::SamplerConfig stage2_sampler = diffusion::SamplerConfig::image_default();
    diffusion::ScheduleConfig stage2_schedule{};
    // Items sampled together. Each item has its own noise stream, but outputs
    // are only bitwise reproducible for a fixed chunk size (GEMM blocking).
    int chunk_size = 256;
    // Keep the intermediate embeddings in the returned batch (debug only).
    bool keep_embeddings = false;

    void validate() const;
};

struct SampleBatch {
    Matrix x;                       // count x item_size
    nn::Shape item_shape;
    // Empty unless plan.keep_embeddings is set.
    Matrix y;
    // Cluster ids drawn by class_cond (empty for other methods).
    std::vector<int> cluster_ids;
    double stage1_ms = 0.0;
    double stage2_ms = 0.0;
};

// Stage 1 producer: one embedding row per entry of classes, item streams in rngs.
using EmbeddingSource = std::function<Matrix(std::span<const int> classes, std::span<Rng> rngs)>;

EmbeddingSource aux_source(const aux::AuxModel& model, const diffusion::SamplerConfig& sampler,
                           const diffusion::ScheduleConfig& schedule);
// Always returns y; the degenerate prior used to check method equivalence.
EmbeddingSource point_mass_source(std::vector<double> y);

struct Stage2 {
    const image_model::ImageModel* model = nullptr;
    std::string name = "image";
};

// Two-stage sampler. Throws ConfigError naming both models when the stage-1
// embedding size differs from the stage-2 conditioning size.
SampleBatch vcdm_sample(const SamplingPlan& plan, const EmbeddingSource& stage1, int stage1_dim,
                        const std::string& stage1_name, const Stage2& stage2);
SampleBatch vcdm_sample(const SamplingPlan& plan, const aux::AuxModel& aux, const std::string& aux_name,
                        const Stage2& stage2);

// Paired dataset for the oracle: embeddings with optional class labels.
struct EmbeddingDataset {
    Matrix y;
    std::vector<int> classes;  // empty or one per row
};

// Rows consistent with a, in dataset order. Throws InvalidArgument if none.
std::vector<int> matching_rows(const EmbeddingDataset& data, CondInput a);
// Row choice: uniform without replacement, or with replacement when count
// exceeds the number of matching rows.
std::vector<int> oracle_rows(const EmbeddingDataset& data, CondInput a, int count, std::uint64_t seed);

SampleBatch oracle_sample(const SamplingPlan& plan, const EmbeddingDataset& data, const Stage2& stage2);

// Cluster id ~ categorical(distribution), then x ~ p(x | one_hot(id), a).
SampleBatch class_cond_sample(const SamplingPlan& plan, const embedding::KMeansCodebook& codebook,
                              std::span<const double> distribution, const Stage2& stage2);
// Samples from an unconditional model.
SampleBatch edm_direct(const SamplingPlan& plan, const Stage2& stage2);

// Stage-2 sampling given per-item embeddings (rows) and item indices; the
// common tail of every method.
Matrix sample_images(const SamplingPlan& plan, const image_model::ImageModel& model, const Matrix& y);

struct TimingReport {
    double stage1_ms = 0.0;        // median per item
    double stage2_ms = 0.0;        // median per item
    double overhead_fraction = 0.0;  // stage1 / (stage1 + stage2)
    int items = 0;
};
// Times `plan.count` items one at a time through both stages.
TimingReport timing_report(const SamplingPlan& plan, const aux::AuxModel& aux, const image_model::ImageModel& image);
std::string format_timing(const TimingReport& t);

std::uint64_t item_seed(std::uint64_t plan_seed, std::uint64_t item, int stage);

}  // namespace vcdm::pipeline
