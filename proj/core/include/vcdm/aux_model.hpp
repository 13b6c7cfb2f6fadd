#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vcdm/checkpoint.hpp"
#include "vcdm/diffusion.hpp"
#include "vcdm/nn/modules.hpp"
#include "vcdm/training.hpp"
#include "vcdm/types.hpp"

// Stage-1 prior p(y | a): a transformer denoiser over embedding vectors.
//
// Token sequence per item, in order:
//   sigma   sinusoidal features of c_noise through a two-layer MLP
//   cond    class table row (dropped from attention when a is null)
//   noisy   linear map of the preconditioned noisy embedding
//   aug     linear map of the augmentation label (only if aug_label_dim > 0)
//   query   learned vector; its final state is mapped back to the embedding
namespace vcdm::aux {

constexpr int kNullClass = -1;

struct AuxModelConfig {
    int embed_dim = 512;
    int token_dim = 512;
    int num_layers = 6;
    int num_heads = 8;
    int class_count = 0;      // 0 means unconditional
    int aug_label_dim = 0;    // 0 means no augmentation token
    int sigma_features = 64;

    void validate() const;
    std::string to_json() const;
    static AuxModelConfig from_json(const std::string& text);
};

// Per-dimension standardisation of raw embeddings.
struct Standardizer {
    Vector mean;
    Vector scale;

    static Standardizer fit(const Matrix& data);
    Matrix apply(const Matrix& raw) const;
    Matrix invert(const Matrix& standardized) const;
};

// Debug view of one forward pass.
struct TokenTrace {
    std::vector<std::string> tokens;     // names in sequence order
    std::vector<bool> cond_present;      // per batch row
    std::vector<double> aug_labels;      // batch x aug_label_dim as fed
};

class AuxModel {
public:
    AuxModel(AuxModelConfig cfg, Rng& rng);

    const AuxModelConfig& config() const { return cfg_; }
    nn::ParameterSet& params() { return params_; }
    const nn::ParameterSet& params() const { return params_; }

    // Raw network F(c_in * y_sigma, c_noise). classes: empty (all null) or one
    // id per row with kNullClass for null. aug: empty (all zero) or
    // batch x aug_label_dim.
    nn::Var raw(const nn::Var& scaled, std::span<const double> c_noise, std::span<const int> classes,
                std::span<const double> aug) const;

    // x0 estimate for standardized y_sigma (batch, embed_dim).
    nn::Var denoise(const nn::Var& y_sigma, std::span<const double> sigma, std::span<const int> classes,
                    std::span<const double> aug = {}) const;
    diffusion::Denoiser denoiser(std::vector<int> classes, std::vector<double> aug = {}) const;

    double sigma_data = 1.0;
    Standardizer stats;  // identity until fitted

    void set_token_observer(std::function<void(const TokenTrace&)> observer) { observer_ = std::move(observer); }

    // Writes config, statistics and sigma_data into checkpoint metadata.
    void write_meta(Checkpoint& ckpt) const;
    // Rebuilds a model from a training checkpoint (EMA weights by default).
    static AuxModel load(const Checkpoint& ckpt, bool use_ema = true);
    static AuxModel load(const std::filesystem::path& path, bool use_ema = true);

private:
    void check_classes(std::span<const int> classes, std::size_t rows) const;

    struct Block {
        nn::LayerNorm ln1, ln2;
        nn::Linear q, k, v, o, fc1, fc2;
    };

    AuxModelConfig cfg_;
    nn::ParameterSet params_;
    nn::Linear sigma_fc1_, sigma_fc2_;
    nn::EmbeddingTable class_table_;
    nn::Linear noisy_in_;
    nn::Linear aug_in_;
    nn::Var query_;
    std::vector<Block> blocks_;
    nn::LayerNorm final_ln_;
    nn::Linear out_;
    std::function<void(const TokenTrace&)> observer_;
};

struct AuxTrainData {
    Matrix embeddings;          // raw, n x embed_dim
    std::vector<int> classes;   // empty or n entries
    Matrix aug_labels;          // empty or n x aug_label_dim
};

struct AuxTrainSettings {
    train::TrainOptions options{};
    diffusion::LossWeighting weighting{};  // sigma_data is replaced by the data estimate
    // Fraction of labelled rows trained with a = null, so one model serves
    // both the conditional and the unconditional prior.
    double null_class_prob = 0.0;
};

// Fits standardisation and sigma_data, then minimises the denoising
// objective over the embedding set.
train::TrainResult train_aux(AuxModel& model, const AuxTrainData& data, const AuxTrainSettings& settings, Rng rng);

// Draws embeddings from the prior with the zero augmentation label and
// returns them de-standardised, one row per entry of classes (kNullClass for
// unconditional). rngs: one shared generator or one per row.
Matrix sample_embedding(const AuxModel& model, std::span<const int> classes, const diffusion::SamplerConfig& sampler,
                        const diffusion::ScheduleConfig& schedule, std::span<Rng> rngs);

}  // namespace vcdm::aux
