#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vcdm/aux_model.hpp"
#include "vcdm/checkpoint.hpp"
#include "vcdm/diffusion.hpp"
#include "vcdm/nn/modules.hpp"
#include "vcdm/training.hpp"
#include "vcdm/types.hpp"

// Stage-2 model p(x | y, a). The conditioning vector concat(y, enc(a)) goes
// through a linear projection that is added to the noise-level embedding.
namespace vcdm::image_model {

enum class Regime { kUnconditional, kEmbedding, kCluster };
enum class Architecture { kUNet, kMlp };

const char* to_string(Regime r);
Regime regime_from_string(const std::string& s);

struct ImageModelConfig {
    Architecture arch = Architecture::kUNet;

    // U-Net
    int resolution = 16;
    int channels = 3;
    int base_width = 32;
    std::vector<int> channel_multipliers{1, 2, 2};
    std::vector<int> attention_resolutions;  // empty: lowest resolution only

    // MLP (points in R^data_dim)
    int data_dim = 2;
    int mlp_width = 128;
    int mlp_blocks = 3;

    int sigma_features = 64;

    Regime regime = Regime::kUnconditional;
    int y_dim = 0;              // embedding dim (embedding regime) or K (cluster regime)
    int class_count = 0;        // light conditioning a; 0 for none
    int class_embed_width = 64;
    int aug_label_dim = 0;
    bool zero_init_projection = false;

    void validate() const;
    int embed_width() const;
    int cond_dim() const;
    // Elements per sample.
    int item_size() const;
    nn::Shape item_shape() const;

    std::string to_json() const;
    static ImageModelConfig from_json(const std::string& text);
};

class ImageModel {
public:
    ImageModel(ImageModelConfig cfg, Rng& rng);

    const ImageModelConfig& config() const { return cfg_; }
    nn::ParameterSet& params() { return params_; }
    const nn::ParameterSet& params() const { return params_; }

    // Raw network on preconditioned input of shape (batch, item_shape...).
    // y: batch x y_dim values (ignored in the unconditional regime).
    // classes: empty or one id per row. aug: empty (zero label) or batch x aug_label_dim.
    nn::Var raw(const nn::Var& scaled, std::span<const double> c_noise, std::span<const double> y,
                std::span<const int> classes, std::span<const double> aug) const;

    nn::Var denoise(const nn::Var& x_sigma, std::span<const double> sigma, std::span<const double> y,
                    std::span<const int> classes = {}, std::span<const double> aug = {}) const;
    diffusion::Denoiser denoiser(std::vector<double> y, std::vector<int> classes = {},
                                 std::vector<double> aug = {}) const;

    double sigma_data = 0.5;
    // Applied to y in the embedding regime before projection.
    std::optional<aux::Standardizer> y_stats;

    void write_meta(Checkpoint& ckpt) const;
    static ImageModel load(const Checkpoint& ckpt, bool use_ema = true);
    static ImageModel load(const std::filesystem::path& path, bool use_ema = true);

private:
    struct ResBlock {
        nn::GroupNorm norm1, norm2;
        nn::Conv2d conv1, conv2;
        nn::Linear emb;
        std::optional<nn::Conv2d> skip;
    };
    struct AttnBlock {
        nn::GroupNorm norm;
        nn::Linear q, k, v, o;
    };
    struct MlpBlock {
        nn::LayerNorm norm;
        nn::Linear fc1, emb, fc2;
    };

    ResBlock make_res(const std::string& name, int in, int out, Rng& rng);
    AttnBlock make_attn(const std::string& name, int ch, Rng& rng);
    nn::Var run_res(const ResBlock& b, const nn::Var& x, const nn::Var& emb) const;
    nn::Var run_attn(const AttnBlock& b, const nn::Var& x) const;
    bool attention_at(int res) const;

    nn::Var conditioning(const nn::Var& emb, std::span<const double> y, std::span<const int> classes, int batch) const;

    ImageModelConfig cfg_;
    nn::ParameterSet params_;
    nn::Linear sigma_fc1_, sigma_fc2_;
    nn::EmbeddingTable class_table_;
    nn::Linear aug_proj_;
    nn::Linear cond_proj_;

    // U-Net
    nn::Conv2d stem_;
    std::vector<ResBlock> down_;
    std::vector<std::optional<AttnBlock>> down_attn_;
    ResBlock mid1_, mid2_;
    AttnBlock mid_attn_;
    std::vector<ResBlock> up_;
    std::vector<std::optional<AttnBlock>> up_attn_;
    nn::GroupNorm out_norm_;
    nn::Conv2d out_conv_;

    // MLP
    nn::Linear mlp_in_;
    std::vector<MlpBlock> mlp_blocks_;
    nn::LayerNorm mlp_out_norm_;
    nn::Linear mlp_out_;

    friend ImageModel attach_zero_init_conditioning(const ImageModel&, Regime, int);
};

// Copies an unconditional model into a conditional one whose projection
// starts at exactly zero, so outputs are unchanged for every y. Adds
// y_dim * embed_width + embed_width parameters.
ImageModel attach_zero_init_conditioning(const ImageModel& base, Regime regime, int y_dim);
ImageModel attach_zero_init_conditioning(const Checkpoint& base_ckpt, Regime regime, int y_dim);

struct ImageTrainData {
    Matrix x;                  // n x item_size
    Matrix y;                  // n x y_dim (or K for one-hot clusters); empty when unconditional
    std::vector<int> classes;  // empty or n entries
};

struct Augmented {
    std::vector<double> x;
    std::vector<double> y;
    std::vector<double> label;
};
// Optional per-item augmentation: returns the augmented sample, its
// re-embedded y and the label describing the ops.
using ItemAugmenter = std::function<Augmented(int index, Rng& rng)>;

struct ImageTrainSettings {
    train::TrainOptions options{};
    diffusion::LossWeighting weighting{};
    // Estimate sigma_data from the data instead of using weighting.sigma_data.
    bool estimate_sigma_data = true;
    // Refit the y standardiser; off when finetuning from stored statistics.
    bool fit_y_stats = true;
    ItemAugmenter augmenter;
};

train::TrainResult train_image_model(ImageModel& model, const ImageTrainData& data, const ImageTrainSettings& settings,
                                     Rng rng);

}  // namespace vcdm::image_model
