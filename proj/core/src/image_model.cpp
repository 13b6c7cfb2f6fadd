#include "vcdm/image_model.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "vcdm/errors.hpp"

namespace vcdm::image_model {

using nlohmann::json;
using nn::Var;

namespace {

constexpr double kNoiseFeatureScale = 20.0;
constexpr double kNoiseMaxPeriod = 100.0;

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

const char* to_string(Regime r) {
    switch (r) {
        case Regime::kUnconditional: return "unconditional";
        case Regime::kEmbedding: return "embedding";
        case Regime::kCluster: return "cluster";
    }
    return "unknown";
}

Regime regime_from_string(const std::string& s) {
    if (s == "unconditional") return Regime::kUnconditional;
    if (s == "embedding") return Regime::kEmbedding;
    if (s == "cluster") return Regime::kCluster;
    throw InvalidArgument("unknown conditioning regime: " + s);
}

void ImageModelConfig::validate() const {
    if (arch == Architecture::kUNet) {
        if (!is_power_of_two(resolution)) throw InvalidArgument("ImageModelConfig: resolution must be a power of 2");
        if (channels < 1 || base_width < 1 || channel_multipliers.empty()) {
            throw InvalidArgument("ImageModelConfig: invalid U-Net widths");
        }
        const int levels = static_cast<int>(channel_multipliers.size());
        if (resolution >> (levels - 1) < 1 || (resolution % (1 << (levels - 1))) != 0) {
            throw InvalidArgument("ImageModelConfig: too many levels for the resolution");
        }
        for (int m : channel_multipliers)
            if (m < 1) throw InvalidArgument("ImageModelConfig: channel multipliers must be positive");
    } else {
        if (data_dim < 1 || mlp_width < 1 || mlp_blocks < 1) throw InvalidArgument("ImageModelConfig: invalid MLP sizes");
    }
    if (sigma_features < 2 || sigma_features % 2) throw InvalidArgument("ImageModelConfig: sigma_features must be even");
    if (regime == Regime::kUnconditional && y_dim != 0) {
        throw InvalidArgument("ImageModelConfig: unconditional regime takes no y");
    }
    if (regime != Regime::kUnconditional && y_dim < 1) {
        throw InvalidArgument("ImageModelConfig: conditional regimes need y_dim >= 1");
    }
    if (class_count < 0 || aug_label_dim < 0 || class_embed_width < 1) {
        throw InvalidArgument("ImageModelConfig: negative sizes");
    }
}

int ImageModelConfig::embed_width() const { return arch == Architecture::kUNet ? 4 * base_width : mlp_width; }

int ImageModelConfig::cond_dim() const { return y_dim + (class_count > 0 ? class_embed_width : 0); }

int ImageModelConfig::item_size() const {
    return arch == Architecture::kUNet ? channels * resolution * resolution : data_dim;
}

nn::Shape ImageModelConfig::item_shape() const {
    if (arch == Architecture::kUNet) return {channels, resolution, resolution};
    return {data_dim};
}

std::string ImageModelConfig::to_json() const {
    return json{{"arch", arch == Architecture::kUNet ? "unet" : "mlp"},
                {"resolution", resolution},
                {"channels", channels},
                {"base_width", base_width},
                {"channel_multipliers", channel_multipliers},
                {"attention_resolutions", attention_resolutions},
                {"data_dim", data_dim},
                {"mlp_width", mlp_width},
                {"mlp_blocks", mlp_blocks},
                {"sigma_features", sigma_features},
                {"regime", to_string(regime)},
                {"y_dim", y_dim},
                {"class_count", class_count},
                {"class_embed_width", class_embed_width},
                {"aug_label_dim", aug_label_dim},
                {"zero_init_projection", zero_init_projection}}
        .dump();
}

ImageModelConfig ImageModelConfig::from_json(const std::string& text) {
    const json j = json::parse(text);
    ImageModelConfig c;
    c.arch = j.at("arch") == "unet" ? Architecture::kUNet : Architecture::kMlp;
    c.resolution = j.at("resolution");
    c.channels = j.at("channels");
    c.base_width = j.at("base_width");
    c.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
    c.attention_resolutions = j.at("attention_resolutions").get<std::vector<int>>();
    c.data_dim = j.at("data_dim");
    c.mlp_width = j.at("mlp_width");
    c.mlp_blocks = j.at("mlp_blocks");
    c.sigma_features = j.at("sigma_features");
    c.regime = regime_from_string(j.at("regime"));
    c.y_dim = j.at("y_dim");
    c.class_count = j.at("class_count");
    c.class_embed_width = j.at("class_embed_width");
    c.aug_label_dim = j.at("aug_label_dim");
    c.zero_init_projection = j.at("zero_init_projection");
    return c;
}

ImageModel::ResBlock ImageModel::make_res(const std::string& name, int in, int out, Rng& rng) {
    ResBlock b;
    b.norm1 = nn::GroupNorm(params_, name + ".norm1", in);
    b.conv1 = nn::Conv2d(params_, name + ".conv1", in, out, 3, rng);
    b.emb = nn::Linear(params_, name + ".emb", cfg_.embed_width(), out, rng);
    b.norm2 = nn::GroupNorm(params_, name + ".norm2", out);
    b.conv2 = nn::Conv2d(params_, name + ".conv2", out, out, 3, rng);
    if (in != out) b.skip = nn::Conv2d(params_, name + ".skip", in, out, 1, rng);
    return b;
}

ImageModel::AttnBlock ImageModel::make_attn(const std::string& name, int ch, Rng& rng) {
    AttnBlock a;
    a.norm = nn::GroupNorm(params_, name + ".norm", ch);
    a.q = nn::Linear(params_, name + ".q", ch, ch, rng);
    a.k = nn::Linear(params_, name + ".k", ch, ch, rng);
    a.v = nn::Linear(params_, name + ".v", ch, ch, rng);
    a.o = nn::Linear(params_, name + ".o", ch, ch, rng);
    return a;
}

bool ImageModel::attention_at(int res) const {
    if (cfg_.attention_resolutions.empty()) {
        return res == (cfg_.resolution >> (static_cast<int>(cfg_.channel_multipliers.size()) - 1));
    }
    return std::find(cfg_.attention_resolutions.begin(), cfg_.attention_resolutions.end(), res) !=
           cfg_.attention_resolutions.end();
}

ImageModel::ImageModel(ImageModelConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int e = cfg_.embed_width();
    sigma_fc1_ = nn::Linear(params_, "sigma.fc1", cfg_.sigma_features, e, rng);
    sigma_fc2_ = nn::Linear(params_, "sigma.fc2", e, e, rng);
    if (cfg_.class_count > 0) class_table_ = nn::EmbeddingTable(params_, "cond.class_table", cfg_.class_count, cfg_.class_embed_width, rng);
    if (cfg_.aug_label_dim > 0) aug_proj_ = nn::Linear(params_, "aug.proj", cfg_.aug_label_dim, e, rng);
    if (cfg_.cond_dim() > 0) {
        cond_proj_ = nn::Linear(params_, "cond.proj", cfg_.cond_dim(), e, rng,
                                cfg_.zero_init_projection ? nn::Init::kZero : nn::Init::kDefault);
    }

    if (cfg_.arch == Architecture::kMlp) {
        const int w = cfg_.mlp_width;
        mlp_in_ = nn::Linear(params_, "mlp.in", cfg_.data_dim, w, rng);
        for (int i = 0; i < cfg_.mlp_blocks; ++i) {
            const std::string p = "mlp.block" + std::to_string(i);
            MlpBlock b;
            b.norm = nn::LayerNorm(params_, p + ".norm", w);
            b.fc1 = nn::Linear(params_, p + ".fc1", w, w, rng);
            b.emb = nn::Linear(params_, p + ".emb", e, w, rng);
            b.fc2 = nn::Linear(params_, p + ".fc2", w, w, rng);
            mlp_blocks_.push_back(b);
        }
        mlp_out_norm_ = nn::LayerNorm(params_, "mlp.out_norm", w);
        mlp_out_ = nn::Linear(params_, "mlp.out", w, cfg_.data_dim, rng);
        return;
    }

    const int levels = static_cast<int>(cfg_.channel_multipliers.size());
    stem_ = nn::Conv2d(params_, "stem", cfg_.channels, cfg_.base_width, 3, rng);
    int ch = cfg_.base_width;
    int res = cfg_.resolution;
    std::vector<int> skip_ch;
    for (int l = 0; l < levels; ++l) {
        const int out = cfg_.base_width * cfg_.channel_multipliers[l];
        down_.push_back(make_res("down" + std::to_string(l), ch, out, rng));
        down_attn_.push_back(attention_at(res) ? std::optional(make_attn("down" + std::to_string(l) + ".attn", out, rng))
                                               : std::nullopt);
        ch = out;
        skip_ch.push_back(ch);
        if (l + 1 < levels) res /= 2;
    }
    mid1_ = make_res("mid1", ch, ch, rng);
    mid_attn_ = make_attn("mid.attn", ch, rng);
    mid2_ = make_res("mid2", ch, ch, rng);
    for (int l = levels - 1; l >= 0; --l) {
        const int out = cfg_.base_width * cfg_.channel_multipliers[l];
        up_.push_back(make_res("up" + std::to_string(l), ch + skip_ch[l], out, rng));
        up_attn_.push_back(attention_at(res) ? std::optional(make_attn("up" + std::to_string(l) + ".attn", out, rng))
                                             : std::nullopt);
        ch = out;
        if (l > 0) res *= 2;
    }
    out_norm_ = nn::GroupNorm(params_, "out.norm", ch);
    out_conv_ = nn::Conv2d(params_, "out.conv", ch, cfg_.channels, 3, rng);
}

Var ImageModel::run_res(const ResBlock& b, const Var& x, const Var& emb) const {
    Var h = b.conv1(nn::silu(b.norm1(x)));
    h = nn::add_channel(h, b.emb(emb));
    h = b.conv2(nn::silu(b.norm2(h)));
    return nn::add(h, b.skip ? (*b.skip)(x) : x);
}

Var ImageModel::run_attn(const AttnBlock& a, const Var& x) const {
    const int h = x.dim(2), w = x.dim(3);
    Var t = nn::to_tokens(a.norm(x));
    Var out = a.o(nn::attention(a.q(t), a.k(t), a.v(t), 1));
    return nn::add(x, nn::from_tokens(out, h, w));
}

Var ImageModel::conditioning(const Var& emb, std::span<const double> y, std::span<const int> classes,
                             int batch) const {
    if (cfg_.cond_dim() == 0) return emb;
    std::vector<Var> parts;
    if (cfg_.y_dim > 0) {
        if (y.size() != static_cast<std::size_t>(batch) * cfg_.y_dim) {
            throw InvalidArgument("image_denoise: conditioning expects " + std::to_string(cfg_.y_dim) +
                                  " values per row, got " + std::to_string(y.size()) + " for batch " +
                                  std::to_string(batch));
        }
        Matrix ym = Eigen::Map<const Matrix>(y.data(), batch, cfg_.y_dim);
        if (y_stats) ym = y_stats->apply(ym);
        parts.push_back(Var::constant({batch, cfg_.y_dim}, {ym.data(), ym.data() + ym.size()}));
    }
    if (cfg_.class_count > 0) {
        if (classes.size() != static_cast<std::size_t>(batch)) {
            throw InvalidArgument("image_denoise: one class id per row required");
        }
        for (int c : classes)
            if (c < 0 || c >= cfg_.class_count) throw InvalidArgument("image_denoise: class id out of range");
        parts.push_back(class_table_(classes));
    }
    Var cond = parts.size() == 1 ? parts.front() : nn::concat(parts, 1);
    return nn::add(emb, cond_proj_(cond));
}

Var ImageModel::raw(const Var& scaled, std::span<const double> c_noise, std::span<const double> y,
                    std::span<const int> classes, std::span<const double> aug) const {
    nn::Shape expected = cfg_.item_shape();
    expected.insert(expected.begin(), scaled.rank() > 0 ? scaled.dim(0) : 0);
    if (scaled.shape() != expected) {
        throw InvalidArgument("image_denoise: expected input " + nn::shape_string(expected) + ", got " +
                              nn::shape_string(scaled.shape()));
    }
    const int batch = scaled.dim(0);
    if (c_noise.size() != static_cast<std::size_t>(batch)) throw InvalidArgument("image_denoise: one sigma per row");

    std::vector<double> noise_in(c_noise.begin(), c_noise.end());
    for (double& v : noise_in) v *= kNoiseFeatureScale;
    Var emb = sigma_fc2_(nn::silu(sigma_fc1_(nn::fourier_features(noise_in, cfg_.sigma_features, kNoiseMaxPeriod))));
    if (cfg_.aug_label_dim > 0) {
        std::vector<double> label = aug.empty() ? std::vector<double>(static_cast<std::size_t>(batch) * cfg_.aug_label_dim, 0.0)
                                                : std::vector<double>(aug.begin(), aug.end());
        if (label.size() != static_cast<std::size_t>(batch) * cfg_.aug_label_dim) {
            throw InvalidArgument("image_denoise: augmentation label size mismatch");
        }
        emb = nn::add(emb, aug_proj_(Var::constant({batch, cfg_.aug_label_dim}, std::move(label))));
    }
    emb = nn::silu(conditioning(emb, y, classes, batch));

    if (cfg_.arch == Architecture::kMlp) {
        Var h = mlp_in_(scaled);
        for (const MlpBlock& b : mlp_blocks_) {
            Var inner = nn::add(b.fc1(nn::silu(b.norm(h))), b.emb(emb));
            h = nn::add(h, b.fc2(nn::silu(inner)));
        }
        return mlp_out_(nn::silu(mlp_out_norm_(h)));
    }

    Var h = stem_(scaled);
    std::vector<Var> skips;
    const int levels = static_cast<int>(down_.size());
    for (int l = 0; l < levels; ++l) {
        h = run_res(down_[l], h, emb);
        if (down_attn_[l]) h = run_attn(*down_attn_[l], h);
        skips.push_back(h);
        if (l + 1 < levels) h = nn::avg_pool2(h);
    }
    h = run_res(mid1_, h, emb);
    h = run_attn(mid_attn_, h);
    h = run_res(mid2_, h, emb);
    for (int i = 0; i < levels; ++i) {
        const int l = levels - 1 - i;
        h = nn::concat({h, skips[l]}, 1);
        h = run_res(up_[i], h, emb);
        if (up_attn_[i]) h = run_attn(*up_attn_[i], h);
        if (l > 0) h = nn::upsample2(h);
    }
    return out_conv_(nn::silu(out_norm_(h)));
}

Var ImageModel::denoise(const Var& x_sigma, std::span<const double> sigma, std::span<const double> y,
                        std::span<const int> classes, std::span<const double> aug) const {
    return denoiser({y.begin(), y.end()}, {classes.begin(), classes.end()}, {aug.begin(), aug.end()})(x_sigma, sigma);
}

diffusion::Denoiser ImageModel::denoiser(std::vector<double> y, std::vector<int> classes, std::vector<double> aug) const {
    diffusion::RawNet net = [this, y = std::move(y), classes = std::move(classes), aug = std::move(aug)](
                                const Var& scaled, std::span<const double> c_noise) {
        return raw(scaled, c_noise, y, classes, aug);
    };
    return diffusion::precondition(std::move(net), sigma_data);
}

void ImageModel::write_meta(Checkpoint& ckpt) const {
    json meta = json::parse(ckpt.meta_json);
    meta["kind"] = "image";
    meta["model"] = json::parse(cfg_.to_json());
    meta["regime"] = to_string(cfg_.regime);
    meta["sigma_data"] = sigma_data;
    ckpt.meta_json = meta.dump();
    if (y_stats) {
        ckpt.put("y_stats/mean", {static_cast<int>(y_stats->mean.size())},
                 {y_stats->mean.data(), y_stats->mean.data() + y_stats->mean.size()});
        ckpt.put("y_stats/scale", {static_cast<int>(y_stats->scale.size())},
                 {y_stats->scale.data(), y_stats->scale.data() + y_stats->scale.size()});
    }
}

ImageModel ImageModel::load(const Checkpoint& ckpt, bool use_ema) {
    json meta;
    try {
        meta = json::parse(ckpt.meta_json);
    } catch (const json::exception& e) {
        throw IncompatibleCheckpoint(std::string("unreadable checkpoint metadata: ") + e.what());
    }
    if (meta.value("kind", "") != "image") throw IncompatibleCheckpoint("checkpoint does not hold an image model");
    Rng init(0);
    ImageModel model(ImageModelConfig::from_json(meta.at("model").dump()), init);
    train::load_parameters(ckpt, model.params_, use_ema);
    model.sigma_data = meta.at("sigma_data").get<double>();
    if (ckpt.has("y_stats/mean")) {
        const auto& m = ckpt.get("y_stats/mean").values;
        const auto& s = ckpt.get("y_stats/scale").values;
        aux::Standardizer st;
        st.mean = Eigen::Map<const Vector>(m.data(), static_cast<Eigen::Index>(m.size()));
        st.scale = Eigen::Map<const Vector>(s.data(), static_cast<Eigen::Index>(s.size()));
        model.y_stats = st;
    }
    return model;
}

ImageModel ImageModel::load(const std::filesystem::path& path, bool use_ema) {
    return load(Checkpoint::load(path), use_ema);
}

ImageModel attach_zero_init_conditioning(const ImageModel& base, Regime regime, int y_dim) {
    const ImageModelConfig& bc = base.config();
    if (bc.regime != Regime::kUnconditional || bc.cond_dim() != 0) {
        throw IncompatibleCheckpoint("attach_zero_init_conditioning: base model is already conditional");
    }
    if (regime == Regime::kUnconditional) throw InvalidArgument("attach_zero_init_conditioning: target regime must be conditional");
    ImageModelConfig cfg = bc;
    cfg.regime = regime;
    cfg.y_dim = y_dim;
    cfg.zero_init_projection = true;
    Rng init(0);
    ImageModel model(cfg, init);
    for (std::size_t i = 0; i < base.params().size(); ++i) {
        const long j = model.params().find(base.params().name(i));
        if (j < 0) throw IncompatibleCheckpoint("attach_zero_init_conditioning: missing " + base.params().name(i));
        auto dst = model.params().at(static_cast<std::size_t>(j)).mutable_value();
        const auto src = base.params().at(i).value();
        if (dst.size() != src.size()) throw IncompatibleCheckpoint("attach_zero_init_conditioning: shape mismatch");
        std::copy(src.begin(), src.end(), dst.begin());
    }
    model.sigma_data = base.sigma_data;
    return model;
}

ImageModel attach_zero_init_conditioning(const Checkpoint& base_ckpt, Regime regime, int y_dim) {
    return attach_zero_init_conditioning(ImageModel::load(base_ckpt), regime, y_dim);
}

train::TrainResult train_image_model(ImageModel& model, const ImageTrainData& data, const ImageTrainSettings& settings,
                                     Rng rng) {
    const auto& cfg = model.config();
    const Eigen::Index n = data.x.rows();
    const int item = cfg.item_size();
    if (n == 0) throw InvalidArgument("train_image_model: empty dataset");
    if (data.x.cols() != item) throw InvalidArgument("train_image_model: sample size does not match the model");
    const bool uses_y = cfg.regime != Regime::kUnconditional;
    if (uses_y && (data.y.rows() != n || data.y.cols() != cfg.y_dim)) {
        throw InvalidArgument("train_image_model: conditioning has " + std::to_string(data.y.cols()) +
                              " columns, model expects " + std::to_string(cfg.y_dim));
    }
    if (cfg.class_count > 0 && static_cast<Eigen::Index>(data.classes.size()) != n) {
        throw InvalidArgument("train_image_model: class labels required for every row");
    }

    if (settings.estimate_sigma_data) {
        model.sigma_data = diffusion::estimate_sigma_data({data.x.data(), static_cast<std::size_t>(data.x.size())},
                                                          static_cast<std::size_t>(item));
    }
    if (cfg.regime == Regime::kEmbedding && settings.fit_y_stats) model.y_stats = aux::Standardizer::fit(data.y);
    diffusion::LossWeighting weighting = settings.weighting;
    weighting.sigma_data = model.sigma_data;

    const int batch = settings.options.batch_size;
    nn::Shape shape = cfg.item_shape();
    shape.insert(shape.begin(), batch);
    train::LossFn loss_fn = [&](Rng& r, long) {
        std::vector<double> x, y, aug;
        std::vector<int> cls;
        x.reserve(static_cast<std::size_t>(batch) * item);
        for (int b = 0; b < batch; ++b) {
            const int i = static_cast<int>(r.below(static_cast<std::uint64_t>(n)));
            if (settings.augmenter) {
                Augmented a = settings.augmenter(i, r);
                x.insert(x.end(), a.x.begin(), a.x.end());
                if (uses_y) y.insert(y.end(), a.y.begin(), a.y.end());
                if (cfg.aug_label_dim > 0) aug.insert(aug.end(), a.label.begin(), a.label.end());
            } else {
                x.insert(x.end(), data.x.row(i).data(), data.x.row(i).data() + item);
                if (uses_y) y.insert(y.end(), data.y.row(i).data(), data.y.row(i).data() + cfg.y_dim);
            }
            if (cfg.class_count > 0) cls.push_back(data.classes[i]);
        }
        std::vector<double> sigmas(batch);
        for (double& s : sigmas) s = diffusion::sample_train_sigma(weighting, r);
        const std::vector<double> eps = r.normal_vector(x.size());
        const Var xb = Var::constant(shape, std::move(x));
        auto den = model.denoiser(std::move(y), std::move(cls), std::move(aug));
        return train::StepLoss{diffusion::denoising_loss_at(den, xb, sigmas, eps, weighting), sigmas};
    };
    train::Trainer trainer(model.params(), settings.options, std::move(rng));
    return trainer.run(loss_fn, [&](Checkpoint& ck) { model.write_meta(ck); });
}

}  // namespace vcdm::image_model
