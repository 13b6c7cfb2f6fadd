#include "vcdm/aux_model.hpp"

#include <cmath>
#include <nlohmann/json.hpp>

#include "vcdm/errors.hpp"

namespace vcdm::aux {

using nlohmann::json;
using nn::Var;

namespace {

// c_noise spans roughly [-1.6, 1.1]; spread it before the sinusoids.
constexpr double kNoiseFeatureScale = 20.0;
constexpr double kNoiseMaxPeriod = 100.0;

Var as_token(const Var& x) { return nn::reshape(x, {x.dim(0), 1, x.dim(1)}); }

}  // namespace

void AuxModelConfig::validate() const {
    if (embed_dim < 1 || token_dim < 1) throw InvalidArgument("AuxModelConfig: dimensions must be positive");
    if (num_layers < 1) throw InvalidArgument("AuxModelConfig: num_layers must be >= 1");
    if (num_heads < 1 || token_dim % num_heads != 0) {
        throw InvalidArgument("AuxModelConfig: token_dim must be divisible by num_heads");
    }
    if (class_count < 0 || aug_label_dim < 0) throw InvalidArgument("AuxModelConfig: negative counts");
    if (sigma_features < 2 || sigma_features % 2 != 0) {
        throw InvalidArgument("AuxModelConfig: sigma_features must be a positive even number");
    }
}

std::string AuxModelConfig::to_json() const {
    return json{{"embed_dim", embed_dim},         {"token_dim", token_dim},         {"num_layers", num_layers},
                {"num_heads", num_heads},         {"class_count", class_count},     {"aug_label_dim", aug_label_dim},
                {"sigma_features", sigma_features}}
        .dump();
}

AuxModelConfig AuxModelConfig::from_json(const std::string& text) {
    const json j = json::parse(text);
    AuxModelConfig c;
    c.embed_dim = j.at("embed_dim");
    c.token_dim = j.at("token_dim");
    c.num_layers = j.at("num_layers");
    c.num_heads = j.at("num_heads");
    c.class_count = j.at("class_count");
    c.aug_label_dim = j.at("aug_label_dim");
    c.sigma_features = j.at("sigma_features");
    return c;
}

Standardizer Standardizer::fit(const Matrix& data) {
    if (data.rows() == 0) throw InvalidArgument("Standardizer: empty data");
    Standardizer s;
    s.mean = data.colwise().mean().transpose();
    const double denom = static_cast<double>(std::max<Eigen::Index>(data.rows() - 1, 1));
    s.scale = ((data.rowwise() - s.mean.transpose()).array().square().colwise().sum() / denom).sqrt().transpose();
    // Constant dimensions keep unit scale instead of dividing by zero.
    for (Eigen::Index j = 0; j < s.scale.size(); ++j)
        if (!(s.scale[j] > 1e-12)) s.scale[j] = 1.0;
    return s;
}

Matrix Standardizer::apply(const Matrix& raw) const {
    if (raw.cols() != mean.size()) throw InvalidArgument("Standardizer: dimension mismatch");
    return (raw.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
}

Matrix Standardizer::invert(const Matrix& standardized) const {
    if (standardized.cols() != mean.size()) throw InvalidArgument("Standardizer: dimension mismatch");
    return (standardized.array().rowwise() * scale.transpose().array()).matrix().rowwise() + mean.transpose();
}

AuxModel::AuxModel(AuxModelConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    stats.mean = Vector::Zero(cfg_.embed_dim);
    stats.scale = Vector::Ones(cfg_.embed_dim);
    const int w = cfg_.token_dim;
    sigma_fc1_ = nn::Linear(params_, "sigma.fc1", cfg_.sigma_features, w, rng);
    sigma_fc2_ = nn::Linear(params_, "sigma.fc2", w, w, rng);
    if (cfg_.class_count > 0) class_table_ = nn::EmbeddingTable(params_, "cond.table", cfg_.class_count, w, rng);
    noisy_in_ = nn::Linear(params_, "noisy.in", cfg_.embed_dim, w, rng);
    if (cfg_.aug_label_dim > 0) aug_in_ = nn::Linear(params_, "aug.in", cfg_.aug_label_dim, w, rng);
    std::vector<double> q(static_cast<std::size_t>(w));
    for (double& v : q) v = 0.02 * rng.normal();
    query_ = params_.add("query", {w}, std::move(q));
    for (int l = 0; l < cfg_.num_layers; ++l) {
        const std::string p = "block" + std::to_string(l) + ".";
        Block b;
        b.ln1 = nn::LayerNorm(params_, p + "ln1", w);
        b.q = nn::Linear(params_, p + "attn.q", w, w, rng);
        b.k = nn::Linear(params_, p + "attn.k", w, w, rng);
        b.v = nn::Linear(params_, p + "attn.v", w, w, rng);
        b.o = nn::Linear(params_, p + "attn.o", w, w, rng);
        b.ln2 = nn::LayerNorm(params_, p + "ln2", w);
        b.fc1 = nn::Linear(params_, p + "mlp.fc1", w, 4 * w, rng);
        b.fc2 = nn::Linear(params_, p + "mlp.fc2", 4 * w, w, rng);
        blocks_.push_back(b);
    }
    final_ln_ = nn::LayerNorm(params_, "final_ln", w);
    out_ = nn::Linear(params_, "out", w, cfg_.embed_dim, rng);
}

void AuxModel::check_classes(std::span<const int> classes, std::size_t rows) const {
    if (classes.empty()) return;
    if (classes.size() != rows) throw InvalidArgument("aux_denoise: one class id per row required");
    for (int c : classes) {
        if (c == kNullClass) continue;
        if (c < 0 || c >= cfg_.class_count) {
            throw InvalidArgument("aux_denoise: class id " + std::to_string(c) + " out of range [0, " +
                                  std::to_string(cfg_.class_count) + ")");
        }
    }
}

Var AuxModel::raw(const Var& scaled, std::span<const double> c_noise, std::span<const int> classes,
                  std::span<const double> aug) const {
    if (scaled.rank() != 2 || scaled.dim(1) != cfg_.embed_dim) {
        throw InvalidArgument("aux_denoise: expected (batch, " + std::to_string(cfg_.embed_dim) + ") input, got " +
                              nn::shape_string(scaled.shape()));
    }
    const int batch = scaled.dim(0);
    const auto rows = static_cast<std::size_t>(batch);
    if (c_noise.size() != rows) throw InvalidArgument("aux_denoise: one noise level per row required");
    check_classes(classes, rows);
    if (!aug.empty() && aug.size() != rows * static_cast<std::size_t>(cfg_.aug_label_dim)) {
        throw InvalidArgument("aux_denoise: augmentation label size mismatch");
    }

    std::vector<double> noise_in(c_noise.begin(), c_noise.end());
    for (double& v : noise_in) v *= kNoiseFeatureScale;
    Var sigma_tok = sigma_fc2_(nn::silu(sigma_fc1_(nn::fourier_features(noise_in, cfg_.sigma_features, kNoiseMaxPeriod))));

    std::vector<Var> tokens{as_token(sigma_tok)};
    std::vector<std::string> names{"sigma"};
    std::vector<std::vector<bool>> present{std::vector<bool>(rows, true)};

    std::vector<bool> cond_present(rows, false);
    bool any_cond = false;
    for (std::size_t r = 0; r < classes.size(); ++r) {
        cond_present[r] = classes[r] != kNullClass;
        any_cond = any_cond || cond_present[r];
    }
    if (cfg_.class_count > 0 && any_cond) {
        std::vector<int> ids(rows, 0);
        for (std::size_t r = 0; r < rows; ++r) ids[r] = cond_present[r] ? classes[r] : 0;
        tokens.push_back(as_token(class_table_(ids)));
        names.push_back("cond");
        present.push_back(cond_present);
    }

    tokens.push_back(as_token(noisy_in_(scaled)));
    names.push_back("noisy");
    present.emplace_back(rows, true);

    std::vector<double> aug_values;
    if (cfg_.aug_label_dim > 0) {
        aug_values = aug.empty() ? std::vector<double>(rows * cfg_.aug_label_dim, 0.0)
                                 : std::vector<double>(aug.begin(), aug.end());
        tokens.push_back(as_token(aug_in_(Var::constant({batch, cfg_.aug_label_dim}, aug_values))));
        names.push_back("aug");
        present.emplace_back(rows, true);
    }

    tokens.push_back(as_token(nn::add_bias(Var::zeros({batch, cfg_.token_dim}), query_)));
    names.push_back("query");
    present.emplace_back(rows, true);

    if (observer_) observer_(TokenTrace{names, cond_present, aug_values});

    const int t_count = static_cast<int>(tokens.size());
    std::vector<bool> mask_storage;
    const bool need_mask = names.size() > 1 && names[1] == "cond" &&
                           std::find(cond_present.begin(), cond_present.end(), false) != cond_present.end();
    if (need_mask) {
        mask_storage.resize(rows * t_count);
        for (std::size_t r = 0; r < rows; ++r)
            for (int t = 0; t < t_count; ++t) mask_storage[r * t_count + t] = present[t][r];
    }
    // std::vector<bool> is packed; copy into a contiguous buffer for the span.
    std::unique_ptr<bool[]> mask(need_mask ? new bool[mask_storage.size()] : nullptr);
    for (std::size_t i = 0; i < mask_storage.size(); ++i) mask[i] = mask_storage[i];
    const std::span<const bool> key_mask = need_mask ? std::span<const bool>(mask.get(), mask_storage.size())
                                                     : std::span<const bool>{};

    Var x = nn::concat(tokens, 1);
    for (const Block& b : blocks_) {
        Var h = b.ln1(x);
        x = nn::add(x, b.o(nn::attention(b.q(h), b.k(h), b.v(h), cfg_.num_heads, key_mask)));
        x = nn::add(x, b.fc2(nn::gelu(b.fc1(b.ln2(x)))));
    }
    Var query_out = nn::reshape(nn::slice(x, 1, t_count - 1, 1), {batch, cfg_.token_dim});
    return out_(final_ln_(query_out));
}

Var AuxModel::denoise(const Var& y_sigma, std::span<const double> sigma, std::span<const int> classes,
                      std::span<const double> aug) const {
    std::vector<int> cls(classes.begin(), classes.end());
    std::vector<double> a(aug.begin(), aug.end());
    return denoiser(std::move(cls), std::move(a))(y_sigma, sigma);
}

diffusion::Denoiser AuxModel::denoiser(std::vector<int> classes, std::vector<double> aug) const {
    diffusion::RawNet raw_net = [this, classes = std::move(classes), aug = std::move(aug)](
                                    const Var& scaled, std::span<const double> c_noise) {
        return raw(scaled, c_noise, classes, aug);
    };
    return diffusion::precondition(std::move(raw_net), sigma_data);
}

void AuxModel::write_meta(Checkpoint& ckpt) const {
    json meta = json::parse(ckpt.meta_json);
    meta["kind"] = "aux";
    meta["model"] = json::parse(cfg_.to_json());
    meta["sigma_data"] = sigma_data;
    ckpt.meta_json = meta.dump();
    ckpt.put("stats/mean", {static_cast<int>(stats.mean.size())}, {stats.mean.data(), stats.mean.data() + stats.mean.size()});
    ckpt.put("stats/scale", {static_cast<int>(stats.scale.size())},
             {stats.scale.data(), stats.scale.data() + stats.scale.size()});
}

AuxModel AuxModel::load(const Checkpoint& ckpt, bool use_ema) {
    json meta;
    try {
        meta = json::parse(ckpt.meta_json);
    } catch (const json::exception& e) {
        throw IncompatibleCheckpoint(std::string("unreadable checkpoint metadata: ") + e.what());
    }
    if (meta.value("kind", "") != "aux") throw IncompatibleCheckpoint("checkpoint does not hold an auxiliary model");
    Rng init(0);
    AuxModel model(AuxModelConfig::from_json(meta.at("model").dump()), init);
    train::load_parameters(ckpt, model.params_, use_ema);
    model.sigma_data = meta.at("sigma_data").get<double>();
    const auto& mean = ckpt.get("stats/mean").values;
    const auto& scale = ckpt.get("stats/scale").values;
    model.stats.mean = Eigen::Map<const Vector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    model.stats.scale = Eigen::Map<const Vector>(scale.data(), static_cast<Eigen::Index>(scale.size()));
    return model;
}

AuxModel AuxModel::load(const std::filesystem::path& path, bool use_ema) { return load(Checkpoint::load(path), use_ema); }

train::TrainResult train_aux(AuxModel& model, const AuxTrainData& data, const AuxTrainSettings& settings, Rng rng) {
    const auto& cfg = model.config();
    const Eigen::Index n = data.embeddings.rows();
    if (n == 0) throw InvalidArgument("train_aux: empty embedding set");
    if (data.embeddings.cols() != cfg.embed_dim) throw InvalidArgument("train_aux: embedding dimension mismatch");
    if (!data.classes.empty() && static_cast<Eigen::Index>(data.classes.size()) != n) {
        throw InvalidArgument("train_aux: class list length differs from embedding count");
    }
    const bool with_aug = data.aug_labels.size() > 0;
    if (with_aug && (data.aug_labels.rows() != n || data.aug_labels.cols() != cfg.aug_label_dim)) {
        throw InvalidArgument("train_aux: augmentation labels must be n x aug_label_dim");
    }

    model.stats = Standardizer::fit(data.embeddings);
    const Matrix standardized = model.stats.apply(data.embeddings);
    model.sigma_data =
        diffusion::estimate_sigma_data({standardized.data(), static_cast<std::size_t>(standardized.size())},
                                       static_cast<std::size_t>(cfg.embed_dim));
    diffusion::LossWeighting weighting = settings.weighting;
    weighting.sigma_data = model.sigma_data;

    const int batch = settings.options.batch_size;
    const int d = cfg.embed_dim;
    train::LossFn loss_fn = [&](Rng& r, long) {
        std::vector<int> idx(batch);
        for (int& i : idx) i = static_cast<int>(r.below(static_cast<std::uint64_t>(n)));
        std::vector<double> x(static_cast<std::size_t>(batch) * d);
        std::vector<int> cls;
        std::vector<double> aug;
        for (int b = 0; b < batch; ++b) {
            for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(b) * d + j] = standardized(idx[b], j);
            if (!data.classes.empty()) {
                const bool drop = settings.null_class_prob > 0.0 && r.uniform() < settings.null_class_prob;
                cls.push_back(drop ? kNullClass : data.classes[idx[b]]);
            }
            if (with_aug)
                for (int j = 0; j < cfg.aug_label_dim; ++j) aug.push_back(data.aug_labels(idx[b], j));
        }
        std::vector<double> sigmas(batch);
        for (double& s : sigmas) s = diffusion::sample_train_sigma(weighting, r);
        const std::vector<double> eps = r.normal_vector(x.size());
        const Var xb = Var::constant({batch, d}, std::move(x));
        auto den = model.denoiser(std::move(cls), std::move(aug));
        return train::StepLoss{diffusion::denoising_loss_at(den, xb, sigmas, eps, weighting), sigmas};
    };
    train::Trainer trainer(model.params(), settings.options, std::move(rng));
    auto result = trainer.run(loss_fn, [&](Checkpoint& ck) { model.write_meta(ck); });
    return result;
}

Matrix sample_embedding(const AuxModel& model, std::span<const int> classes, const diffusion::SamplerConfig& sampler,
                        const diffusion::ScheduleConfig& schedule, std::span<Rng> rngs) {
    if (classes.empty()) throw InvalidArgument("sample_embedding: need at least one row");
    const int rows = static_cast<int>(classes.size());
    const int d = model.config().embed_dim;
    bool any_cond = false;
    for (int c : classes) any_cond = any_cond || c != kNullClass;
    std::vector<int> cls = any_cond ? std::vector<int>(classes.begin(), classes.end()) : std::vector<int>{};
    // Test-time contract: augmentation token fixed at the all-zero label.
    std::vector<double> aug(static_cast<std::size_t>(rows) * model.config().aug_label_dim, 0.0);
    const auto den = model.denoiser(std::move(cls), std::move(aug));
    const std::vector<double> z = diffusion::sample(den, {rows, d}, sampler, schedule, rngs);
    const Matrix standardized = Eigen::Map<const Matrix>(z.data(), rows, d);
    return model.stats.invert(standardized);
}

}  // namespace vcdm::aux
