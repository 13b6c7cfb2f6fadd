#include "commands.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>

#include "vcdm/aux_model.hpp"
#include "vcdm/checkpoint.hpp"
#include "vcdm/errors.hpp"
#include "vcdm/image.hpp"
#include "vcdm/image_model.hpp"
#include "vcdm/training.hpp"
#include "svg.hpp"

namespace vcdm::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;
using image_model::Regime;
using pipeline::Method;

namespace {

// Seed streams under the run seed.
enum Stream : std::uint64_t { kAuxInit = 1, kAuxTrain = 2, kImageTrain = 3, kImageInit = 4, kKMeans = 5, kAugment = 8 };

std::ostream& log(const Context& ctx) {
    static std::ostream null(nullptr);
    return ctx.log ? *ctx.log : null;
}

}  // namespace

std::string training_hash(const Context& ctx) {
    return ctx.cfg.hash_of(ctx.cfg.keys_with_prefix({"dataset.", "ring.", "embedder.", "augment.", "aux.", "image.",
                                                     "finetune.", "cluster.", "train."}),
                           "train");
}

namespace {

diffusion::SamplerConfig sampler_from(const ExperimentConfig& cfg, const std::string& stage) {
    diffusion::SamplerConfig s;
    s.num_steps = static_cast<int>(cfg.get_int(stage + ".steps"));
    s.stochastic = cfg.get_bool(stage + ".stochastic");
    s.s_churn = cfg.get_double(stage + ".churn");
    s.s_noise = cfg.get_double(stage + ".noise");
    s.s_tmin = cfg.get_double(stage + ".tmin");
    s.s_tmax = cfg.get_double(stage + ".tmax");
    s.validate();
    return s;
}

diffusion::ScheduleConfig schedule_from(const ExperimentConfig& cfg) {
    diffusion::ScheduleConfig s;
    s.sigma_min = cfg.get_double("schedule.sigma_min");
    s.sigma_max = cfg.get_double("schedule.sigma_max");
    s.rho = cfg.get_double("schedule.rho");
    s.validate();
    return s;
}

pipeline::SamplingPlan make_plan(const Context& ctx, int count, std::uint64_t seed) {
    pipeline::SamplingPlan plan;
    plan.method = ctx.method;
    plan.a.class_id = static_cast<int>(ctx.cfg.get_int("sample.class"));
    plan.count = count;
    plan.seed = seed;
    plan.stage1_sampler = sampler_from(ctx.cfg, "stage1");
    plan.stage2_sampler = sampler_from(ctx.cfg, "stage2");
    plan.stage1_schedule = plan.stage2_schedule = schedule_from(ctx.cfg);
    plan.chunk_size = static_cast<int>(ctx.cfg.get_int("sample.chunk"));
    plan.validate();
    return plan;
}

train::TrainOptions train_options(const Context& ctx, const std::string& prefix, const std::string& run_name) {
    train::TrainOptions o;
    o.steps = ctx.cfg.get_int(prefix + ".steps");
    o.batch_size = static_cast<int>(ctx.cfg.get_int(prefix + ".batch"));
    o.adam.lr = ctx.cfg.get_double(prefix + ".lr");
    o.ema_decay = ctx.cfg.get_double(prefix + ".ema");
    o.checkpoint_dir = ctx.paths.checkpoints();
    o.run_name = run_name;
    o.config_hash = training_hash(ctx);
    o.checkpoint_every = ctx.cfg.get_int("train.checkpoint_every");
    o.keep_last = static_cast<int>(ctx.cfg.get_int("train.keep_last"));
    return o;
}

train::TrainOptions aux_options(const Context& ctx) { return train_options(ctx, "aux", aux_run_name(ctx)); }
train::TrainOptions image_options(const Context& ctx, Regime r) {
    return train_options(ctx, "image", image_run_name(ctx, r));
}

// Every stored step checkpoint of a run, oldest first.
std::vector<fs::path> run_checkpoints(const train::TrainOptions& opts) {
    std::vector<std::pair<long, fs::path>> found;
    const std::string prefix = opts.run_name + "-" + opts.config_hash + "-step";
    if (fs::is_directory(opts.checkpoint_dir)) {
        for (const auto& e : fs::directory_iterator(opts.checkpoint_dir)) {
            const std::string name = e.path().filename().string();
            if (name.rfind(prefix, 0) != 0 || e.path().extension() != ".ckpt") continue;
            found.emplace_back(std::stol(name.substr(prefix.size())), e.path());
        }
    }
    std::sort(found.begin(), found.end());
    std::vector<fs::path> out;
    for (auto& f : found) out.push_back(f.second);
    return out;
}

fs::path require_checkpoint(const train::TrainOptions& opts, const std::string& hint) {
    const auto latest = train::latest_checkpoint(opts);
    if (!latest)
        throw NotReady("no checkpoint for run '" + opts.run_name + "' under " + opts.checkpoint_dir.string() +
                       "; run `vcdm train " + hint + "` first");
    return *latest;
}

std::string method_flag(Method m) {
    switch (m) {
        case Method::kVcdm: return "vcdm";
        case Method::kEdmDirect: return "edm";
        case Method::kClassCond: return "class-cond";
        case Method::kVcdmOracle: return "oracle";
    }
    return "vcdm";
}

Matrix one_hot(const embedding::KMeansCodebook& cb, const Matrix& y) {
    Matrix out = Matrix::Zero(y.rows(), cb.size());
    for (Eigen::Index i = 0; i < y.rows(); ++i)
        out(i, embedding::kmeans_assign(cb, {y.row(i).data(), static_cast<std::size_t>(y.cols())})) = 1.0;
    return out;
}

image_model::ImageModelConfig image_config(const Context& ctx, const Dataset& ds, Regime regime, int y_dim) {
    const auto& cfg = ctx.cfg;
    image_model::ImageModelConfig c;
    if (cfg.get_string("image.arch") == "mlp") {
        c.arch = image_model::Architecture::kMlp;
        int size = 1;
        for (int s : ds.item_shape) size *= s;
        c.data_dim = size;
        c.mlp_width = static_cast<int>(cfg.get_int("image.mlp_width"));
        c.mlp_blocks = static_cast<int>(cfg.get_int("image.mlp_blocks"));
    } else {
        if (ds.item_shape.size() != 3 || ds.item_shape[1] != ds.item_shape[2])
            throw ConfigError("image.arch = unet needs square (C, H, W) items; use image.arch = mlp for the ring");
        c.arch = image_model::Architecture::kUNet;
        c.channels = ds.item_shape[0];
        c.resolution = ds.item_shape[1];
        c.base_width = static_cast<int>(cfg.get_int("image.base_width"));
        c.channel_multipliers.clear();
        for (long m : cfg.get_int_list("image.channel_mults")) c.channel_multipliers.push_back(static_cast<int>(m));
    }
    c.sigma_features = static_cast<int>(cfg.get_int("image.sigma_features"));
    c.regime = regime;
    c.y_dim = regime == Regime::kUnconditional ? 0 : y_dim;
    if (cfg.get_bool("image.class_conditional")) {
        if (ds.class_count == 0) throw ConfigError("image.class_conditional needs class labels in the dataset");
        c.class_count = ds.class_count;
    }
    if (cfg.get_bool("augment.enabled")) c.aug_label_dim = data_aug::AugmentationLabel::kDim;
    c.validate();
    return c;
}

void check_augment(const Context& ctx, const Dataset& ds) {
    if (ctx.cfg.get_bool("augment.enabled") && ds.is_ring)
        throw ConfigError("augment.enabled applies to image manifests, not the ring toy");
}

void write_codebook(const fs::path& path, const embedding::KMeansCodebook& cb, const std::vector<double>& dist,
                    const std::string& hash) {
    Checkpoint ck;
    cb.save(ck, "codebook");
    ck.put("distribution", dist);
    ck.meta_json = json{{"kind", "codebook"}, {"config_hash", hash}}.dump();
    fs::create_directories(path.parent_path());
    ck.save(path);
}

struct Codebook {
    embedding::KMeansCodebook cb;
    std::vector<double> distribution;
};

Codebook read_codebook(const fs::path& path) {
    if (!fs::exists(path))
        throw NotReady("no cluster codebook at " + path.string() + "; run `vcdm train --which image --method class-cond`");
    const auto ck = Checkpoint::load(path);
    return {embedding::KMeansCodebook::load(ck, "codebook"), ck.get("distribution").values};
}

// Everything one method needs at sampling time.
struct MethodModels {
    std::optional<aux::AuxModel> prior;
    std::optional<image_model::ImageModel> image;
    std::optional<Codebook> codebook;
    pipeline::EmbeddingDataset oracle_data;
};

MethodModels load_models(const Context& ctx, const std::optional<fs::path>& image_ckpt = std::nullopt) {
    MethodModels m;
    if (ctx.method == Method::kVcdmOracle) {
        // The oracle draws y from the dataset, so a config without one is
        // rejected before any checkpoint lookup.
        const Dataset ds = load_dataset(ctx.cfg, ctx.paths, true);
        m.oracle_data.y = ds.y_train;
        if (ctx.cfg.get_int("sample.class") >= 0) m.oracle_data.classes = ds.classes_train;
    }
    const Regime regime = regime_for(ctx.method);
    const std::string flag = method_flag(ctx.method);
    const fs::path image_path =
        image_ckpt ? *image_ckpt : require_checkpoint(image_options(ctx, regime), "--which image --method " + flag);
    m.image.emplace(image_model::ImageModel::load(image_path));
    if (m.image->config().class_count > 0 && ctx.cfg.get_int("sample.class") < 0)
        throw ConfigError("the image model is class-conditional; set sample.class to a label in [0, " +
                          std::to_string(m.image->config().class_count) + ")");
    if (ctx.method == Method::kVcdm)
        m.prior.emplace(aux::AuxModel::load(require_checkpoint(aux_options(ctx), "--which aux")));
    if (ctx.method == Method::kClassCond) m.codebook = read_codebook(codebook_path(ctx));
    return m;
}

pipeline::SampleBatch sample_with(const Context& ctx, const MethodModels& m, const pipeline::SamplingPlan& plan) {
    const pipeline::Stage2 stage2{&*m.image, image_run_name(ctx, regime_for(ctx.method))};
    switch (ctx.method) {
        case Method::kVcdm: return pipeline::vcdm_sample(plan, *m.prior, aux_run_name(ctx), stage2);
        case Method::kVcdmOracle: return pipeline::oracle_sample(plan, m.oracle_data, stage2);
        case Method::kClassCond:
            return pipeline::class_cond_sample(plan, m.codebook->cb, m.codebook->distribution, stage2);
        case Method::kEdmDirect: return pipeline::edm_direct(plan, stage2);
    }
    throw InvalidArgument("unknown method");
}

std::string extractor_name(const Context& ctx) {
    const std::string e = ctx.cfg.get_string("eval.extractor");
    if (e != "auto") return e;
    return ctx.cfg.get_string("dataset.kind") == "ring" ? "identity" : "proxy";
}

// Loads or builds the reference feature table and returns its statistics.
eval::GaussianStats reference_stats(const Context& ctx, const Dataset& ds, const eval::FeatureExtractor& extractor) {
    const fs::path path = reference_feature_path(ctx);
    if (!fs::exists(path)) {
        if (ds.x_reference.rows() < 2) throw ConfigError("evaluation needs at least two reference items");
        log(ctx) << "computing reference features for " << ds.x_reference.rows() << " items\n";
        fs::create_directories(path.parent_path());
        embedding::write_cache(path, embedding::SourceTag::kRawTensor, extractor.extract(ds.x_reference));
    }
    return eval::fit_gaussian(embedding::read_cache(path), ctx.cfg.get_double("eval.shrinkage"));
}

std::string fmt(double v) {
    std::ostringstream o;
    o << std::setprecision(10) << v;
    return o.str();
}

}  // namespace

// ------------------------------------------------------------------ context

Context Context::from_config(ExperimentConfig cfg) {
    Context ctx;
    ctx.paths.root = cfg.get_string("out_dir");
    ctx.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
    ctx.method = pipeline::method_from_string(cfg.get_string("method"));
    ctx.count = static_cast<int>(cfg.get_int("sample.count"));
    ctx.cfg = std::move(cfg);
    return ctx;
}

std::string aux_run_name(const Context& ctx) { return "aux-s" + std::to_string(ctx.seed); }

std::string image_run_name(const Context& ctx, Regime regime) {
    return std::string("image-") + image_model::to_string(regime) + "-s" + std::to_string(ctx.seed);
}

fs::path codebook_path(const Context& ctx) {
    return ctx.paths.checkpoints() / ("codebook-" + training_hash(ctx) + "-s" + std::to_string(ctx.seed) + ".ckpt");
}

Regime regime_for(Method m) {
    switch (m) {
        case Method::kVcdm:
        case Method::kVcdmOracle: return Regime::kEmbedding;
        case Method::kClassCond: return Regime::kCluster;
        case Method::kEdmDirect: return Regime::kUnconditional;
    }
    return Regime::kEmbedding;
}

fs::path reference_feature_path(const Context& ctx) {
    auto keys = ctx.cfg.keys_with_prefix({"dataset.", "ring."});
    const std::string salt = "reference:" + extractor_name(ctx);
    return ctx.paths.cache() / ("reffeat-" + ctx.cfg.hash_of(keys, salt) + ".vcache");
}

// ------------------------------------------------------------------ cache

CacheOutcome cmd_cache_embeddings(const Context& ctx) {
    CacheOutcome out;
    out.cache = embedding_cache_path(ctx.cfg, ctx.paths);
    out.manifest = cached_manifest_path(ctx.cfg, ctx.paths);

    if (ctx.cfg.get_string("dataset.kind") == "ring") {
        // Ring embeddings are generated with the points; the cache only
        // materialises them for inspection.
        if (fs::exists(out.cache)) {
            out.rows = static_cast<long>(embedding::read_cache_header(out.cache).count);
            log(ctx) << "embedding cache complete (" << out.rows << " rows): " << out.cache.string() << "\n";
            return out;
        }
        const Dataset ds = load_dataset(ctx.cfg, ctx.paths, false);
        fs::create_directories(out.cache.parent_path());
        embedding::write_cache(out.cache, embedding::SourceTag::kToy, ds.y_train);
        out.wrote = true;
        out.rows = ds.y_train.rows();
        log(ctx) << "wrote " << out.rows << " ring embeddings to " << out.cache.string() << "\n";
        return out;
    }

    const fs::path source = ctx.cfg.get_string("dataset.manifest");
    if (source.empty()) throw ConfigError("dataset.kind = manifest requires dataset.manifest");
    if (fs::exists(out.manifest) && fs::exists(out.cache)) {
        const auto header = embedding::read_cache_header(out.cache);
        const auto done = data_aug::DatasetManifest::load(out.manifest);
        if (done.cache_complete && header.count == done.rows.size()) {
            done.validate(static_cast<long>(header.count));
            out.rows = static_cast<long>(header.count);
            log(ctx) << "embedding cache complete (" << out.rows << " rows): " << out.cache.string() << "\n";
            return out;
        }
    }

    auto manifest = data_aug::DatasetManifest::load(source);
    const auto embedder = make_config_embedder(ctx.cfg);
    Matrix rows(static_cast<Eigen::Index>(manifest.rows.size()), embedder->dim());
    for (std::size_t i = 0; i < manifest.rows.size(); ++i) {
        auto& r = manifest.rows[i];
        const auto e = embedder->embed(read_png(manifest.resolve(r.path)));
        std::copy(e.values.begin(), e.values.end(), rows.row(static_cast<Eigen::Index>(i)).data());
        r.path = fs::absolute(manifest.resolve(r.path));
        r.embedding_row = static_cast<long>(i);
    }
    fs::create_directories(out.cache.parent_path());
    embedding::write_cache(out.cache, embedder->tag(), rows);
    manifest.base_dir = fs::absolute(out.manifest.parent_path());
    manifest.embedding_cache = out.cache.filename();
    manifest.cache_complete = true;
    manifest.save(out.manifest);
    out.wrote = true;
    out.rows = rows.rows();
    log(ctx) << "embedded " << out.rows << " images with " << embedder->name() << " into " << out.cache.string()
             << "\n";
    return out;
}

// ------------------------------------------------------------------ train

TrainOutcome cmd_train(const Context& ctx, Which which, long max_steps) {
    const Dataset ds = load_dataset(ctx.cfg, ctx.paths, which == Which::kAux || ctx.method != Method::kEdmDirect);
    check_augment(ctx, ds);
    const bool augment = ctx.cfg.get_bool("augment.enabled");
    train::TrainResult result;
    train::TrainOptions opts;

    if (which == Which::kAux) {
        opts = aux_options(ctx);
        opts.stop_after = max_steps;
        aux::AuxModelConfig ac;
        ac.embed_dim = static_cast<int>(ds.y_train.cols());
        ac.token_dim = static_cast<int>(ctx.cfg.get_int("aux.token_dim"));
        ac.num_layers = static_cast<int>(ctx.cfg.get_int("aux.layers"));
        ac.num_heads = static_cast<int>(ctx.cfg.get_int("aux.heads"));
        ac.sigma_features = static_cast<int>(ctx.cfg.get_int("aux.sigma_features"));
        aux::AuxTrainData data{ds.y_train, {}, {}};
        if (ctx.cfg.get_bool("aux.class_conditional")) {
            if (ds.class_count == 0) throw ConfigError("aux.class_conditional needs class labels in the dataset");
            ac.class_count = ds.class_count;
            data.classes = ds.classes_train;
        }
        if (augment) {
            // Clean rows carry the zero label; each copy adds one augmented
            // embedding per image with its label.
            const auto embedder = make_config_embedder(ctx.cfg);
            const long copies = ctx.cfg.get_int("augment.aux_copies");
            const auto n = ds.y_train.rows();
            const int kDim = data_aug::AugmentationLabel::kDim;
            ac.aug_label_dim = kDim;
            Matrix y(n * (1 + copies), ds.y_train.cols());
            Matrix labels = Matrix::Zero(y.rows(), kDim);
            y.topRows(n) = ds.y_train;
            std::vector<int> classes = data.classes;
            for (long c = 0; c < copies; ++c) {
                for (Eigen::Index i = 0; i < n; ++i) {
                    Rng rng = data_aug::worker_rng(derive_seed(ctx.seed, kAugment), static_cast<std::uint64_t>(c),
                                                   static_cast<std::uint64_t>(i));
                    const auto a = data_aug::augmented_embedding(ds.train_images[static_cast<std::size_t>(i)], rng,
                                                                 *embedder);
                    const auto row = n * (1 + c) + i;
                    for (int j = 0; j < y.cols(); ++j) y(row, j) = a.embedding.values[static_cast<std::size_t>(j)];
                    for (int j = 0; j < kDim; ++j) labels(row, j) = a.label.values[static_cast<std::size_t>(j)];
                    if (!data.classes.empty()) classes.push_back(data.classes[static_cast<std::size_t>(i)]);
                }
            }
            data.embeddings = std::move(y);
            data.aug_labels = std::move(labels);
            data.classes = std::move(classes);
        }
        Rng init(derive_seed(ctx.seed, kAuxInit));
        aux::AuxModel model(ac, init);
        aux::AuxTrainSettings settings;
        settings.options = opts;
        settings.null_class_prob = ac.class_count > 0 ? ctx.cfg.get_double("aux.null_class_prob") : 0.0;
        log(ctx) << "training " << opts.run_name << " for " << opts.steps << " steps\n";
        result = aux::train_aux(model, data, settings, Rng(derive_seed(ctx.seed, kAuxTrain)));
    } else {
        const Regime regime = regime_for(ctx.method);
        opts = image_options(ctx, regime);
        opts.stop_after = max_steps;
        image_model::ImageTrainData data;
        data.x = ds.x_train;
        std::optional<embedding::KMeansCodebook> codebook;
        if (regime == Regime::kEmbedding) {
            data.y = ds.y_train;
        } else if (regime == Regime::kCluster) {
            Rng km(derive_seed(ctx.seed, kKMeans));
            codebook = embedding::kmeans_fit(ds.y_train, static_cast<int>(ctx.cfg.get_int("cluster.k")), km);
            data.y = one_hot(*codebook, ds.y_train);
            write_codebook(codebook_path(ctx), *codebook,
                           embedding::empirical_cluster_distribution(*codebook, ds.y_train), training_hash(ctx));
        }
        if (ctx.cfg.get_bool("image.class_conditional")) data.classes = ds.classes_train;

        const fs::path base = ctx.cfg.get_string("finetune.base");
        std::optional<image_model::ImageModel> model;
        image_model::ImageTrainSettings settings;
        if (!base.empty()) {
            if (regime == Regime::kUnconditional) throw ConfigError("finetune.base needs a conditional method");
            if (!fs::exists(base)) throw NotReady("finetune base checkpoint not found: " + base.string());
            model.emplace(image_model::attach_zero_init_conditioning(Checkpoint::load(base), regime,
                                                                     static_cast<int>(data.y.cols())));
            // Keep the base preconditioning so zero further steps leave outputs unchanged.
            settings.estimate_sigma_data = false;
            settings.weighting.sigma_data = model->sigma_data;
        } else {
            Rng init(derive_seed(ctx.seed, kImageInit));
            model.emplace(image_config(ctx, ds, regime, static_cast<int>(data.y.cols())), init);
        }
        settings.options = opts;
        std::unique_ptr<embedding::Embedder> embedder;
        if (augment) {
            embedder = make_config_embedder(ctx.cfg);
            settings.augmenter = [&](int index, Rng& rng) {
                const auto a = data_aug::augment(ds.train_images[static_cast<std::size_t>(index)], rng);
                image_model::Augmented out;
                out.x = to_model_space(a.image);
                out.label.assign(a.label.values.begin(), a.label.values.end());
                if (regime != Regime::kUnconditional) {
                    const auto e = embedder->embed(a.image).values;
                    if (regime == Regime::kEmbedding) {
                        out.y = e;
                    } else {
                        out.y.assign(static_cast<std::size_t>(codebook->size()), 0.0);
                        out.y[static_cast<std::size_t>(embedding::kmeans_assign(*codebook, e))] = 1.0;
                    }
                }
                return out;
            };
        }
        log(ctx) << "training " << opts.run_name << " for " << opts.steps << " steps\n";
        result = image_model::train_image_model(*model, data, settings, Rng(derive_seed(ctx.seed, kImageTrain)));
    }

    TrainOutcome out;
    out.steps_done = result.steps_done;
    out.finished = result.finished;
    out.resumed = result.resumed;
    out.checkpoint = result.last_checkpoint;
    out.history = result.history;
    out.loss_csv = ctx.paths.logs() / (opts.run_name + "-" + opts.config_hash + "-loss.csv");
    fs::create_directories(out.loss_csv.parent_path());
    train::write_loss_csv(out.loss_csv, result.history);
    log(ctx) << opts.run_name << ": " << result.steps_done << "/" << opts.steps << " steps"
             << (result.resumed ? " (resumed)" : "");
    if (!result.history.empty()) log(ctx) << ", last loss " << result.history.back().loss;
    log(ctx) << "\n";
    return out;
}

// ------------------------------------------------------------------ sample

SampleOutcome cmd_sample(const Context& ctx, bool with_timing) {
    if (ctx.count < 1) throw InvalidArgument("--count must be >= 1");
    const MethodModels models = load_models(ctx);
    const auto plan = make_plan(ctx, ctx.count, ctx.seed);

    SampleOutcome out;
    out.batch = sample_with(ctx, models, plan);
    const std::string stem = method_flag(ctx.method) + "-s" + std::to_string(ctx.seed) + "-n" +
                             std::to_string(ctx.count) + "-" + ctx.hash();
    fs::create_directories(ctx.paths.samples());
    out.grid = ctx.paths.samples() / (stem + ".png");
    out.tensor = ctx.paths.samples() / (stem + ".vcache");
    out.manifest = ctx.paths.samples() / ("samples-" + ctx.hash() + ".jsonl");

    const auto& x = out.batch.x;
    out.grid_columns = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(ctx.count))));
    out.grid_rows = (ctx.count + out.grid_columns - 1) / out.grid_columns;
    if (out.batch.item_shape.size() == 3) {
        std::vector<Image> images;
        for (Eigen::Index i = 0; i < x.rows(); ++i) images.push_back(from_model_space(x.row(i).data(), out.batch.item_shape));
        write_png(out.grid, make_grid(images));
    } else {
        // Points: a scatter plot over a square that contains the ring.
        double extent = 1.0;
        for (Eigen::Index i = 0; i < x.size(); ++i) extent = std::max(extent, std::abs(x.data()[i]));
        std::vector<double> xy(x.data(), x.data() + x.size());
        write_png(out.grid, scatter_plot(xy, 256, -1.1 * extent, 1.1 * extent));
        out.grid_columns = out.grid_rows = 0;
    }
    embedding::write_cache(out.tensor, embedding::SourceTag::kRawTensor, x);

    json row{{"method", method_flag(ctx.method)},
             {"seed", ctx.seed},
             {"count", ctx.count},
             {"config_hash", ctx.hash()},
             {"item_shape", out.batch.item_shape},
             {"grid", out.grid.filename().string()},
             {"tensor", out.tensor.filename().string()},
             {"stage1_ms", out.batch.stage1_ms},
             {"stage2_ms", out.batch.stage2_ms}};
    std::ofstream(out.manifest, std::ios::app) << row.dump() << "\n";

    log(ctx) << "sampled " << ctx.count << " items with " << method_flag(ctx.method) << ": " << out.grid.string()
             << "\n";
    if (with_timing) {
        if (ctx.method == Method::kVcdm) {
            auto timing_plan = plan;
            timing_plan.count = std::min(ctx.count, 8);
            log(ctx) << pipeline::format_timing(pipeline::timing_report(timing_plan, *models.prior, *models.image))
                     << "\n";
        } else {
            log(ctx) << "stage 2: " << fmt(out.batch.stage2_ms / ctx.count) << " ms/item\n";
        }
    }
    return out;
}

// ------------------------------------------------------------------ eval

EvalOutcome cmd_eval(const Context& ctx, bool plot) {
    const Dataset ds = load_dataset(ctx.cfg, ctx.paths, false);
    const auto extractor =
        eval::make_extractor(eval::extractor_from_string(extractor_name(ctx)), ds.item_shape);
    EvalOutcome out;
    out.reference_cache = reference_feature_path(ctx);
    const auto ref = reference_stats(ctx, ds, *extractor);

    const Regime regime = regime_for(ctx.method);
    const auto checkpoints = run_checkpoints(image_options(ctx, regime));
    if (checkpoints.empty())
        require_checkpoint(image_options(ctx, regime), "--which image --method " + method_flag(ctx.method));

    eval::FidOptions fo;
    fo.n = static_cast<int>(ctx.cfg.get_int("eval.n"));
    fo.seed = ctx.seed;
    fo.shrinkage = ctx.cfg.get_double("eval.shrinkage");
    out.csv = ctx.paths.metrics() / ("metrics-" + ctx.hash() + ".csv");
    fs::create_directories(out.csv.parent_path());

    for (const auto& path : checkpoints) {
        const MethodModels models = load_models(ctx, path);
        const long step = train::checkpoint_step(Checkpoint::load(path));
        const eval::Generator gen = [&](int n, std::uint64_t seed) {
            return sample_with(ctx, models, make_plan(ctx, n, seed)).x;
        };
        const auto r = eval::fid_protocol(gen, ref, *extractor, fo);
        eval::MetricRow row{ctx.hash(), method_flag(ctx.method), step, r.n, r.extractor, r.score, ctx.seed};
        eval::append_metric_row(out.csv, row);
        out.rows.push_back(row);
        log(ctx) << method_flag(ctx.method) << " step " << step << ": score " << fmt(r.score) << "\n";
    }
    if (plot) {
        out.plot = ctx.paths.metrics() / ("metrics-" + ctx.hash() + ".svg");
        cmd_plot(out.csv, *out.plot);
    }
    return out;
}

// ------------------------------------------------------------------ sweep

SweepOutcome cmd_sweep_dim(const Context& ctx) {
    const Dataset ds = load_dataset(ctx.cfg, ctx.paths, true);
    const std::string arm = ctx.cfg.get_string("sweep.arm");
    const auto grid = ctx.cfg.get_int_list("sweep.grid");
    const auto budgets = ctx.cfg.get_int_list("sweep.budgets");
    const int d = static_cast<int>(ds.y_train.cols());
    for (long g : grid) {
        if (g < 1) throw InvalidArgument("sweep.grid entries must be positive");
        if (arm == "pca" && g > d)
            throw InvalidArgument("sweep.grid entry " + std::to_string(g) + " exceeds the embedding dimension " +
                                  std::to_string(d));
    }
    for (long b : budgets)
        if (b < 0) throw InvalidArgument("sweep.budgets entries must be non-negative");

    const auto extractor =
        eval::make_extractor(eval::extractor_from_string(extractor_name(ctx)), ds.item_shape);
    const auto ref = reference_stats(ctx, ds, *extractor);
    eval::FidOptions fo;
    fo.n = static_cast<int>(ctx.cfg.get_int("eval.n"));
    fo.seed = ctx.seed;
    fo.shrinkage = ctx.cfg.get_double("eval.shrinkage");

    SweepOutcome out;
    for (long g : grid) {
        Matrix codes;
        double recon = std::numeric_limits<double>::quiet_NaN();
        if (arm == "pca") {
            const auto pca = embedding::pca_fit(ds.y_train, static_cast<int>(g));
            codes = embedding::pca_apply(pca, ds.y_train);
            recon = embedding::pca_reconstruction_error(pca, ds.y_train);
        } else {
            Rng km(derive_seed(ctx.seed, kKMeans));
            codes = one_hot(embedding::kmeans_fit(ds.y_train, static_cast<int>(g), km), ds.y_train);
        }
        for (long budget : budgets) {
            auto opts = image_options(ctx, Regime::kEmbedding);
            opts.steps = budget;
            opts.checkpoint_dir.clear();
            Rng init(derive_seed(ctx.seed, kImageInit));
            image_model::ImageModel model(image_config(ctx, ds, Regime::kEmbedding, static_cast<int>(codes.cols())),
                                          init);
            image_model::ImageTrainSettings settings;
            settings.options = opts;
            std::vector<int> classes;
            if (ctx.cfg.get_bool("image.class_conditional")) classes = ds.classes_train;
            const auto r = image_model::train_image_model(model, {ds.x_train, codes, classes}, settings,
                                                          Rng(derive_seed(ctx.seed, kImageTrain)));
            model.params().assign(r.ema_values);

            Context oracle = ctx;
            oracle.method = Method::kVcdmOracle;
            if (model.config().class_count > 0 && ctx.cfg.get_int("sample.class") < 0)
                throw ConfigError("image.class_conditional sweeps need sample.class >= 0");
            const pipeline::EmbeddingDataset pool{codes, ctx.cfg.get_int("sample.class") >= 0 ? ds.classes_train
                                                                                             : std::vector<int>{}};
            const eval::Generator gen = [&](int n, std::uint64_t seed) {
                return pipeline::oracle_sample(make_plan(oracle, n, seed), pool, {&model, "sweep"}).x;
            };
            const double score = eval::fid_protocol(gen, ref, *extractor, fo).score;
            out.rows.push_back({arm, static_cast<int>(g), budget, score, ctx.seed, recon});
            log(ctx) << arm << " " << g << " budget " << budget << ": score " << fmt(score) << "\n";
        }
    }

    out.csv = ctx.paths.metrics() / ("sweep-" + arm + "-s" + std::to_string(ctx.seed) + "-" + ctx.hash() + ".csv");
    fs::create_directories(out.csv.parent_path());
    std::ofstream f(out.csv);
    f << "arm,dim_or_K,budget,score,seed,recon\n";
    for (const auto& r : out.rows)
        f << r.arm << "," << r.dim << "," << r.budget << "," << fmt(r.score) << "," << r.seed << ","
          << (std::isnan(r.recon) ? std::string("") : fmt(r.recon)) << "\n";
    if (!f) throw IoError("cannot write " + out.csv.string());
    return out;
}

std::vector<SweepCsvRow> read_sweep_csv(const fs::path& csv) {
    std::ifstream in(csv);
    if (!in) throw IoError("cannot open " + csv.string());
    std::string line;
    std::getline(in, line);
    if (line.rfind("arm,dim_or_K,budget,score,seed", 0) != 0) throw ConfigError(csv.string() + " is not a sweep CSV");
    std::vector<SweepCsvRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() == 5) f.emplace_back();
        if (f.size() != 6) throw ConfigError("malformed sweep row: " + line);
        rows.push_back({f[0], std::stoi(f[1]), std::stol(f[2]), std::stod(f[3]), std::stoull(f[4]),
                        f[5].empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(f[5])});
    }
    return rows;
}

// ------------------------------------------------------------------ plot

void cmd_plot(const fs::path& csv, const fs::path& svg) {
    std::ifstream in(csv);
    if (!in) throw IoError("cannot open " + csv.string());
    std::string header;
    std::getline(in, header);
    in.close();

    LinePlot plot;
    std::map<std::string, Series> series;
    if (header.rfind("plan_hash,", 0) == 0) {
        plot.title = "score vs training step";
        plot.x_label = "checkpoint step";
        plot.y_label = "score";
        for (const auto& r : eval::read_metric_rows(csv)) {
            auto& s = series[r.method + " seed " + std::to_string(r.seed)];
            s.x.push_back(static_cast<double>(r.step));
            s.y.push_back(r.score);
        }
    } else if (header.rfind("arm,", 0) == 0) {
        plot.title = "score vs conditioning dimension";
        plot.x_label = "dimension or K";
        plot.y_label = "score";
        plot.log_x = true;
        for (const auto& r : read_sweep_csv(csv)) {
            auto& s = series[r.arm + " budget " + std::to_string(r.budget) + " seed " + std::to_string(r.seed)];
            s.x.push_back(r.dim);
            s.y.push_back(r.score);
        }
    } else {
        throw ConfigError(csv.string() + " is neither a metrics nor a sweep CSV");
    }
    for (auto& [name, s] : series) {
        s.name = name;
        plot.series.push_back(s);
    }
    if (!svg.parent_path().empty()) fs::create_directories(svg.parent_path());
    std::ofstream out(svg);
    out << render_svg(plot);
    if (!out) throw IoError("cannot write " + svg.string());
}

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::kInvalidArgument: return 3;
        case ErrorKind::kNumericFailure: return 4;
        case ErrorKind::kBackendUnavailable: return 5;
        case ErrorKind::kNotReady: return 6;
        case ErrorKind::kConfiguration: return 7;
        case ErrorKind::kCacheCorrupt: return 8;
        case ErrorKind::kIncompatibleCheckpoint: return 9;
        case ErrorKind::kDegenerateCodebook: return 10;
        case ErrorKind::kIo: return 11;
    }
    return 1;
}

}  // namespace vcdm::cli
