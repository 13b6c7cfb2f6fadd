#include "dataset.hpp"

#include "vcdm/errors.hpp"
#include "vcdm/experiments.hpp"

namespace vcdm::cli {

std::string data_hash(const ExperimentConfig& cfg) {
    return cfg.hash_of(cfg.keys_with_prefix({"dataset.", "ring.", "embedder."}), "data");
}

std::filesystem::path embedding_cache_path(const ExperimentConfig& cfg, const Paths& paths) {
    return paths.cache() / ("embeddings-" + data_hash(cfg) + ".vcache");
}

std::filesystem::path cached_manifest_path(const ExperimentConfig& cfg, const Paths& paths) {
    return paths.cache() / ("manifest-" + data_hash(cfg) + ".jsonl");
}

toy::RingConfig ring_config(const ExperimentConfig& cfg) {
    toy::RingConfig r;
    r.modes = static_cast<int>(cfg.get_int("ring.modes"));
    r.radius = cfg.get_double("ring.radius");
    r.spread = cfg.get_double("ring.spread");
    r.onehot_noise = cfg.get_double("ring.onehot_noise");
    r.offset_scale = cfg.get_double("ring.offset_scale");
    r.offset_noise = cfg.get_double("ring.offset_noise");
    return r;
}

std::unique_ptr<embedding::Embedder> make_config_embedder(const ExperimentConfig& cfg) {
    return embedding::make_embedder(cfg.get_string("embedder.backend"),
                                    static_cast<int>(cfg.get_int("embedder.proxy_dim")));
}

std::vector<double> to_model_space(const Image& image) {
    std::vector<double> out(image.pixels.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 2.0 * image.pixels[i] - 1.0;
    return out;
}

Image from_model_space(const double* row, const nn::Shape& shape) {
    Image img(shape.at(0), shape.at(1), shape.at(2));
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = std::clamp(0.5 * (row[i] + 1.0), 0.0, 1.0);
    return img;
}

namespace {

Dataset load_ring(const ExperimentConfig& cfg) {
    experiments::ToyConfig toy;
    toy.ring = ring_config(cfg);
    toy.n_train = static_cast<int>(cfg.get_int("ring.n_train"));
    toy.n_reference = static_cast<int>(cfg.get_int("ring.n_reference"));
    if (toy.n_train < 2 || toy.n_reference < 2) throw ConfigError("ring.n_train and ring.n_reference must be >= 2");
    const auto data = experiments::make_toy_data(toy, static_cast<std::uint64_t>(cfg.get_int("ring.data_seed")));
    Dataset d;
    d.is_ring = true;
    d.ring = toy.ring;
    d.item_shape = {2};
    d.x_train = data.train.x;
    d.y_train = data.train.y;
    d.classes_train = data.train.mode;
    d.class_count = toy.ring.modes;
    d.x_reference = data.reference.x;
    return d;
}

Dataset load_manifest(const ExperimentConfig& cfg, const Paths& paths, bool need_embeddings) {
    const std::filesystem::path source = cfg.get_string("dataset.manifest");
    if (source.empty()) throw ConfigError("dataset.kind = manifest requires dataset.manifest");

    const auto cached = cached_manifest_path(cfg, paths);
    const bool have_cache = std::filesystem::exists(cached);
    if (need_embeddings && !have_cache)
        throw NotReady("embedding cache missing for " + source.string() + "; run `vcdm cache-embeddings` first");
    auto manifest = data_aug::DatasetManifest::load(have_cache ? cached : source);

    Matrix cache;
    if (have_cache) {
        cache = embedding::read_cache(manifest.resolve(manifest.embedding_cache));
        manifest.validate(cache.rows());
    }

    Dataset d;
    d.class_count = manifest.class_count();
    const auto train_rows = manifest.indices(data_aug::Split::kTrain);
    const auto ref_rows = manifest.indices(data_aug::Split::kReference);
    if (train_rows.empty()) throw ConfigError("manifest has no training rows");
    const auto& first = manifest.rows[train_rows.front()];
    d.item_shape = {first.channels, first.height, first.width};
    const int item = first.channels * first.height * first.width;

    auto load_rows = [&](const std::vector<std::size_t>& rows, Matrix& x, std::vector<Image>* keep) {
        x.resize(static_cast<Eigen::Index>(rows.size()), item);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto& r = manifest.rows[rows[i]];
            if (r.channels != first.channels || r.height != first.height || r.width != first.width)
                throw ConfigError("manifest rows differ in shape: " + r.path.string());
            Image img = read_png(manifest.resolve(r.path));
            if (img.channels != r.channels || img.height != r.height || img.width != r.width)
                throw ConfigError("image " + r.path.string() + " does not match its manifest shape");
            const auto v = to_model_space(img);
            std::copy(v.begin(), v.end(), x.row(static_cast<Eigen::Index>(i)).data());
            if (keep) keep->push_back(std::move(img));
        }
    };
    load_rows(train_rows, d.x_train, &d.train_images);
    if (!ref_rows.empty()) load_rows(ref_rows, d.x_reference, nullptr);

    if (have_cache) {
        d.y_train.resize(static_cast<Eigen::Index>(train_rows.size()), cache.cols());
        for (std::size_t i = 0; i < train_rows.size(); ++i)
            d.y_train.row(static_cast<Eigen::Index>(i)) = cache.row(*manifest.rows[train_rows[i]].embedding_row);
    }
    if (d.class_count > 0) {
        for (auto r : train_rows) {
            const auto& label = manifest.rows[r].class_label;
            if (!label) throw ConfigError("manifest mixes labelled and unlabelled training rows");
            d.classes_train.push_back(*label);
        }
    }
    return d;
}

}  // namespace

Dataset load_dataset(const ExperimentConfig& cfg, const Paths& paths, bool need_embeddings) {
    if (cfg.get_string("dataset.kind") == "ring") return load_ring(cfg);
    return load_manifest(cfg, paths, need_embeddings);
}

}  // namespace vcdm::cli
