#include "vcdm/data_aug.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include <nlohmann/json.hpp>

#include "vcdm/errors.hpp"

namespace vcdm::data_aug {

using nlohmann::json;

void AugmentConfig::validate() const {
    for (double p : {p_hflip, p_rotate, p_brightness, p_saturation})
        if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("augmentation probabilities must lie in [0, 1]");
    if (!(max_rotation_deg >= 0.0)) throw InvalidArgument("max_rotation_deg must be non-negative");
    if (!(jitter_strength >= 0.0 && jitter_strength < 1.0))
        throw InvalidArgument("jitter_strength must lie in [0, 1)");
    if (buckets_per_side < 1) throw InvalidArgument("buckets_per_side must be >= 1");
}

bool AugmentationLabel::is_none() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return v == 0.0; });
}

AugmentationLabel encode(const AugmentOps& ops, const AugmentConfig& cfg) {
    const double b = cfg.buckets_per_side;
    AugmentationLabel label;
    label.values = {ops.hflip ? 1.0 : 0.0, ops.rotation / b, ops.brightness / b, ops.saturation / b};
    return label;
}

namespace {

int decode_bucket(double slot, int buckets) {
    const double scaled = slot * buckets;
    const double rounded = std::round(scaled);
    if (std::abs(scaled - rounded) > 1e-9 || std::abs(rounded) > buckets)
        throw InvalidArgument("augmentation label slot " + std::to_string(slot) + " is not a bucket");
    return static_cast<int>(rounded);
}

// Uniform magnitude in [-1, 1] snapped to a signed non-zero bucket.
int draw_bucket(Rng& rng, int buckets) {
    const double u = 2.0 * rng.uniform() - 1.0;
    const int b = std::clamp(static_cast<int>(std::ceil(std::abs(u) * buckets)), 1, buckets);
    return u < 0.0 ? -b : b;
}

double bucket_centre(int bucket, int buckets) {
    if (bucket == 0) return 0.0;
    const double mag = (std::abs(bucket) - 0.5) / buckets;
    return bucket < 0 ? -mag : mag;
}

}  // namespace

AugmentOps decode(const AugmentationLabel& label, const AugmentConfig& cfg) {
    AugmentOps ops;
    if (label.values[0] != 0.0 && label.values[0] != 1.0)
        throw InvalidArgument("augmentation label hflip slot must be 0 or 1");
    ops.hflip = label.values[0] == 1.0;
    ops.rotation = decode_bucket(label.values[1], cfg.buckets_per_side);
    ops.brightness = decode_bucket(label.values[2], cfg.buckets_per_side);
    ops.saturation = decode_bucket(label.values[3], cfg.buckets_per_side);
    return ops;
}

double rotation_degrees(int bucket, const AugmentConfig& cfg) {
    return cfg.max_rotation_deg * bucket_centre(bucket, cfg.buckets_per_side);
}

double jitter_factor(int bucket, const AugmentConfig& cfg) {
    return 1.0 + cfg.jitter_strength * bucket_centre(bucket, cfg.buckets_per_side);
}

Image hflip(const Image& image) {
    Image out(image.channels, image.height, image.width);
    for (int c = 0; c < image.channels; ++c)
        for (int y = 0; y < image.height; ++y)
            for (int x = 0; x < image.width; ++x) out.at(c, y, x) = image.at(c, y, image.width - 1 - x);
    return out;
}

Image rotate(const Image& image, double degrees) {
    const double theta = degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(theta), sn = std::sin(theta);
    const double cy = 0.5 * (image.height - 1), cx = 0.5 * (image.width - 1);
    Image out(image.channels, image.height, image.width);
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            // Inverse map: where does output (x, y) come from?
            const double dx = x - cx, dy = y - cy;
            const double sx = std::clamp(cs * dx + sn * dy + cx, 0.0, image.width - 1.0);
            const double sy = std::clamp(-sn * dx + cs * dy + cy, 0.0, image.height - 1.0);
            const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
            const int x1 = std::min(x0 + 1, image.width - 1), y1 = std::min(y0 + 1, image.height - 1);
            const double fx = sx - x0, fy = sy - y0;
            for (int c = 0; c < image.channels; ++c) {
                const double top = (1 - fx) * image.at(c, y0, x0) + fx * image.at(c, y0, x1);
                const double bottom = (1 - fx) * image.at(c, y1, x0) + fx * image.at(c, y1, x1);
                out.at(c, y, x) = (1 - fy) * top + fy * bottom;
            }
        }
    }
    return out;
}

Image adjust_brightness(const Image& image, double factor) {
    Image out = image;
    for (double& v : out.pixels) v = std::clamp(v * factor, 0.0, 1.0);
    return out;
}

Image adjust_saturation(const Image& image, double factor) {
    if (image.channels != 3) return image;
    Image out = image;
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            const double gray = 0.299 * image.at(0, y, x) + 0.587 * image.at(1, y, x) + 0.114 * image.at(2, y, x);
            for (int c = 0; c < 3; ++c)
                out.at(c, y, x) = std::clamp(gray + factor * (image.at(c, y, x) - gray), 0.0, 1.0);
        }
    }
    return out;
}

Image apply(const Image& image, const AugmentOps& ops, const AugmentConfig& cfg) {
    Image out = ops.hflip ? hflip(image) : image;
    if (ops.rotation != 0) out = rotate(out, rotation_degrees(ops.rotation, cfg));
    if (ops.brightness != 0) out = adjust_brightness(out, jitter_factor(ops.brightness, cfg));
    if (ops.saturation != 0) out = adjust_saturation(out, jitter_factor(ops.saturation, cfg));
    return out;
}

AugmentOps draw_ops(Rng& rng, const AugmentConfig& cfg) {
    cfg.validate();
    const bool fire_flip = rng.uniform() < cfg.p_hflip;
    const bool fire_rot = rng.uniform() < cfg.p_rotate;
    const bool fire_bright = rng.uniform() < cfg.p_brightness;
    const bool fire_sat = rng.uniform() < cfg.p_saturation;
    AugmentOps ops;
    ops.hflip = fire_flip;
    if (fire_rot) ops.rotation = draw_bucket(rng, cfg.buckets_per_side);
    if (fire_bright) ops.brightness = draw_bucket(rng, cfg.buckets_per_side);
    if (fire_sat) ops.saturation = draw_bucket(rng, cfg.buckets_per_side);
    return ops;
}

AugmentResult augment(const Image& image, Rng& rng, const AugmentConfig& cfg) {
    AugmentResult r;
    r.ops = draw_ops(rng, cfg);
    r.image = r.ops.any() ? apply(image, r.ops, cfg) : image;
    r.label = encode(r.ops, cfg);
    return r;
}

AugmentedEmbedding augmented_embedding(const Image& image, Rng& rng, const embedding::Embedder& embedder,
                                       const AugmentConfig& cfg) {
    AugmentResult a = augment(image, rng, cfg);
    AugmentedEmbedding out;
    out.embedding = embedder.embed(a.image);
    out.label = a.label;
    out.image = std::move(a.image);
    return out;
}

const char* to_string(Split s) { return s == Split::kTrain ? "train" : "reference"; }

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::kTrain;
    if (s == "reference" || s == "test") return Split::kReference;
    throw ConfigError("unknown split '" + s + "'");
}

void DatasetManifest::validate(long cache_rows) const {
    for (const auto& r : rows)
        if (r.channels <= 0 || r.height <= 0 || r.width <= 0)
            throw ConfigError("manifest row " + r.path.string() + " has a non-positive shape");
    if (!cache_complete) return;
    std::set<long> seen;
    for (const auto& r : rows) {
        if (!r.embedding_row) throw ConfigError("cache marked complete but " + r.path.string() + " has no embedding");
        const long e = *r.embedding_row;
        if (e < 0 || (cache_rows >= 0 && e >= cache_rows))
            throw ConfigError("embedding row " + std::to_string(e) + " is outside the cache");
        if (!seen.insert(e).second) throw ConfigError("embedding row " + std::to_string(e) + " is used twice");
    }
}

std::filesystem::path DatasetManifest::resolve(const std::filesystem::path& p) const {
    return p.is_absolute() ? p : base_dir / p;
}

std::vector<std::size_t> DatasetManifest::indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (rows[i].split == split) out.push_back(i);
    return out;
}

int DatasetManifest::class_count() const {
    int n = 0;
    for (const auto& r : rows)
        if (r.class_label) n = std::max(n, *r.class_label + 1);
    return n;
}

void DatasetManifest::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest " + path.string());
    out << json{{"vcdm_manifest", 1}, {"embedding_cache", embedding_cache.string()}, {"cache_complete", cache_complete}}
               .dump()
        << '\n';
    for (const auto& r : rows) {
        json j{{"path", r.path.string()},
               {"channels", r.channels},
               {"height", r.height},
               {"width", r.width},
               {"split", to_string(r.split)}};
        j["class"] = r.class_label ? json(*r.class_label) : json(nullptr);
        j["embedding_row"] = r.embedding_row ? json(*r.embedding_row) : json(nullptr);
        out << j.dump() << '\n';
    }
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw NotReady("manifest not found: " + path.string());
    DatasetManifest m;
    m.base_dir = path.parent_path();
    std::string line;
    long lineno = 0;
    try {
        if (!std::getline(in, line)) throw ConfigError("empty manifest " + path.string());
        ++lineno;
        const json header = json::parse(line);
        if (!header.contains("vcdm_manifest")) throw ConfigError("manifest header missing in " + path.string());
        m.embedding_cache = header.value("embedding_cache", std::string{});
        m.cache_complete = header.value("cache_complete", false);
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            const json j = json::parse(line);
            ManifestRow r;
            r.path = j.at("path").get<std::string>();
            r.channels = j.value("channels", 3);
            r.height = j.at("height").get<int>();
            r.width = j.at("width").get<int>();
            if (j.contains("class") && !j["class"].is_null()) r.class_label = j["class"].get<int>();
            r.split = split_from_string(j.value("split", std::string("train")));
            if (j.contains("embedding_row") && !j["embedding_row"].is_null())
                r.embedding_row = j["embedding_row"].get<long>();
            m.rows.push_back(std::move(r));
        }
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    m.validate();
    return m;
}

void require_augmentable(const ManifestRow& row) {
    if (row.split != Split::kTrain)
        throw InvalidArgument("refusing to augment " + row.path.string() + ": it belongs to the reference split");
}

AugmentResult augment_row(const DatasetManifest& manifest, std::size_t index, Rng& rng, const AugmentConfig& cfg) {
    if (index >= manifest.rows.size()) throw InvalidArgument("manifest row out of range");
    const auto& row = manifest.rows[index];
    require_augmentable(row);
    return augment(read_png(manifest.resolve(row.path)), rng, cfg);
}

Rng worker_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index) {
    return Rng(derive_seed(derive_seed(seed, epoch), index));
}

}  // namespace vcdm::data_aug
