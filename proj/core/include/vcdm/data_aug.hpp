#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vcdm/embedding.hpp"
#include "vcdm/image.hpp"
#include "vcdm/random.hpp"

namespace vcdm::data_aug {

// Image-space augmentation regime. Each op fires independently with its own
// probability; magnitudes are drawn uniformly and snapped to bucket centres
// so the label stays a small discrete description.
struct AugmentConfig {
    double p_hflip = 0.5;
    double p_rotate = 0.5;
    double p_brightness = 0.5;
    double p_saturation = 0.5;
    double max_rotation_deg = 15.0;
    double jitter_strength = 0.2;
    // Buckets per side of zero for rotation and jitter magnitudes.
    int buckets_per_side = 3;

    void validate() const;
};

// Ops as applied. Bucket values are signed indices in
// [-buckets_per_side, buckets_per_side]; 0 means the op did not fire.
struct AugmentOps {
    bool hflip = false;
    int rotation = 0;
    int brightness = 0;
    int saturation = 0;

    bool any() const { return hflip || rotation != 0 || brightness != 0 || saturation != 0; }
    bool operator==(const AugmentOps&) const = default;
};

// Fixed-length label fed to the models. Slots: hflip in {0, 1}, then the
// rotation, brightness and saturation buckets divided by buckets_per_side.
// The all-zero vector means "no augmentation" and is what sampling uses.
struct AugmentationLabel {
    static constexpr int kDim = 4;
    std::array<double, kDim> values{};

    bool is_none() const;
    bool operator==(const AugmentationLabel&) const = default;
};

AugmentationLabel encode(const AugmentOps& ops, const AugmentConfig& cfg);
// Throws InvalidArgument when a slot is not a valid bucket.
AugmentOps decode(const AugmentationLabel& label, const AugmentConfig& cfg);

// Bucket centre magnitudes, used by apply().
double rotation_degrees(int bucket, const AugmentConfig& cfg);
double jitter_factor(int bucket, const AugmentConfig& cfg);

// Individual ops on images with values in [0, 1].
Image hflip(const Image& image);
// Rotation about the centre, bilinear sampling, edges clamped.
Image rotate(const Image& image, double degrees);
Image adjust_brightness(const Image& image, double factor);
Image adjust_saturation(const Image& image, double factor);

// Applies ops in the order hflip, rotation, brightness, saturation.
Image apply(const Image& image, const AugmentOps& ops, const AugmentConfig& cfg);

// Draws the ops from rng (four Bernoulli draws, then one magnitude draw per
// fired op).
AugmentOps draw_ops(Rng& rng, const AugmentConfig& cfg);

struct AugmentResult {
    Image image;
    AugmentationLabel label;
    AugmentOps ops;
};
AugmentResult augment(const Image& image, Rng& rng, const AugmentConfig& cfg = {});

struct AugmentedEmbedding {
    embedding::Embedding embedding;  // computed on the augmented image
    AugmentationLabel label;
    Image image;
};
AugmentedEmbedding augmented_embedding(const Image& image, Rng& rng, const embedding::Embedder& embedder,
                                       const AugmentConfig& cfg = {});

// ---------------------------------------------------------------------------
// Dataset manifest: a JSON-lines file. The first line is a header object
//   {"vcdm_manifest": 1, "embedding_cache": "...", "cache_complete": bool}
// and every further line is one image record
//   {"path": "...", "channels": 3, "height": 16, "width": 16,
//    "class": 2 | null, "split": "train" | "reference", "embedding_row": 0 | null}
// Relative paths resolve against the manifest's directory.

enum class Split { kTrain, kReference };
const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestRow {
    std::filesystem::path path;
    int channels = 3;
    int height = 0;
    int width = 0;
    std::optional<int> class_label;
    Split split = Split::kTrain;
    std::optional<long> embedding_row;
};

struct DatasetManifest {
    std::filesystem::path base_dir;
    std::filesystem::path embedding_cache;  // may be empty
    bool cache_complete = false;
    std::vector<ManifestRow> rows;

    // Throws ConfigError when the cache is marked complete but some row has
    // no (or a duplicated, or out-of-range) embedding row.
    void validate(long cache_rows = -1) const;

    std::filesystem::path resolve(const std::filesystem::path& p) const;
    std::vector<std::size_t> indices(Split split) const;
    int class_count() const;  // 1 + max label, 0 when unlabelled

    void save(const std::filesystem::path& path) const;
    static DatasetManifest load(const std::filesystem::path& path);
};

// Guard used by every augmentation entry point that reads manifest rows:
// evaluation reference rows must never be augmented.
void require_augmentable(const ManifestRow& row);

// Loads a manifest image and augments it. Throws InvalidArgument for a
// reference-split row.
AugmentResult augment_row(const DatasetManifest& manifest, std::size_t index, Rng& rng,
                          const AugmentConfig& cfg = {});

// Stream for data-loading worker work on (epoch, index).
Rng worker_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index);

}  // namespace vcdm::data_aug
