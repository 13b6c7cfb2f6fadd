#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "config.hpp"
#include "vcdm/data_aug.hpp"
#include "vcdm/embedding.hpp"
#include "vcdm/image.hpp"
#include "vcdm/nn/tensor.hpp"
#include "vcdm/toy.hpp"
#include "vcdm/types.hpp"

namespace vcdm::cli {

// Artifact layout under out_dir.
struct Paths {
    std::filesystem::path root;
    std::filesystem::path cache() const { return root / "cache"; }
    std::filesystem::path checkpoints() const { return root / "checkpoints"; }
    std::filesystem::path logs() const { return root / "logs"; }
    std::filesystem::path samples() const { return root / "samples"; }
    std::filesystem::path metrics() const { return root / "metrics"; }
};

// Hash of the keys that determine the data and its embeddings.
std::string data_hash(const ExperimentConfig& cfg);
// Embedding cache and the manifest copy that points at it.
std::filesystem::path embedding_cache_path(const ExperimentConfig& cfg, const Paths& paths);
std::filesystem::path cached_manifest_path(const ExperimentConfig& cfg, const Paths& paths);

toy::RingConfig ring_config(const ExperimentConfig& cfg);

// Training and reference data in model space: ring points as they are,
// images as (C, H, W) rows scaled to [-1, 1].
struct Dataset {
    bool is_ring = false;
    toy::RingConfig ring{};
    nn::Shape item_shape;
    Matrix x_train;
    Matrix y_train;                 // raw embeddings, empty if not loaded
    std::vector<int> classes_train; // empty when unlabelled
    int class_count = 0;
    Matrix x_reference;
    std::vector<Image> train_images;  // manifest datasets, for augmentation
};

// With need_embeddings, a manifest dataset requires a complete cache and
// throws NotReady otherwise.
Dataset load_dataset(const ExperimentConfig& cfg, const Paths& paths, bool need_embeddings);

std::unique_ptr<embedding::Embedder> make_config_embedder(const ExperimentConfig& cfg);

// [0, 1] pixels <-> [-1, 1] model rows.
std::vector<double> to_model_space(const Image& image);
Image from_model_space(const double* row, const nn::Shape& shape);

}  // namespace vcdm::cli
