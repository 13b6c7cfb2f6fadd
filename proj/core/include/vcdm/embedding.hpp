#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vcdm/checkpoint.hpp"
#include "vcdm/image.hpp"
#include "vcdm/random.hpp"
#include "vcdm/types.hpp"

// Semantic embeddings y = e(x): embedder backends, PCA compression, K-means
// discretisation and the on-disk embedding cache.
namespace vcdm::embedding {

enum class SourceTag : std::uint32_t {
    kClipVitB32 = 0,
    kProxy = 1,
    kPcaK = 2,
    kKMeansOneHot = 3,
    kRawTensor = 4,
    kToy = 5,
};

const char* to_string(SourceTag tag);

struct Embedding {
    std::vector<double> values;
    SourceTag source = SourceTag::kProxy;

    int dim() const { return static_cast<int>(values.size()); }
};

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual int dim() const = 0;
    virtual SourceTag tag() const = 0;
    virtual std::string name() const = 0;
    virtual Embedding embed(const Image& image) const = 0;
};

// Offline stand-in for CLIP: per-cell channel means and standard deviations
// over a grid x grid partition of the image, mapped through a fixed-seed
// random orthogonal projection. No training; deterministic in the pixels.
class ProxyEmbedder final : public Embedder {
public:
    explicit ProxyEmbedder(int dim = 64, std::uint64_t seed = 0x5eed, int grid = 4, int channels = 3);

    int dim() const override { return dim_; }
    SourceTag tag() const override { return SourceTag::kProxy; }
    std::string name() const override { return "proxy"; }
    Embedding embed(const Image& image) const override;

    const Matrix& projection() const { return projection_; }

private:
    int dim_;
    int grid_;
    int channels_;
    Matrix projection_;  // dim x features
};

// ViT-B/32 image tower. Weights come from a checkpoint container with the
// original state-dict names (see tools/export_clip_weights.py).
class ClipEmbedder final : public Embedder {
public:
    // Throws BackendUnavailable when the weights cannot be loaded.
    static std::unique_ptr<ClipEmbedder> load(const std::filesystem::path& weights);
    // Reads VCDM_CLIP_WEIGHTS.
    static std::unique_ptr<ClipEmbedder> from_environment();

    explicit ClipEmbedder(Checkpoint weights);

    int dim() const override { return output_dim_; }
    SourceTag tag() const override { return SourceTag::kClipVitB32; }
    std::string name() const override { return "clip_vit_b32"; }
    Embedding embed(const Image& image) const override;

    static constexpr int kResolution = 224;
    static constexpr int kPatch = 32;

private:
    Checkpoint weights_;
    int width_ = 768;
    int layers_ = 12;
    int heads_ = 12;
    int output_dim_ = 512;
};

// backend: "proxy" or "clip_vit_b32".
std::unique_ptr<Embedder> make_embedder(const std::string& backend, int proxy_dim = 64);

struct PcaTransform {
    Vector mean;                              // d
    Matrix components;                        // k x d, orthonormal rows
    std::vector<double> explained_variance;   // k, descending

    int input_dim() const { return static_cast<int>(mean.size()); }
    int output_dim() const { return static_cast<int>(components.rows()); }

    void save(Checkpoint& ckpt, const std::string& prefix) const;
    static PcaTransform load(const Checkpoint& ckpt, const std::string& prefix);
};

// rows of data are embeddings.
PcaTransform pca_fit(const Matrix& data, int k);
Embedding pca_apply(const PcaTransform& t, const Embedding& y);
Embedding pca_invert(const PcaTransform& t, const Embedding& z);
Matrix pca_apply(const PcaTransform& t, const Matrix& data);
Matrix pca_invert(const PcaTransform& t, const Matrix& codes);
// Mean squared reconstruction error per row.
double pca_reconstruction_error(const PcaTransform& t, const Matrix& data);

enum class ClusterEmbedMode { kOneHot, kCentroid };

struct KMeansCodebook {
    Matrix centroids;  // K x d

    int size() const { return static_cast<int>(centroids.rows()); }
    void save(Checkpoint& ckpt, const std::string& prefix) const;
    static KMeansCodebook load(const Checkpoint& ckpt, const std::string& prefix);
};

struct KMeansOptions {
    int max_iterations = 300;
    double tolerance = 1e-6;
};

struct KMeansTrace {
    std::vector<double> objective;  // within-cluster sum of squares per Lloyd iteration
};

// Lloyd's algorithm with k-means++ seeding.
KMeansCodebook kmeans_fit(const Matrix& data, int k, Rng& rng, KMeansOptions options = {},
                          KMeansTrace* trace = nullptr);
// Nearest centroid; ties go to the lowest index.
int kmeans_assign(const KMeansCodebook& cb, std::span<const double> y);
Embedding kmeans_embed(const KMeansCodebook& cb, int id, ClusterEmbedMode mode = ClusterEmbedMode::kOneHot);
// Normalised assignment counts of data rows.
std::vector<double> empirical_cluster_distribution(const KMeansCodebook& cb, const Matrix& data);

// Flat embedding cache: 32-byte header (magic "VCDMEMBD", u32 version,
// u32 source tag, u64 count, u32 dim, u32 reserved) then count x dim
// row-major float32.
struct CacheHeader {
    std::uint32_t version = 1;
    SourceTag source = SourceTag::kProxy;
    std::uint64_t count = 0;
    std::uint32_t dim = 0;
};

void write_cache(const std::filesystem::path& path, SourceTag source, const Matrix& rows);
// Throws CacheCorrupt on a bad header or truncated body.
Matrix read_cache(const std::filesystem::path& path, CacheHeader* header = nullptr);
CacheHeader read_cache_header(const std::filesystem::path& path);

Matrix stack(std::span<const Embedding> embeddings);

}  // namespace vcdm::embedding
