#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vcdm/embedding.hpp"
#include "vcdm/nn/tensor.hpp"
#include "vcdm/random.hpp"
#include "vcdm/toy.hpp"
#include "vcdm/types.hpp"

namespace vcdm::eval {

struct GaussianStats {
    Vector mean;
    Eigen::MatrixXd cov;
    long count = 0;

    int dim() const { return static_cast<int>(mean.size()); }
};

// Sample mean and unbiased covariance of the rows. The covariance is
// symmetrised exactly. With shrinkage > 0 the covariance becomes
// (1 - shrinkage) * S + shrinkage * (tr(S) / k) * I.
GaussianStats fit_gaussian(const Matrix& features, double shrinkage = 0.0);

// ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}).
// The trace of the square root is taken from the eigenvalues of the
// symmetric matrix S1^{1/2} S2 S1^{1/2}, with negative eigenvalues (down to
// -1e-8 relative) clipped to zero.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

enum class ExtractorBackend { kIdentity, kProxyEmbedder, kInceptionExternal };
const char* to_string(ExtractorBackend b);
ExtractorBackend extractor_from_string(const std::string& s);

class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual ExtractorBackend backend() const = 0;
    virtual int output_dim() const = 0;
    // items: one sample per row, in model space.
    virtual Matrix extract(const Matrix& items) const = 0;
    std::string name() const { return to_string(backend()); }
};

class IdentityExtractor final : public FeatureExtractor {
public:
    explicit IdentityExtractor(int dim) : dim_(dim) {}
    ExtractorBackend backend() const override { return ExtractorBackend::kIdentity; }
    int output_dim() const override { return dim_; }
    Matrix extract(const Matrix& items) const override;

private:
    int dim_;
};

// Rows are (C, H, W) images in [-1, 1]; they are mapped to [0, 1] and run
// through the proxy embedder.
class ProxyExtractor final : public FeatureExtractor {
public:
    ProxyExtractor(nn::Shape item_shape, int dim = 64, std::uint64_t seed = 0x5eed);
    ExtractorBackend backend() const override { return ExtractorBackend::kProxyEmbedder; }
    int output_dim() const override { return embedder_.dim(); }
    Matrix extract(const Matrix& items) const override;

private:
    nn::Shape shape_;
    embedding::ProxyEmbedder embedder_;
};

// item_shape: {dim} for vectors, {C, H, W} for images. The Inception backend
// is not bundled and always throws BackendUnavailable.
std::unique_ptr<FeatureExtractor> make_extractor(ExtractorBackend backend, const nn::Shape& item_shape);

// Produces n generated samples (rows) for a given seed.
using Generator = std::function<Matrix(int n, std::uint64_t seed)>;

struct FidOptions {
    int n = 5000;
    std::uint64_t seed = 0;
    // Covariance shrinkage; required when n < feature_dim + 1.
    double shrinkage = 0.0;
};

struct FidResult {
    double score = 0.0;
    int n = 0;
    std::string extractor;
    GaussianStats generated;
    GaussianStats reference;
};

// Fréchet distance between the generator's features and the reference
// features. Throws InvalidArgument when n < k + 1 and shrinkage is off.
FidResult fid_protocol(const Generator& generator, const Matrix& reference_items, const FeatureExtractor& extractor,
                       const FidOptions& options);
// Same, with reference statistics already computed (cached features).
FidResult fid_protocol(const Generator& generator, const GaussianStats& reference, const FeatureExtractor& extractor,
                       const FidOptions& options);

// Same-distribution floor at sample size n: mean over `repeats` of the
// distance between two disjoint random subsets of n rows each.
double split_half_baseline(const Matrix& reference_features, int n, Rng& rng, int repeats = 3);

struct ToyDivergence {
    double frechet = 0.0;        // on raw coordinates
    std::vector<long> counts;    // samples per nearest mode
    std::vector<int> empty_modes() const;
    // Overlap of the mode histogram with equal mode weights:
    // sum_m min(counts_m / n, 1 / modes). 1 means perfectly balanced.
    double coverage() const;
};
ToyDivergence toy_divergence(const Matrix& samples_2d, const Matrix& reference_2d, const toy::RingConfig& ring);

// Tidy metrics table: plan_hash,method,step,n,extractor,score,seed
struct MetricRow {
    std::string plan_hash;
    std::string method;
    long step = 0;
    int n = 0;
    std::string extractor;
    double score = 0.0;
    std::uint64_t seed = 0;
};
// Appends a row, writing the header first when the file is new or empty.
void append_metric_row(const std::filesystem::path& csv, const MetricRow& row);
std::vector<MetricRow> read_metric_rows(const std::filesystem::path& csv);

}  // namespace vcdm::eval
