#include "vcdm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "vcdm/errors.hpp"

namespace vcdm::eval {

GaussianStats fit_gaussian(const Matrix& features, double shrinkage) {
    if (features.rows() < 2) throw InvalidArgument("fit_gaussian needs at least 2 rows");
    if (!(shrinkage >= 0.0 && shrinkage <= 1.0)) throw InvalidArgument("shrinkage must lie in [0, 1]");
    GaussianStats g;
    g.count = features.rows();
    g.mean = features.colwise().mean().transpose();
    const Matrix centered = features.rowwise() - g.mean.transpose();
    Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(features.rows() - 1);
    cov = 0.5 * (cov + cov.transpose()).eval();
    if (shrinkage > 0.0) {
        const double avg = cov.trace() / static_cast<double>(cov.rows());
        cov = (1.0 - shrinkage) * cov;
        cov.diagonal().array() += shrinkage * avg;
    }
    g.cov = std::move(cov);
    return g;
}

namespace {

Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eigen_psd(const Eigen::MatrixXd& m, const char* what) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.info() != Eigen::Success) throw NumericFailure(std::string("eigendecomposition did not converge: ") + what);
    const double top = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    if (es.eigenvalues().minCoeff() < -1e-8 * top)
        throw InvalidArgument(std::string(what) + " is not positive semidefinite");
    return es;
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    if (a.dim() != b.dim() || a.cov.rows() != a.dim() || b.cov.rows() != b.dim())
        throw InvalidArgument("frechet_distance: dimension mismatch (" + std::to_string(a.dim()) + " vs " +
                              std::to_string(b.dim()) + ")");
    const auto ea = eigen_psd(a.cov, "first covariance");
    const Vector root = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * root.asDiagonal() * ea.eigenvectors().transpose();
    Eigen::MatrixXd inner = sqrt_a * b.cov * sqrt_a;
    inner = 0.5 * (inner + inner.transpose()).eval();
    const auto ei = eigen_psd(inner, "covariance product");
    const double tr_sqrt = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double mean_term = (a.mean - b.mean).squaredNorm();
    return std::max(0.0, mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt);
}

const char* to_string(ExtractorBackend b) {
    switch (b) {
        case ExtractorBackend::kIdentity: return "identity";
        case ExtractorBackend::kProxyEmbedder: return "proxy";
        case ExtractorBackend::kInceptionExternal: return "inception_v3_external";
    }
    return "unknown";
}

ExtractorBackend extractor_from_string(const std::string& s) {
    if (s == "identity") return ExtractorBackend::kIdentity;
    if (s == "proxy" || s == "proxy_embedder") return ExtractorBackend::kProxyEmbedder;
    if (s == "inception" || s == "inception_v3_external") return ExtractorBackend::kInceptionExternal;
    throw ConfigError("unknown feature extractor '" + s + "'");
}

Matrix IdentityExtractor::extract(const Matrix& items) const {
    if (items.cols() != dim_) throw InvalidArgument("identity extractor: expected " + std::to_string(dim_) + " columns");
    return items;
}

ProxyExtractor::ProxyExtractor(nn::Shape item_shape, int dim, std::uint64_t seed)
    : shape_(std::move(item_shape)), embedder_(dim, seed, 4, shape_.size() == 3 ? shape_[0] : 1) {
    if (shape_.size() != 3) throw InvalidArgument("proxy extractor needs (C, H, W) items");
}

Matrix ProxyExtractor::extract(const Matrix& items) const {
    const int c = shape_[0], h = shape_[1], w = shape_[2];
    if (items.cols() != static_cast<Eigen::Index>(c) * h * w)
        throw InvalidArgument("proxy extractor: item size does not match the image shape");
    Matrix out(items.rows(), embedder_.dim());
    Image img(c, h, w);
    for (Eigen::Index i = 0; i < items.rows(); ++i) {
        for (Eigen::Index j = 0; j < items.cols(); ++j) img.pixels[static_cast<std::size_t>(j)] = 0.5 * (items(i, j) + 1.0);
        const auto e = embedder_.embed(img);
        for (int k = 0; k < embedder_.dim(); ++k) out(i, k) = e.values[static_cast<std::size_t>(k)];
    }
    return out;
}

std::unique_ptr<FeatureExtractor> make_extractor(ExtractorBackend backend, const nn::Shape& item_shape) {
    switch (backend) {
        case ExtractorBackend::kIdentity: {
            int dim = 1;
            for (int s : item_shape) dim *= s;
            return std::make_unique<IdentityExtractor>(dim);
        }
        case ExtractorBackend::kProxyEmbedder: return std::make_unique<ProxyExtractor>(item_shape);
        case ExtractorBackend::kInceptionExternal:
            throw BackendUnavailable(
                "Inception-v3 features are not bundled; use the proxy or identity extractor for desk-scale runs");
    }
    throw InvalidArgument("unknown extractor backend");
}

FidResult fid_protocol(const Generator& generator, const GaussianStats& reference, const FeatureExtractor& extractor,
                       const FidOptions& options) {
    const int k = extractor.output_dim();
    if (options.n < k + 1 && options.shrinkage <= 0.0)
        throw InvalidArgument("fid_protocol: n = " + std::to_string(options.n) + " < feature dim + 1 = " +
                              std::to_string(k + 1) + "; the covariance would be singular (enable shrinkage)");
    const Matrix generated = generator(options.n, options.seed);
    if (generated.rows() != options.n) throw InvalidArgument("generator returned the wrong number of samples");
    FidResult r;
    r.n = options.n;
    r.extractor = extractor.name();
    r.generated = fit_gaussian(extractor.extract(generated), options.shrinkage);
    r.reference = reference;
    r.score = frechet_distance(r.generated, r.reference);
    return r;
}

FidResult fid_protocol(const Generator& generator, const Matrix& reference_items, const FeatureExtractor& extractor,
                       const FidOptions& options) {
    return fid_protocol(generator, fit_gaussian(extractor.extract(reference_items), options.shrinkage), extractor,
                        options);
}

double split_half_baseline(const Matrix& reference_features, int n, Rng& rng, int repeats) {
    const auto rows = static_cast<std::size_t>(reference_features.rows());
    if (n < 2 || 2 * static_cast<std::size_t>(n) > rows)
        throw InvalidArgument("split_half_baseline needs 2 <= n and 2n <= reference rows");
    if (repeats < 1) throw InvalidArgument("split_half_baseline needs repeats >= 1");
    std::vector<std::size_t> order(rows);
    double total = 0.0;
    for (int r = 0; r < repeats; ++r) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = 0; i < 2 * static_cast<std::size_t>(n); ++i)
            std::swap(order[i], order[i + rng.below(rows - i)]);
        Matrix a(n, reference_features.cols()), b(n, reference_features.cols());
        for (int i = 0; i < n; ++i) {
            a.row(i) = reference_features.row(static_cast<Eigen::Index>(order[static_cast<std::size_t>(i)]));
            b.row(i) = reference_features.row(static_cast<Eigen::Index>(order[static_cast<std::size_t>(n + i)]));
        }
        total += frechet_distance(fit_gaussian(a), fit_gaussian(b));
    }
    return total / repeats;
}

std::vector<int> ToyDivergence::empty_modes() const {
    std::vector<int> out;
    for (std::size_t m = 0; m < counts.size(); ++m)
        if (counts[m] == 0) out.push_back(static_cast<int>(m));
    return out;
}

double ToyDivergence::coverage() const {
    const double n = static_cast<double>(std::accumulate(counts.begin(), counts.end(), 0L));
    if (n == 0.0) return 0.0;
    const double share = 1.0 / static_cast<double>(counts.size());
    double total = 0.0;
    for (long c : counts) total += std::min(static_cast<double>(c) / n, share);
    return total;
}

ToyDivergence toy_divergence(const Matrix& samples_2d, const Matrix& reference_2d, const toy::RingConfig& ring) {
    if (samples_2d.cols() != 2 || reference_2d.cols() != 2) throw InvalidArgument("toy_divergence expects 2-D points");
    ToyDivergence d;
    d.frechet = frechet_distance(fit_gaussian(samples_2d), fit_gaussian(reference_2d));
    d.counts.assign(static_cast<std::size_t>(ring.modes), 0);
    for (Eigen::Index i = 0; i < samples_2d.rows(); ++i)
        ++d.counts[static_cast<std::size_t>(toy::nearest_mode(ring, samples_2d(i, 0), samples_2d(i, 1)))];
    return d;
}

namespace {
constexpr const char* kMetricHeader = "plan_hash,method,step,n,extractor,score,seed";
}

void append_metric_row(const std::filesystem::path& csv, const MetricRow& row) {
    const bool fresh = !std::filesystem::exists(csv) || std::filesystem::file_size(csv) == 0;
    std::ofstream out(csv, std::ios::app);
    if (!out) throw IoError("cannot append to " + csv.string());
    if (fresh) out << kMetricHeader << '\n';
    out.precision(17);
    out << row.plan_hash << ',' << row.method << ',' << row.step << ',' << row.n << ',' << row.extractor << ','
        << row.score << ',' << row.seed << '\n';
}

std::vector<MetricRow> read_metric_rows(const std::filesystem::path& csv) {
    std::ifstream in(csv);
    if (!in) throw NotReady("metrics file not found: " + csv.string());
    std::string line;
    std::getline(in, line);
    if (line != kMetricHeader) throw ConfigError("unexpected metrics header in " + csv.string());
    std::vector<MetricRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string f[7];
        for (auto& field : f) std::getline(ss, field, ',');
        MetricRow r;
        r.plan_hash = f[0];
        r.method = f[1];
        r.step = std::stol(f[2]);
        r.n = std::stoi(f[3]);
        r.extractor = f[4];
        r.score = std::stod(f[5]);
        r.seed = std::stoull(f[6]);
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace vcdm::eval
