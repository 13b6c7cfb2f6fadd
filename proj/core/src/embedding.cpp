#include "vcdm/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include "vcdm/errors.hpp"

namespace vcdm::embedding {

const char* to_string(SourceTag tag) {
    switch (tag) {
        case SourceTag::kClipVitB32: return "clip_vit_b32";
        case SourceTag::kProxy: return "proxy";
        case SourceTag::kPcaK: return "pca_k";
        case SourceTag::kKMeansOneHot: return "kmeans_onehot";
        case SourceTag::kRawTensor: return "raw_tensor";
        case SourceTag::kToy: return "toy";
    }
    return "unknown";
}

ProxyEmbedder::ProxyEmbedder(int dim, std::uint64_t seed, int grid, int channels)
    : dim_(dim), grid_(grid), channels_(channels) {
    if (dim < 1 || grid < 1 || channels < 1) throw InvalidArgument("ProxyEmbedder: dimensions must be positive");
    const int features = grid * grid * channels * 2;
    Rng rng(seed);
    const int tall = std::max(dim, features), narrow = std::min(dim, features);
    Matrix gaussian(tall, narrow);
    for (Eigen::Index i = 0; i < gaussian.size(); ++i) gaussian.data()[i] = rng.normal();
    Eigen::HouseholderQR<Matrix> qr(gaussian);
    Matrix q = qr.householderQ() * Matrix::Identity(tall, narrow);
    // Orthonormal rows when dim <= features, orthonormal columns otherwise.
    projection_ = dim <= features ? Matrix(q.transpose()) : q;
}

Embedding ProxyEmbedder::embed(const Image& image) const {
    if (image.channels != channels_) {
        throw InvalidArgument("ProxyEmbedder: expected " + std::to_string(channels_) + " channels, got " +
                              std::to_string(image.channels));
    }
    if (image.height < grid_ || image.width < grid_) throw InvalidArgument("ProxyEmbedder: image smaller than grid");
    Vector features(grid_ * grid_ * channels_ * 2);
    int f = 0;
    for (int gy = 0; gy < grid_; ++gy) {
        const int y0 = gy * image.height / grid_, y1 = (gy + 1) * image.height / grid_;
        for (int gx = 0; gx < grid_; ++gx) {
            const int x0 = gx * image.width / grid_, x1 = (gx + 1) * image.width / grid_;
            const double count = static_cast<double>((y1 - y0) * (x1 - x0));
            for (int c = 0; c < channels_; ++c) {
                double mean = 0.0;
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) mean += image.at(c, y, x);
                mean /= count;
                double var = 0.0;
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) var += (image.at(c, y, x) - mean) * (image.at(c, y, x) - mean);
                features[f++] = mean;
                features[f++] = std::sqrt(var / count);
            }
        }
    }
    Vector out = projection_ * features;
    return Embedding{{out.data(), out.data() + out.size()}, SourceTag::kProxy};
}

std::unique_ptr<Embedder> make_embedder(const std::string& backend, int proxy_dim) {
    if (backend == "proxy") return std::make_unique<ProxyEmbedder>(proxy_dim);
    if (backend == "clip_vit_b32" || backend == "clip") return ClipEmbedder::from_environment();
    throw InvalidArgument("unknown embedder backend: " + backend);
}

// ---------------------------------------------------------------- PCA

PcaTransform pca_fit(const Matrix& data, int k) {
    const auto n = data.rows();
    const auto d = data.cols();
    if (n == 0) throw InvalidArgument("pca_fit: empty input");
    if (k < 1 || k > d) throw InvalidArgument("pca_fit: k must lie in [1, d]");
    if (k > n) throw InvalidArgument("pca_fit: need at least k rows");
    PcaTransform t;
    t.mean = data.colwise().mean().transpose();
    Matrix centered = data.rowwise() - t.mean.transpose();
    const double denom = static_cast<double>(std::max<Eigen::Index>(n - 1, 1));
    Matrix cov = (centered.transpose() * centered) / denom;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
    if (eig.info() != Eigen::Success) throw NumericFailure("pca_fit: eigendecomposition failed");
    t.components.resize(k, d);
    t.explained_variance.resize(k);
    for (int i = 0; i < k; ++i) {
        const Eigen::Index col = d - 1 - i;  // eigenvalues ascend
        Vector v = eig.eigenvectors().col(col);
        Eigen::Index arg;
        v.cwiseAbs().maxCoeff(&arg);
        if (v[arg] < 0) v = -v;
        t.components.row(i) = v.transpose();
        t.explained_variance[i] = std::max(0.0, eig.eigenvalues()[col]);
    }
    return t;
}

Matrix pca_apply(const PcaTransform& t, const Matrix& data) {
    if (data.cols() != t.input_dim()) throw InvalidArgument("pca_apply: dimension mismatch");
    return (data.rowwise() - t.mean.transpose()) * t.components.transpose();
}

Matrix pca_invert(const PcaTransform& t, const Matrix& codes) {
    if (codes.cols() != t.output_dim()) throw InvalidArgument("pca_invert: dimension mismatch");
    return (codes * t.components).rowwise() + t.mean.transpose();
}

Embedding pca_apply(const PcaTransform& t, const Embedding& y) {
    Matrix row = Eigen::Map<const Matrix>(y.values.data(), 1, y.dim());
    Matrix z = pca_apply(t, row);
    return Embedding{{z.data(), z.data() + z.size()}, SourceTag::kPcaK};
}

Embedding pca_invert(const PcaTransform& t, const Embedding& z) {
    Matrix row = Eigen::Map<const Matrix>(z.values.data(), 1, z.dim());
    Matrix y = pca_invert(t, row);
    return Embedding{{y.data(), y.data() + y.size()}, SourceTag::kPcaK};
}

double pca_reconstruction_error(const PcaTransform& t, const Matrix& data) {
    Matrix recon = pca_invert(t, pca_apply(t, data));
    return (data - recon).squaredNorm() / static_cast<double>(data.rows());
}

void PcaTransform::save(Checkpoint& ckpt, const std::string& prefix) const {
    ckpt.put(prefix + ".mean", {static_cast<int>(mean.size())}, {mean.data(), mean.data() + mean.size()});
    ckpt.put(prefix + ".components", {static_cast<int>(components.rows()), static_cast<int>(components.cols())},
             {components.data(), components.data() + components.size()});
    ckpt.put(prefix + ".explained_variance", explained_variance);
}

PcaTransform PcaTransform::load(const Checkpoint& ckpt, const std::string& prefix) {
    PcaTransform t;
    const auto& mean = ckpt.get(prefix + ".mean");
    const auto& comp = ckpt.get(prefix + ".components");
    t.mean = Eigen::Map<const Vector>(mean.values.data(), static_cast<Eigen::Index>(mean.values.size()));
    t.components = Eigen::Map<const Matrix>(comp.values.data(), comp.shape.at(0), comp.shape.at(1));
    t.explained_variance = ckpt.get(prefix + ".explained_variance").values;
    return t;
}

// ---------------------------------------------------------------- K-means

namespace {

std::size_t count_distinct_rows(const Matrix& data, std::size_t stop_after) {
    std::set<std::vector<double>> seen;
    for (Eigen::Index i = 0; i < data.rows(); ++i) {
        seen.emplace(data.row(i).data(), data.row(i).data() + data.cols());
        if (seen.size() >= stop_after) break;
    }
    return seen.size();
}

int nearest(const Matrix& centroids, const double* y, Eigen::Index dim, double* best_dist = nullptr) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
        double d = 0.0;
        for (Eigen::Index j = 0; j < dim; ++j) {
            const double diff = y[j] - centroids(c, j);
            d += diff * diff;
        }
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(c);
        }
    }
    if (best_dist) *best_dist = best_d;
    return best;
}

}  // namespace

KMeansCodebook kmeans_fit(const Matrix& data, int k, Rng& rng, KMeansOptions options, KMeansTrace* trace) {
    const auto n = data.rows();
    const auto d = data.cols();
    if (k < 1) throw InvalidArgument("kmeans_fit: K must be >= 1");
    if (n == 0) throw InvalidArgument("kmeans_fit: empty dataset");
    if (count_distinct_rows(data, static_cast<std::size_t>(k)) < static_cast<std::size_t>(k)) {
        throw DegenerateCodebook("kmeans_fit: K=" + std::to_string(k) + " exceeds the number of distinct points");
    }

    // k-means++ seeding.
    Matrix centroids(k, d);
    centroids.row(0) = data.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))));
    std::vector<double> dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    for (int c = 1; c < k; ++c) {
        double total = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            dist[i] = std::min(dist[i], (data.row(i) - centroids.row(c - 1)).squaredNorm());
            total += dist[i];
        }
        double target = rng.uniform() * total;
        Eigen::Index pick = n - 1;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (dist[i] <= 0.0) continue;
            target -= dist[i];
            if (target <= 0.0) {
                pick = i;
                break;
            }
        }
        // Guard against round-off landing on an already chosen point.
        while (dist[pick] <= 0.0 && pick > 0) --pick;
        centroids.row(c) = data.row(pick);
    }

    std::vector<int> assign(static_cast<std::size_t>(n), 0);
    std::vector<double> own_dist(static_cast<std::size_t>(n), 0.0);
    for (int iter = 0; iter < options.max_iterations; ++iter) {
        double objective = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            assign[i] = nearest(centroids, data.row(i).data(), d, &own_dist[i]);
            objective += own_dist[i];
        }
        if (trace) trace->objective.push_back(objective);

        Matrix updated = Matrix::Zero(k, d);
        std::vector<int> counts(k, 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            updated.row(assign[i]) += data.row(i);
            ++counts[assign[i]];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                updated.row(c) /= counts[c];
                continue;
            }
            // Empty cluster: take over the point farthest from its centroid.
            const auto far = std::max_element(own_dist.begin(), own_dist.end()) - own_dist.begin();
            updated.row(c) = data.row(far);
            own_dist[far] = 0.0;
        }
        const double shift = (updated - centroids).rowwise().norm().maxCoeff();
        centroids = std::move(updated);
        if (shift < options.tolerance) break;
    }
    return KMeansCodebook{std::move(centroids)};
}

int kmeans_assign(const KMeansCodebook& cb, std::span<const double> y) {
    if (static_cast<Eigen::Index>(y.size()) != cb.centroids.cols()) {
        throw InvalidArgument("kmeans_assign: dimension mismatch");
    }
    return nearest(cb.centroids, y.data(), cb.centroids.cols());
}

Embedding kmeans_embed(const KMeansCodebook& cb, int id, ClusterEmbedMode mode) {
    if (id < 0 || id >= cb.size()) throw InvalidArgument("kmeans_embed: cluster id out of range");
    if (mode == ClusterEmbedMode::kOneHot) {
        std::vector<double> v(static_cast<std::size_t>(cb.size()), 0.0);
        v[id] = 1.0;
        return Embedding{std::move(v), SourceTag::kKMeansOneHot};
    }
    const auto row = cb.centroids.row(id);
    return Embedding{{row.data(), row.data() + row.size()}, SourceTag::kKMeansOneHot};
}

std::vector<double> empirical_cluster_distribution(const KMeansCodebook& cb, const Matrix& data) {
    if (data.rows() == 0) throw InvalidArgument("empirical_cluster_distribution: empty dataset");
    std::vector<double> p(static_cast<std::size_t>(cb.size()), 0.0);
    for (Eigen::Index i = 0; i < data.rows(); ++i) {
        p[kmeans_assign(cb, {data.row(i).data(), static_cast<std::size_t>(data.cols())})] += 1.0;
    }
    for (double& v : p) v /= static_cast<double>(data.rows());
    return p;
}

void KMeansCodebook::save(Checkpoint& ckpt, const std::string& prefix) const {
    ckpt.put(prefix + ".centroids", {static_cast<int>(centroids.rows()), static_cast<int>(centroids.cols())},
             {centroids.data(), centroids.data() + centroids.size()});
}

KMeansCodebook KMeansCodebook::load(const Checkpoint& ckpt, const std::string& prefix) {
    const auto& t = ckpt.get(prefix + ".centroids");
    return KMeansCodebook{Eigen::Map<const Matrix>(t.values.data(), t.shape.at(0), t.shape.at(1))};
}

// ---------------------------------------------------------------- cache

namespace {

constexpr char kCacheMagic[8] = {'V', 'C', 'D', 'M', 'E', 'M', 'B', 'D'};
constexpr std::uint32_t kCacheVersion = 1;

CacheHeader parse_header(std::istream& in, const std::filesystem::path& path) {
    char magic[8];
    CacheHeader h;
    std::uint32_t tag = 0, reserved = 0;
    in.read(magic, 8);
    in.read(reinterpret_cast<char*>(&h.version), 4);
    in.read(reinterpret_cast<char*>(&tag), 4);
    in.read(reinterpret_cast<char*>(&h.count), 8);
    in.read(reinterpret_cast<char*>(&h.dim), 4);
    in.read(reinterpret_cast<char*>(&reserved), 4);
    if (!in || std::memcmp(magic, kCacheMagic, 8) != 0) throw CacheCorrupt("bad cache header: " + path.string());
    if (h.version != kCacheVersion) throw CacheCorrupt("unsupported cache version in " + path.string());
    if (tag > static_cast<std::uint32_t>(SourceTag::kToy)) throw CacheCorrupt("unknown source tag in " + path.string());
    h.source = static_cast<SourceTag>(tag);
    return h;
}

}  // namespace

void write_cache(const std::filesystem::path& path, SourceTag source, const Matrix& rows) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write cache " + path.string());
    const std::uint32_t tag = static_cast<std::uint32_t>(source), reserved = 0;
    const std::uint64_t count = static_cast<std::uint64_t>(rows.rows());
    const std::uint32_t dim = static_cast<std::uint32_t>(rows.cols());
    out.write(kCacheMagic, 8);
    out.write(reinterpret_cast<const char*>(&kCacheVersion), 4);
    out.write(reinterpret_cast<const char*>(&tag), 4);
    out.write(reinterpret_cast<const char*>(&count), 8);
    out.write(reinterpret_cast<const char*>(&dim), 4);
    out.write(reinterpret_cast<const char*>(&reserved), 4);
    std::vector<float> buffer(static_cast<std::size_t>(rows.size()));
    for (Eigen::Index i = 0; i < rows.size(); ++i) buffer[i] = static_cast<float>(rows.data()[i]);
    out.write(reinterpret_cast<const char*>(buffer.data()), static_cast<std::streamsize>(buffer.size() * sizeof(float)));
    if (!out) throw IoError("failed writing cache " + path.string());
}

CacheHeader read_cache_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open cache " + path.string());
    return parse_header(in, path);
}

Matrix read_cache(const std::filesystem::path& path, CacheHeader* header) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open cache " + path.string());
    const CacheHeader h = parse_header(in, path);
    const std::size_t n = static_cast<std::size_t>(h.count) * h.dim;
    const auto body_start = in.tellg();
    in.seekg(0, std::ios::end);
    const auto body_bytes = static_cast<std::uint64_t>(in.tellg() - body_start);
    if (body_bytes != n * sizeof(float)) throw CacheCorrupt("cache body size does not match header: " + path.string());
    in.seekg(body_start);
    std::vector<float> buffer(n);
    in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw CacheCorrupt("truncated cache body: " + path.string());
    Matrix out(static_cast<Eigen::Index>(h.count), static_cast<Eigen::Index>(h.dim));
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = buffer[i];
    if (header) *header = h;
    return out;
}

Matrix stack(std::span<const Embedding> embeddings) {
    if (embeddings.empty()) return Matrix(0, 0);
    const int d = embeddings.front().dim();
    Matrix out(static_cast<Eigen::Index>(embeddings.size()), d);
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        if (embeddings[i].dim() != d) throw InvalidArgument("stack: embeddings differ in dimension");
        for (int j = 0; j < d; ++j) out(static_cast<Eigen::Index>(i), j) = embeddings[i].values[j];
    }
    return out;
}

}  // namespace vcdm::embedding
