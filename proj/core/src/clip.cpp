#include <cmath>
#include <cstdlib>

#include "vcdm/embedding.hpp"
#include "vcdm/errors.hpp"

namespace vcdm::embedding {

namespace {

constexpr double kClipMean[3] = {0.48145466, 0.4578275, 0.40821073};
constexpr double kClipStd[3] = {0.26862954, 0.26130258, 0.27577711};
constexpr double kLnEps = 1e-5;

const std::string kPrefix = "visual.";

Eigen::Map<const Matrix> as_matrix(const Checkpoint::Tensor& t, Eigen::Index rows, Eigen::Index cols,
                                   const std::string& name) {
    if (static_cast<Eigen::Index>(t.values.size()) != rows * cols) {
        throw BackendUnavailable("CLIP weights: tensor " + name + " has an unexpected size");
    }
    return Eigen::Map<const Matrix>(t.values.data(), rows, cols);
}

Eigen::Map<const Vector> as_vector(const Checkpoint::Tensor& t, Eigen::Index n, const std::string& name) {
    if (static_cast<Eigen::Index>(t.values.size()) != n) {
        throw BackendUnavailable("CLIP weights: tensor " + name + " has an unexpected size");
    }
    return Eigen::Map<const Vector>(t.values.data(), n);
}

void layer_norm_rows(Matrix& x, const Vector& gamma, const Vector& beta) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().mean();
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        x.row(r) = (((x.row(r).array() - mean) * inv).matrix().cwiseProduct(gamma.transpose()) + beta.transpose());
    }
}

// Shortest side to kResolution, then centre crop.
Image preprocess(const Image& image, int res) {
    const double scale = static_cast<double>(res) / std::min(image.height, image.width);
    const int h = std::max(res, static_cast<int>(std::lround(image.height * scale)));
    const int w = std::max(res, static_cast<int>(std::lround(image.width * scale)));
    Image resized = resize_bilinear(image, h, w);
    const int top = (h - res) / 2, left = (w - res) / 2;
    Image out(3, res, res);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x)
                out.at(c, y, x) = (resized.at(c, top + y, left + x) - kClipMean[c]) / kClipStd[c];
    return out;
}

}  // namespace

ClipEmbedder::ClipEmbedder(Checkpoint weights) : weights_(std::move(weights)) {
    const auto require = [&](const std::string& name) -> const Checkpoint::Tensor& {
        if (!weights_.has(name)) throw BackendUnavailable("CLIP weights missing tensor " + name);
        return weights_.get(name);
    };
    const auto& conv = require(kPrefix + "conv1.weight");
    if (conv.shape.size() != 4 || conv.shape[1] != 3 || conv.shape[2] != kPatch || conv.shape[3] != kPatch) {
        throw BackendUnavailable("CLIP weights: conv1 is not a ViT-B/32 patch embedding");
    }
    width_ = conv.shape[0];
    const auto& proj = require(kPrefix + "proj");
    output_dim_ = proj.shape.at(1);
    layers_ = 0;
    while (weights_.has(kPrefix + "transformer.resblocks." + std::to_string(layers_) + ".ln_1.weight")) ++layers_;
    if (layers_ == 0) throw BackendUnavailable("CLIP weights contain no transformer blocks");
    // CLIP uses 64-wide attention heads.
    if (width_ < 64 || width_ % 64 != 0)
        throw BackendUnavailable("CLIP weights: width " + std::to_string(width_) + " is not a multiple of 64");
    heads_ = width_ / 64;
}

std::unique_ptr<ClipEmbedder> ClipEmbedder::load(const std::filesystem::path& weights) {
    if (!std::filesystem::exists(weights)) {
        throw BackendUnavailable("CLIP ViT-B/32 weights not found at " + weights.string() +
                                 "; use the proxy embedder backend instead");
    }
    try {
        return std::make_unique<ClipEmbedder>(Checkpoint::load(weights));
    } catch (const BackendUnavailable&) {
        throw;
    } catch (const Error& e) {
        throw BackendUnavailable(std::string("cannot read CLIP weights (") + e.what() +
                                 "); use the proxy embedder backend instead");
    }
}

std::unique_ptr<ClipEmbedder> ClipEmbedder::from_environment() {
    const char* path = std::getenv("VCDM_CLIP_WEIGHTS");
    if (!path || !*path) {
        throw BackendUnavailable(
            "CLIP ViT-B/32 weights unavailable: set VCDM_CLIP_WEIGHTS to an exported weight file, "
            "or use the proxy embedder backend");
    }
    return load(path);
}

Embedding ClipEmbedder::embed(const Image& image) const {
    if (image.channels != 3) throw InvalidArgument("ClipEmbedder: expected an RGB image");
    const Image pixels = preprocess(image, kResolution);
    const int grid = kResolution / kPatch;
    const int tokens = grid * grid + 1;
    const int patch_len = 3 * kPatch * kPatch;
    const auto get = [&](const std::string& n) -> const Checkpoint::Tensor& { return weights_.get(kPrefix + n); };

    // Patch embedding as a matmul over flattened (c, y, x) patches.
    Matrix patches(grid * grid, patch_len);
    for (int py = 0; py < grid; ++py)
        for (int px = 0; px < grid; ++px) {
            int k = 0;
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < kPatch; ++y)
                    for (int x = 0; x < kPatch; ++x) patches(py * grid + px, k++) = pixels.at(c, py * kPatch + y, px * kPatch + x);
        }
    const auto conv = as_matrix(get("conv1.weight"), width_, patch_len, "conv1.weight");
    Matrix x(tokens, width_);
    x.row(0) = as_vector(get("class_embedding"), width_, "class_embedding").transpose();
    x.bottomRows(grid * grid) = patches * conv.transpose();
    x += as_matrix(get("positional_embedding"), tokens, width_, "positional_embedding");
    layer_norm_rows(x, as_vector(get("ln_pre.weight"), width_, "ln_pre"), as_vector(get("ln_pre.bias"), width_, "ln_pre"));

    const int head_dim = width_ / heads_;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (int l = 0; l < layers_; ++l) {
        const std::string b = "transformer.resblocks." + std::to_string(l) + ".";
        Matrix h = x;
        layer_norm_rows(h, as_vector(get(b + "ln_1.weight"), width_, b), as_vector(get(b + "ln_1.bias"), width_, b));
        const auto w_in = as_matrix(get(b + "attn.in_proj_weight"), 3 * width_, width_, b);
        const auto b_in = as_vector(get(b + "attn.in_proj_bias"), 3 * width_, b);
        Matrix qkv = (h * w_in.transpose()).rowwise() + b_in.transpose();
        Matrix attended(tokens, width_);
        for (int hd = 0; hd < heads_; ++hd) {
            const auto q = qkv.middleCols(hd * head_dim, head_dim);
            const auto k = qkv.middleCols(width_ + hd * head_dim, head_dim);
            const auto v = qkv.middleCols(2 * width_ + hd * head_dim, head_dim);
            Matrix scores = (q * k.transpose()) * inv_sqrt;
            for (Eigen::Index r = 0; r < scores.rows(); ++r) {
                const double m = scores.row(r).maxCoeff();
                scores.row(r) = (scores.row(r).array() - m).exp().matrix();
                scores.row(r) /= scores.row(r).sum();
            }
            attended.middleCols(hd * head_dim, head_dim) = scores * v;
        }
        const auto w_out = as_matrix(get(b + "attn.out_proj.weight"), width_, width_, b);
        const auto b_out = as_vector(get(b + "attn.out_proj.bias"), width_, b);
        x += (attended * w_out.transpose()).rowwise() + b_out.transpose();

        h = x;
        layer_norm_rows(h, as_vector(get(b + "ln_2.weight"), width_, b), as_vector(get(b + "ln_2.bias"), width_, b));
        const auto w_fc = as_matrix(get(b + "mlp.c_fc.weight"), 4 * width_, width_, b);
        const auto b_fc = as_vector(get(b + "mlp.c_fc.bias"), 4 * width_, b);
        Matrix mid = (h * w_fc.transpose()).rowwise() + b_fc.transpose();
        mid = mid.array() * (1.0 / (1.0 + (-1.702 * mid.array()).exp()));  // QuickGELU
        const auto w_proj = as_matrix(get(b + "mlp.c_proj.weight"), width_, 4 * width_, b);
        const auto b_proj = as_vector(get(b + "mlp.c_proj.bias"), width_, b);
        x += (mid * w_proj.transpose()).rowwise() + b_proj.transpose();
    }

    Matrix cls = x.topRows(1);
    layer_norm_rows(cls, as_vector(get("ln_post.weight"), width_, "ln_post"), as_vector(get("ln_post.bias"), width_, "ln_post"));
    Matrix out = cls * as_matrix(get("proj"), width_, output_dim_, "proj");
    return Embedding{{out.data(), out.data() + out.size()}, SourceTag::kClipVitB32};
}

}  // namespace vcdm::embedding
