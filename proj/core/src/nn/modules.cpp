#include "vcdm/nn/modules.hpp"

#include <cmath>

#include "vcdm/errors.hpp"

namespace vcdm::nn {

Var ParameterSet::add(const std::string& name, Shape shape, std::vector<double> values) {
    if (find(name) >= 0) throw InvalidArgument("duplicate parameter name: " + name);
    Var v = Var::parameter(std::move(shape), std::move(values));
    entries_.emplace_back(name, v);
    return v;
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : entries_) n += v.numel();
    return n;
}

long ParameterSet::find(const std::string& name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
        if (entries_[i].first == name) return static_cast<long>(i);
    return -1;
}

void ParameterSet::zero_grad() {
    for (auto& [name, v] : entries_) v.zero_grad();
}

std::vector<std::vector<double>> ParameterSet::values() const {
    std::vector<std::vector<double>> out;
    out.reserve(entries_.size());
    for (const auto& [name, v] : entries_) out.emplace_back(v.value().begin(), v.value().end());
    return out;
}

void ParameterSet::assign(const std::vector<std::vector<double>>& values) {
    if (values.size() != entries_.size()) {
        throw IncompatibleCheckpoint("parameter count mismatch: expected " + std::to_string(entries_.size()) +
                                     " tensors, got " + std::to_string(values.size()));
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        auto dst = entries_[i].second.mutable_value();
        if (values[i].size() != dst.size()) {
            throw IncompatibleCheckpoint("size mismatch for parameter " + entries_[i].first);
        }
        std::copy(values[i].begin(), values[i].end(), dst.begin());
    }
}

namespace {

std::vector<double> uniform_init(std::size_t n, double bound, Rng& rng) {
    std::vector<double> v(n);
    for (double& x : v) x = bound * (2.0 * rng.uniform() - 1.0);
    return v;
}

}  // namespace

Linear::Linear(ParameterSet& params, const std::string& name, int in_features, int out_features, Rng& rng, Init init,
               bool with_bias)
    : in(in_features), out(out_features) {
    const std::size_t n = static_cast<std::size_t>(in) * out;
    const double bound = in > 0 ? 1.0 / std::sqrt(static_cast<double>(in)) : 0.0;
    std::vector<double> w = init == Init::kZero ? std::vector<double>(n, 0.0) : uniform_init(n, bound, rng);
    weight = params.add(name + ".weight", {in, out}, std::move(w));
    if (with_bias) {
        std::vector<double> b = init == Init::kZero ? std::vector<double>(out, 0.0) : uniform_init(out, bound, rng);
        bias = params.add(name + ".bias", {out}, std::move(b));
    }
}

LayerNorm::LayerNorm(ParameterSet& params, const std::string& name, int width) {
    gamma = params.add(name + ".gamma", {width}, std::vector<double>(width, 1.0));
    beta = params.add(name + ".beta", {width}, std::vector<double>(width, 0.0));
}

GroupNorm::GroupNorm(ParameterSet& params, const std::string& name, int channels, int max_groups) {
    groups = 1;
    for (int g = std::min(max_groups, channels); g >= 1; --g) {
        if (channels % g == 0) {
            groups = g;
            break;
        }
    }
    gamma = params.add(name + ".gamma", {channels}, std::vector<double>(channels, 1.0));
    beta = params.add(name + ".beta", {channels}, std::vector<double>(channels, 0.0));
}

Conv2d::Conv2d(ParameterSet& params, const std::string& name, int in, int out, int k, Rng& rng, Init init)
    : kernel(k) {
    const std::size_t n = static_cast<std::size_t>(out) * in * k * k;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
    std::vector<double> w = init == Init::kZero ? std::vector<double>(n, 0.0) : uniform_init(n, bound, rng);
    std::vector<double> b = init == Init::kZero ? std::vector<double>(out, 0.0) : uniform_init(out, bound, rng);
    weight = params.add(name + ".weight", {out, in, k, k}, std::move(w));
    bias = params.add(name + ".bias", {out}, std::move(b));
}

EmbeddingTable::EmbeddingTable(ParameterSet& params, const std::string& name, int row_count, int width, Rng& rng)
    : rows(row_count) {
    std::vector<double> v(static_cast<std::size_t>(rows) * width);
    for (double& x : v) x = rng.normal();
    table = params.add(name + ".table", {rows, width}, std::move(v));
}

Var fourier_features(std::span<const double> scalars, int width, double max_period) {
    if (width % 2 != 0) throw InvalidArgument("fourier_features: width must be even");
    const int half = width / 2;
    std::vector<double> out(scalars.size() * static_cast<std::size_t>(width));
    for (std::size_t r = 0; r < scalars.size(); ++r) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::pow(1.0 / max_period, static_cast<double>(i) / half);
            out[r * width + i] = std::cos(scalars[r] * freq);
            out[r * width + half + i] = std::sin(scalars[r] * freq);
        }
    }
    return Var::constant({static_cast<int>(scalars.size()), width}, std::move(out));
}

}  // namespace vcdm::nn
