#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vcdm/nn/ops.hpp"
#include "vcdm/nn/tensor.hpp"
#include "vcdm/random.hpp"

namespace vcdm::nn {

// Named, ordered collection of trainable tensors. Order is registration
// order and is what checkpoints and optimizers rely on.
class ParameterSet {
public:
    Var add(const std::string& name, Shape shape, std::vector<double> values);

    std::size_t size() const { return entries_.size(); }
    std::size_t scalar_count() const;
    const std::string& name(std::size_t i) const { return entries_[i].first; }
    Var& at(std::size_t i) { return entries_[i].second; }
    const Var& at(std::size_t i) const { return entries_[i].second; }
    // Index of the named tensor, or -1.
    long find(const std::string& name) const;

    void zero_grad();

    std::vector<std::vector<double>> values() const;
    // Throws IncompatibleCheckpoint when the layout differs.
    void assign(const std::vector<std::vector<double>>& values);

private:
    std::vector<std::pair<std::string, Var>> entries_;
};

enum class Init { kDefault, kZero };

// y = x W + b with W stored (in, out).
struct Linear {
    Linear() = default;
    Linear(ParameterSet& params, const std::string& name, int in, int out, Rng& rng, Init init = Init::kDefault,
           bool with_bias = true);
    Var operator()(const Var& x) const { return linear(x, weight, bias); }

    Var weight;
    Var bias;
    int in = 0;
    int out = 0;
};

struct LayerNorm {
    LayerNorm() = default;
    LayerNorm(ParameterSet& params, const std::string& name, int width);
    Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }

    Var gamma;
    Var beta;
};

struct GroupNorm {
    GroupNorm() = default;
    GroupNorm(ParameterSet& params, const std::string& name, int channels, int max_groups = 8);
    Var operator()(const Var& x) const { return group_norm(x, groups, gamma, beta); }

    Var gamma;
    Var beta;
    int groups = 1;
};

struct Conv2d {
    Conv2d() = default;
    Conv2d(ParameterSet& params, const std::string& name, int in, int out, int kernel, Rng& rng,
           Init init = Init::kDefault);
    Var operator()(const Var& x) const { return conv2d(x, weight, bias, (kernel - 1) / 2); }

    Var weight;
    Var bias;
    int kernel = 3;
};

// Lookup table of learned rows.
struct EmbeddingTable {
    EmbeddingTable() = default;
    EmbeddingTable(ParameterSet& params, const std::string& name, int rows, int width, Rng& rng);
    Var operator()(std::span<const int> ids) const { return gather_rows(table, ids); }

    Var table;
    int rows = 0;
};

// Sinusoidal features of a scalar per row: [cos(w_i s), sin(w_i s)].
Var fourier_features(std::span<const double> scalars, int width, double max_period = 10000.0);

}  // namespace vcdm::nn
