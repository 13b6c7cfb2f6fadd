#include "test_support.hpp"

#include <algorithm>
#include <cmath>

namespace vcdm::testutil {

double relative_error(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-12});
    return std::abs(a - b) / denom;
}

std::vector<double> random_vector(std::size_t n, Rng& rng, double scale) {
    std::vector<double> v(n);
    for (double& x : v) x = scale * rng.normal();
    return v;
}

double gradient_check(const std::function<nn::Var()>& f, std::vector<nn::Var> inputs, Rng& rng, double h) {
    for (auto& in : inputs) in.zero_grad();
    nn::Var out = f();
    out.backward();

    std::vector<std::vector<double>> dirs;
    double analytic = 0.0;
    for (auto& in : inputs) {
        dirs.push_back(random_vector(in.numel(), rng));
        auto g = in.grad();
        if (g.empty()) continue;
        for (std::size_t i = 0; i < g.size(); ++i) analytic += g[i] * dirs.back()[i];
    }

    auto shift = [&](double s) {
        for (std::size_t k = 0; k < inputs.size(); ++k) {
            auto v = inputs[k].mutable_value();
            for (std::size_t i = 0; i < v.size(); ++i) v[i] += s * dirs[k][i];
        }
    };
    double plus, minus;
    {
        nn::NoGradGuard guard;
        shift(h);
        plus = f().item();
        shift(-2.0 * h);
        minus = f().item();
        shift(h);
    }
    const double numeric = (plus - minus) / (2.0 * h);
    return relative_error(analytic, numeric);
}

}  // namespace vcdm::testutil
