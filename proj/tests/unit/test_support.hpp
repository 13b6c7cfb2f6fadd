#pragma once

#include <functional>
#include <vector>

#include "vcdm/nn/tensor.hpp"
#include "vcdm/random.hpp"

namespace vcdm::testutil {

// Compares the autograd directional derivative of scalar f at `inputs`
// against a central finite difference along a random direction, perturbing
// every tensor in `inputs` jointly. Returns the relative error.
double gradient_check(const std::function<nn::Var()>& f, std::vector<nn::Var> inputs, Rng& rng, double h = 1e-5);

double relative_error(double a, double b);

std::vector<double> random_vector(std::size_t n, Rng& rng, double scale = 1.0);

}  // namespace vcdm::testutil
