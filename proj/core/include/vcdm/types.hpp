#pragma once

#include <Eigen/Dense>

namespace vcdm {

// Row-per-sample matrix used for datasets, features and embeddings.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

}  // namespace vcdm
