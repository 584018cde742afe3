#pragma once

#include <Eigen/Dense>

namespace neuroencode {

// Row-major storage throughout: every on-disk payload is row-major and the
// autodiff engine hands raw rows to the resampler, so keeping one layout
// avoids transposes at the IO boundary.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Eigen::Index;

}  // namespace neuroencode
