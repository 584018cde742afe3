#pragma once

#include <string>
#include <vector>

#include "neuroencode/types.hpp"

namespace neuroencode {

// Multi-target ridge regression on a shared SVD path, chunked cross-validation
// for per-voxel regularization, and temporal-correlation scoring.

struct CvConfig {
    std::vector<double> alpha_grid;
    int n_folds = 5;
    int chunk_length = 20;

    CvConfig();
    void validate() const;
};

std::vector<double> default_alpha_grid();

struct RidgeFit {
    Matrix beta;        // P' x V, applies to standardized features
    Vector alpha;       // per voxel
    RowVector x_mean;   // 1 x P'
    RowVector x_scale;  // 1 x P'
    RowVector y_mean;   // 1 x V
    bool standardized = true;
    std::vector<Index> dropped_columns;
};

// Thin SVD of one design matrix, reused across voxels and alphas. The zero
// singular-value guard only engages at alpha = 0, where the path degenerates
// to the pseudo-inverse.
class RidgePath {
  public:
    explicit RidgePath(const Matrix& x);

    // beta for one shared alpha across all targets.
    Matrix solve(const Matrix& y, double alpha) const;
    // beta with a per-target alpha (size must equal y.cols()).
    Matrix solve(const Matrix& y, const Vector& alpha) const;

    const Vector& singular_values() const { return s_; }

  private:
    Matrix u_;  // T x r
    Matrix v_;  // P' x r
    Vector s_;  // r
    double zero_tol_ = 0.0;
};

// alpha may be a single value (broadcast) or one entry per column of y.
// standardize = false fits the raw system (means 0, scales 1). Columns of x
// with zero variance (or exactly zero in raw mode) are dropped with a warning
// and receive a zero coefficient.
RidgeFit fit_ridge(const Matrix& x, const Matrix& y, const Vector& alpha,
                   bool standardize = true);
RidgeFit fit_ridge(const Matrix& x, const Matrix& y, double alpha,
                   bool standardize = true);

Matrix predict(const RidgeFit& fit, const Matrix& x);

struct CvSelection {
    Vector alpha;     // per voxel, drawn from the grid
    Matrix mean_rho;  // grid size x V, mean held-out correlation
};

// Contiguous chunks of cfg.chunk_length volumes are dealt round-robin to
// folds, preserving temporal structure inside each chunk. Ties between grid
// alphas resolve toward the larger alpha.
CvSelection cv_select_alpha(const Matrix& x, const Matrix& y,
                            const CvConfig& cfg, bool standardize = true);

struct TemporalScore {
    Vector rho;                       // per voxel
    std::vector<char> zero_variance;  // per voxel: either column was constant
    int n_zero_variance = 0;
};

TemporalScore score_temporal(const Matrix& r, const Matrix& r_hat);

void save_ridge_fit(const std::string& path, const RidgeFit& fit,
                    const CvConfig* cv = nullptr);
RidgeFit load_ridge_fit(const std::string& path, CvConfig* cv = nullptr);

}  // namespace neuroencode
