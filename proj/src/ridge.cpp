#include "neuroencode/ridge.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <stdexcept>

#include "neuroencode/container.hpp"
#include "neuroencode/parallel.hpp"

#include "json.hpp"

namespace neuroencode {

namespace {

void check_alpha(const Vector& alpha) {
    for (Index i = 0; i < alpha.size(); ++i) {
        if (!std::isfinite(alpha(i)) || alpha(i) < 0.0)
            throw std::invalid_argument("ridge: alpha must be finite and >= 0");
    }
}

Vector broadcast_alpha(const Vector& alpha, Index n_targets) {
    if (alpha.size() == n_targets) return alpha;
    if (alpha.size() == 1) return Vector::Constant(n_targets, alpha(0));
    throw std::invalid_argument("ridge: alpha size must be 1 or match target count");
}

}  // namespace

CvConfig::CvConfig() : alpha_grid(default_alpha_grid()) {}

void CvConfig::validate() const {
    if (alpha_grid.empty()) throw std::invalid_argument("cv: empty alpha grid");
    for (size_t i = 0; i < alpha_grid.size(); ++i) {
        if (!(alpha_grid[i] > 0.0) || !std::isfinite(alpha_grid[i]))
            throw std::invalid_argument("cv: alpha grid must be positive and finite");
        if (i > 0 && !(alpha_grid[i] > alpha_grid[i - 1]))
            throw std::invalid_argument("cv: alpha grid must be strictly increasing");
    }
    if (n_folds < 2) throw std::invalid_argument("cv: n_folds must be >= 2");
    if (chunk_length < 1) throw std::invalid_argument("cv: chunk_length must be >= 1");
}

std::vector<double> default_alpha_grid() {
    std::vector<double> grid(10);
    const double lo = std::log(1.0), hi = std::log(1e5);
    for (int i = 0; i < 10; ++i)
        grid[i] = std::exp(lo + (hi - lo) * i / 9.0);
    return grid;
}

RidgePath::RidgePath(const Matrix& x) {
    if (x.rows() < 2) throw std::invalid_argument("ridge: need at least two rows");
    Eigen::BDCSVD<Matrix> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
    u_ = svd.matrixU();
    v_ = svd.matrixV();
    s_ = svd.singularValues();
    const double smax = s_.size() ? s_(0) : 0.0;
    zero_tol_ = smax * std::max(x.rows(), x.cols()) *
                std::numeric_limits<double>::epsilon();
}

Matrix RidgePath::solve(const Matrix& y, double alpha) const {
    return solve(y, Vector::Constant(y.cols(), alpha));
}

Matrix RidgePath::solve(const Matrix& y, const Vector& alpha_in) const {
    if (y.rows() != u_.rows())
        throw std::invalid_argument("ridge: target row count does not match design");
    const Vector alpha = broadcast_alpha(alpha_in, y.cols());
    check_alpha(alpha);
    Matrix beta(v_.rows(), y.cols());
    const Index r = s_.size();
    // Column-by-column products keep fitting bitwise separable per voxel
    // (a shared GEMM would round differently depending on target count).
    parallel_for(static_cast<int>(y.cols()), [&](int v) {
        const Index col = v;
        const Vector z = u_.transpose() * y.col(col);
        Vector d(r);
        for (Index i = 0; i < r; ++i) {
            if (alpha(col) == 0.0 && s_(i) <= zero_tol_)
                d(i) = 0.0;
            else
                d(i) = s_(i) / (s_(i) * s_(i) + alpha(col));
        }
        beta.col(col) = v_ * (d.array() * z.array()).matrix();
    });
    return beta;
}

RidgeFit fit_ridge(const Matrix& x, const Matrix& y, const Vector& alpha_in,
                   bool standardize) {
    if (x.rows() != y.rows())
        throw std::invalid_argument("ridge: X and Y row counts differ");
    if (x.rows() < 2) throw std::invalid_argument("ridge: need at least two rows");
    const Index t = x.rows(), p = x.cols(), n_vox = y.cols();
    const Vector alpha = broadcast_alpha(alpha_in, n_vox);
    check_alpha(alpha);

    RidgeFit fit;
    fit.standardized = standardize;
    fit.alpha = alpha;
    fit.x_mean = RowVector::Zero(p);
    fit.x_scale = RowVector::Ones(p);
    fit.y_mean = RowVector::Zero(n_vox);

    std::vector<Index> keep;
    keep.reserve(p);
    if (standardize) {
        fit.x_mean = x.colwise().mean();
        for (Index j = 0; j < p; ++j) {
            const double var =
                (x.col(j).array() - fit.x_mean(j)).square().sum() / double(t);
            const double sd = std::sqrt(var);
            const bool constant = (x.col(j).array() == x(0, j)).all();
            if (constant || sd == 0.0)
                fit.dropped_columns.push_back(j);
            else {
                fit.x_scale(j) = sd;
                keep.push_back(j);
            }
        }
        // Per-column reduction keeps each voxel's centering independent of
        // its neighbors (a colwise mean vectorizes across columns).
        for (Index v = 0; v < n_vox; ++v) fit.y_mean(v) = y.col(v).mean();
    } else {
        for (Index j = 0; j < p; ++j) {
            if ((x.col(j).array() == 0.0).all())
                fit.dropped_columns.push_back(j);
            else
                keep.push_back(j);
        }
    }
    if (!fit.dropped_columns.empty()) {
        std::cerr << "ridge: dropped " << fit.dropped_columns.size()
                  << " degenerate feature column(s):";
        for (size_t i = 0; i < fit.dropped_columns.size() && i < 8; ++i)
            std::cerr << ' ' << fit.dropped_columns[i];
        if (fit.dropped_columns.size() > 8) std::cerr << " ...";
        std::cerr << '\n';
    }

    Matrix xs(t, static_cast<Index>(keep.size()));
    for (size_t k = 0; k < keep.size(); ++k) {
        const Index j = keep[k];
        xs.col(static_cast<Index>(k)) =
            ((x.col(j).array() - fit.x_mean(j)) / fit.x_scale(j)).matrix();
    }
    const Matrix yc = y.rowwise() - fit.y_mean;

    RidgePath path(xs);
    const Matrix beta_kept = path.solve(yc, alpha);
    fit.beta = Matrix::Zero(p, n_vox);
    for (size_t k = 0; k < keep.size(); ++k)
        fit.beta.row(keep[k]) = beta_kept.row(static_cast<Index>(k));
    return fit;
}

RidgeFit fit_ridge(const Matrix& x, const Matrix& y, double alpha,
                   bool standardize) {
    Vector a(1);
    a(0) = alpha;
    return fit_ridge(x, y, a, standardize);
}

Matrix predict(const RidgeFit& fit, const Matrix& x) {
    if (x.cols() != fit.beta.rows())
        throw std::invalid_argument("ridge: feature count does not match fit");
    const Matrix xs =
        ((x.rowwise() - fit.x_mean).array().rowwise() / fit.x_scale.array())
            .matrix();
    Matrix out = xs * fit.beta;
    out.rowwise() += fit.y_mean;
    return out;
}

CvSelection cv_select_alpha(const Matrix& x, const Matrix& y,
                            const CvConfig& cfg, bool standardize) {
    cfg.validate();
    if (x.rows() != y.rows())
        throw std::invalid_argument("cv: X and Y row counts differ");
    const Index t = x.rows();
    const Index n_vox = y.cols();
    const Index n_grid = static_cast<Index>(cfg.alpha_grid.size());
    if (t < Index(cfg.n_folds) * Index(cfg.chunk_length))
        throw std::invalid_argument("cv: fewer rows than n_folds * chunk_length");

    // Chunk i covers [i*L, (i+1)*L), the final chunk absorbs the remainder;
    // chunk i belongs to fold i % n_folds.
    const Index n_chunks = t / cfg.chunk_length;
    std::vector<int> fold_of_row(static_cast<size_t>(t));
    for (Index i = 0; i < t; ++i) {
        Index chunk = std::min(i / cfg.chunk_length, n_chunks - 1);
        fold_of_row[static_cast<size_t>(i)] = int(chunk % cfg.n_folds);
    }

    Matrix rho_sum = Matrix::Zero(n_grid, n_vox);
    for (int f = 0; f < cfg.n_folds; ++f) {
        std::vector<Index> train_rows, held_rows;
        for (Index i = 0; i < t; ++i)
            (fold_of_row[static_cast<size_t>(i)] == f ? held_rows : train_rows)
                .push_back(i);
        Matrix xt(static_cast<Index>(train_rows.size()), x.cols());
        Matrix yt(static_cast<Index>(train_rows.size()), n_vox);
        for (size_t i = 0; i < train_rows.size(); ++i) {
            xt.row(static_cast<Index>(i)) = x.row(train_rows[i]);
            yt.row(static_cast<Index>(i)) = y.row(train_rows[i]);
        }
        Matrix xh(static_cast<Index>(held_rows.size()), x.cols());
        Matrix yh(static_cast<Index>(held_rows.size()), n_vox);
        for (size_t i = 0; i < held_rows.size(); ++i) {
            xh.row(static_cast<Index>(i)) = x.row(held_rows[i]);
            yh.row(static_cast<Index>(i)) = y.row(held_rows[i]);
        }
        for (Index g = 0; g < n_grid; ++g) {
            const RidgeFit fit = fit_ridge(xt, yt, cfg.alpha_grid[static_cast<size_t>(g)],
                                           standardize);
            const TemporalScore score = score_temporal(yh, predict(fit, xh));
            rho_sum.row(g) += score.rho.transpose();
        }
    }

    CvSelection sel;
    sel.mean_rho = rho_sum / double(cfg.n_folds);
    sel.alpha.resize(n_vox);
    for (Index v = 0; v < n_vox; ++v) {
        Index best = 0;
        for (Index g = 1; g < n_grid; ++g)
            if (sel.mean_rho(g, v) >= sel.mean_rho(best, v)) best = g;
        sel.alpha(v) = cfg.alpha_grid[static_cast<size_t>(best)];
    }
    return sel;
}

TemporalScore score_temporal(const Matrix& r, const Matrix& r_hat) {
    if (r.rows() != r_hat.rows() || r.cols() != r_hat.cols())
        throw std::invalid_argument("score: shape mismatch");
    if (r.rows() < 3) throw std::invalid_argument("score: need at least three rows");
    const Index n_vox = r.cols();
    TemporalScore out;
    out.rho = Vector::Zero(n_vox);
    out.zero_variance.assign(static_cast<size_t>(n_vox), 0);
    parallel_for(static_cast<int>(n_vox), [&](int v) {
        const Index col = v;
        const Vector a = (r.col(col).array() - r.col(col).mean()).matrix();
        const Vector b = (r_hat.col(col).array() - r_hat.col(col).mean()).matrix();
        const double ssa = a.squaredNorm(), ssb = b.squaredNorm();
        if (ssa == 0.0 || ssb == 0.0) {
            out.zero_variance[static_cast<size_t>(v)] = 1;
            return;
        }
        out.rho(col) = a.dot(b) / std::sqrt(ssa * ssb);
    });
    for (char z : out.zero_variance) out.n_zero_variance += z;
    return out;
}

void save_ridge_fit(const std::string& path, const RidgeFit& fit,
                    const CvConfig* cv) {
    nlohmann::json meta;
    meta["kind"] = "ridge_fit";
    meta["standardized"] = fit.standardized;
    meta["dropped_columns"] = fit.dropped_columns;
    if (cv) {
        meta["alpha_grid"] = cv->alpha_grid;
        meta["n_folds"] = cv->n_folds;
        meta["chunk_length"] = cv->chunk_length;
    }
    Container c;
    c.meta = meta;
    c.sections.push_back({"beta", fit.beta, false});
    c.sections.push_back({"alpha", fit.alpha, false});
    c.sections.push_back({"x_mean", fit.x_mean, false});
    c.sections.push_back({"x_scale", fit.x_scale, false});
    c.sections.push_back({"y_mean", fit.y_mean, false});
    write_container(path, c);
}

RidgeFit load_ridge_fit(const std::string& path, CvConfig* cv) {
    const Container c = read_container(path);
    const nlohmann::json& meta = c.meta;
    if (meta.value("kind", "") != "ridge_fit")
        throw std::runtime_error("ridge: not a ridge_fit container: " + path);
    RidgeFit fit;
    fit.beta = c.at("beta");
    fit.alpha = c.at("alpha");
    fit.x_mean = c.at("x_mean");
    fit.x_scale = c.at("x_scale");
    fit.y_mean = c.at("y_mean");
    fit.standardized = meta.value("standardized", true);
    fit.dropped_columns = meta.value("dropped_columns", std::vector<Index>{});
    if (cv && meta.contains("alpha_grid")) {
        cv->alpha_grid = meta["alpha_grid"].get<std::vector<double>>();
        cv->n_folds = meta.value("n_folds", cv->n_folds);
        cv->chunk_length = meta.value("chunk_length", cv->chunk_length);
    }
    return fit;
}

}  // namespace neuroencode
