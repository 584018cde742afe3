#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "neuroencode/graph.hpp"
#include "neuroencode/rng.hpp"

namespace netest {

using neuroencode::Index;
using neuroencode::Matrix;
using neuroencode::Rng;
namespace gr = neuroencode::grad;

using LossBuilder = std::function<gr::Var(gr::Graph&, const std::vector<gr::Var>&)>;

// Central finite-difference oracle. Builds the loss once with gradients
// enabled, then re-evaluates it with each input entry nudged by ±h and
// reports the worst relative disagreement against the analytic gradients.
inline double fd_max_rel_err(const std::vector<Matrix>& inputs, const LossBuilder& build,
                             double h = 1e-5) {
    gr::Graph g;
    std::vector<gr::Var> leaves;
    leaves.reserve(inputs.size());
    for (const Matrix& m : inputs) leaves.push_back(g.leaf(m, true));
    gr::Var loss = build(g, leaves);
    g.backward(loss);
    std::vector<Matrix> grads;
    grads.reserve(leaves.size());
    for (gr::Var v : leaves) grads.push_back(g.gradient(v));

    auto eval = [&](const std::vector<Matrix>& xs) {
        gr::Graph fg;
        std::vector<gr::Var> ls;
        ls.reserve(xs.size());
        for (const Matrix& m : xs) ls.push_back(fg.leaf(m, false));
        return build(fg, ls).value()(0, 0);
    };

    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (Index r = 0; r < inputs[i].rows(); ++r) {
            for (Index c = 0; c < inputs[i].cols(); ++c) {
                std::vector<Matrix> xs = inputs;
                xs[i](r, c) += h;
                const double up = eval(xs);
                xs[i](r, c) -= 2.0 * h;
                const double dn = eval(xs);
                const double fd = (up - dn) / (2.0 * h);
                const double an = grads[i](r, c);
                const double rel =
                    std::abs(an - fd) / std::max(std::abs(an) + std::abs(fd), 1e-6);
                worst = std::max(worst, rel);
            }
        }
    }
    return worst;
}

inline Matrix uniform_pm1(Rng& rng, Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(-1.0, 1.0);
    return m;
}

}  // namespace netest
