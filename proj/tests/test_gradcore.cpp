#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "fd_check.hpp"
#include "neuroencode/graph.hpp"
#include "neuroencode/hash.hpp"
#include "neuroencode/rng.hpp"

using namespace netest;
using neuroencode::hash_matrix;

TEST_CASE("matmul against identity leaves the operand unchanged") {
    Rng rng(11);
    gr::Graph g;
    gr::Var i3 = g.constant(Matrix(Matrix::Identity(3, 3)));
    Matrix b = uniform_pm1(rng, 3, 5);
    gr::Var out = gr::matmul(i3, g.constant(b));
    CHECK(out.value().isApprox(b, 0.0));
}

TEST_CASE("matmul matches hand arithmetic") {
    gr::Graph g;
    Matrix a(2, 2);
    a << 1, 2, 3, 4;
    Matrix b(2, 1);
    b << 1, 1;
    gr::Var out = gr::matmul(g.constant(a), g.constant(b));
    CHECK(out.value()(0, 0) == 3.0);
    CHECK(out.value()(1, 0) == 7.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    gr::Graph g;
    gr::Var a = g.constant(Matrix(Matrix::Zero(2, 3)));
    gr::Var b = g.constant(Matrix(Matrix::Zero(4, 2)));
    CHECK_THROWS_AS(gr::matmul(a, b), std::invalid_argument);
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(42);
    std::vector<Matrix> inputs = {uniform_pm1(rng, 4, 5), uniform_pm1(rng, 5, 2)};
    const double err = fd_max_rel_err(inputs, [](gr::Graph&, const std::vector<gr::Var>& in) {
        return gr::sum(gr::matmul(in[0], in[1]));
    });
    CHECK(err < 1e-6);
}

TEST_CASE("add with zero is the identity") {
    Rng rng(7);
    gr::Graph g;
    Matrix x = uniform_pm1(rng, 3, 4);
    gr::Var out = gr::add(g.constant(x), g.constant(0.0));
    CHECK(out.value().isApprox(x, 0.0));
}

TEST_CASE("gelu fixes zero") {
    gr::Graph g;
    gr::Var out = gr::gelu(g.constant(0.0));
    CHECK(out.value()(0, 0) == 0.0);
}

TEST_CASE("elementwise ops reject incompatible shapes") {
    gr::Graph g;
    gr::Var a = g.constant(Matrix(Matrix::Zero(2, 3)));
    gr::Var b = g.constant(Matrix(Matrix::Zero(3, 2)));
    CHECK_THROWS_AS(gr::add(a, b), std::invalid_argument);
    CHECK_THROWS_AS(gr::sub(a, b), std::invalid_argument);
    CHECK_THROWS_AS(gr::mul(a, b), std::invalid_argument);
}

TEST_CASE("elementwise gradients match finite differences") {
    Rng rng(43);

    SUBCASE("mul on random 3x3") {
        std::vector<Matrix> inputs = {uniform_pm1(rng, 3, 3), uniform_pm1(rng, 3, 3)};
        const double err = fd_max_rel_err(inputs, [](gr::Graph&, const std::vector<gr::Var>& in) {
            return gr::sum(gr::mul(in[0], in[1]));
        });
        CHECK(err < 1e-6);
    }
    SUBCASE("add and sub") {
        std::vector<Matrix> inputs = {uniform_pm1(rng, 3, 3), uniform_pm1(rng, 3, 3)};
        const double err = fd_max_rel_err(inputs, [](gr::Graph&, const std::vector<gr::Var>& in) {
            return gr::sum(gr::sub(gr::add(in[0], in[1]), gr::mul(in[0], in[1])));
        });
        CHECK(err < 1e-6);
    }
    SUBCASE("gelu and tanh") {
        std::vector<Matrix> inputs = {uniform_pm1(rng, 4, 3)};
        const double err = fd_max_rel_err(inputs, [](gr::Graph&, const std::vector<gr::Var>& in) {
            return gr::sum(gr::gelu(gr::tanh(in[0])));
        });
        CHECK(err < 1e-6);
    }
    SUBCASE("scalar broadcast on both sides") {
        std::vector<Matrix> inputs = {uniform_pm1(rng, 3, 3), uniform_pm1(rng, 1, 1)};
        const double err = fd_max_rel_err(inputs, [](gr::Graph&, const std::vector<gr::Var>& in) {
            gr::Var lhs = gr::mul(in[0], in[1]);
            gr::Var rhs = gr::sub(in[1], gr::add(in[0], in[1]));
            return gr::sum(gr::mul(lhs, rhs));
        });
        CHECK(err < 1e-6);
    }
    SUBCASE("row broadcast") {
        std::vector<Matrix> inputs = {uniform_pm1(rng, 4, 3), uniform_pm1(rng, 1, 3)};
        const double err = fd_max_rel_err(inputs, [](gr::Graph&, const std::vector<gr::Var>& in) {
            gr::Var shifted = gr::add_rows(in[0], in[1]);
            return gr::sum(gr::mul(shifted, shifted));
        });
        CHECK(err < 1e-6);
    }
    SUBCASE("scale and transpose") {
        std::vector<Matrix> inputs = {uniform_pm1(rng, 2, 5)};
        const double err = fd_max_rel_err(inputs, [](gr::Graph&, const std::vector<gr::Var>& in) {
            return gr::sum(gr::matmul(gr::scale(in[0], 1.7), gr::transpose(in[0])));
        });
        CHECK(err < 1e-6);
    }
}

TEST_CASE("softmax turns a constant row uniform") {
    gr::Graph g;
    gr::Var out = gr::softmax_rows(g.constant(Matrix(Matrix::Constant(1, 4, 3.25))));
    for (Index c = 0; c < 4; ++c) CHECK(out.value()(0, c) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("softmax survives large logits via row-max subtraction") {
    gr::Graph g;
    Matrix x(1, 2);
    x << 1000.0, 0.0;
    gr::Var out = gr::softmax_rows(g.constant(x));
    CHECK(out.value()(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out.value()(0, 1) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(44);
    gr::Graph g;
    gr::Var out = gr::softmax_rows(g.constant(uniform_pm1(rng, 6, 9)));
    for (Index r = 0; r < 6; ++r) {
        CHECK(std::abs(out.value().row(r).sum() - 1.0) < 1e-12);
        CHECK(out.value().row(r).minCoeff() >= 0.0);
    }
}

TEST_CASE("softmax gradient matches finite differences") {
    Rng rng(45);
    std::vector<Matrix> inputs = {uniform_pm1(rng, 2, 4)};
    const double err = fd_max_rel_err(inputs, [](gr::Graph& g, const std::vector<gr::Var>& in) {
        Matrix w(4, 1);
        w << 0.3, -1.1, 0.7, 0.2;
        return gr::sum(gr::matmul(gr::softmax_rows(in[0]), g.constant(w)));
    });
    CHECK(err < 1e-6);
}

TEST_CASE("layer_norm leaves an already-normalized row unchanged") {
    // Zero mean with variance 1 - eps, so the eps-adjusted normalizer is
    // exactly 1 and the row is a fixed point of the layer.
    gr::Graph g;
    const double a = std::sqrt(1.0 - gr::kLayerNormEps);
    Matrix x(1, 4);
    x << -a, a, -a, a;
    gr::Var out = gr::layer_norm(g.constant(x), g.constant(Matrix(Matrix::Ones(1, 4))),
                                 g.constant(Matrix(Matrix::Zero(1, 4))));
    CHECK((out.value() - x).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("layer_norm is invariant to positive input rescaling") {
    Rng rng(46);
    gr::Graph g;
    Matrix x = uniform_pm1(rng, 5, 8);
    gr::Var gain = g.constant(uniform_pm1(rng, 1, 8));
    gr::Var bias = g.constant(uniform_pm1(rng, 1, 8));
    gr::Var a = gr::layer_norm(g.constant(x), gain, bias);
    gr::Var b = gr::layer_norm(g.constant(Matrix(10.0 * x)), gain, bias);
    CHECK((a.value() - b.value()).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("layer_norm gradient matches finite differences") {
    Rng rng(47);
    std::vector<Matrix> inputs = {uniform_pm1(rng, 3, 6), uniform_pm1(rng, 1, 6),
                                  uniform_pm1(rng, 1, 6)};
    const double err = fd_max_rel_err(inputs, [](gr::Graph& g, const std::vector<gr::Var>& in) {
        Matrix w(6, 1);
        w << 0.4, -0.9, 1.3, 0.1, -0.5, 0.8;
        return gr::sum(gr::matmul(gr::layer_norm(in[0], in[1], in[2]), g.constant(w)));
    });
    CHECK(err < 1e-6);
}

TEST_CASE("slice and concat gradients match finite differences") {
    Rng rng(48);
    std::vector<Matrix> inputs = {uniform_pm1(rng, 4, 6), uniform_pm1(rng, 2, 6)};
    const double err = fd_max_rel_err(inputs, [](gr::Graph&, const std::vector<gr::Var>& in) {
        gr::Var top = gr::slice_rows(in[0], 1, 2);
        gr::Var left = gr::slice_cols(in[0], 0, 3);
        gr::Var right = gr::slice_cols(in[0], 3, 3);
        std::vector<gr::Var> row_parts = {top, in[1]};
        std::vector<gr::Var> col_parts = {left, right};
        gr::Var stacked = gr::concat_rows(row_parts);
        gr::Var widened = gr::concat_cols(col_parts);
        return gr::add(gr::mean(stacked), gr::sum(gr::mul(widened, widened)));
    });
    CHECK(err < 1e-6);
}

TEST_CASE("sum of elementwise square backpropagates 2x") {
    Rng rng(49);
    Matrix x = uniform_pm1(rng, 3, 3);
    gr::Graph g;
    gr::Var xv = g.leaf(x, true);
    gr::Var loss = gr::sum(gr::mul(xv, xv));
    g.backward(loss);
    CHECK((g.gradient(xv) - 2.0 * x).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("leaf not reaching the loss gets a zero gradient") {
    Rng rng(50);
    gr::Graph g;
    gr::Var used = g.leaf(uniform_pm1(rng, 2, 2), true);
    gr::Var unused = g.leaf(uniform_pm1(rng, 3, 4), true);
    gr::Var loss = gr::mean(used);
    g.backward(loss);
    CHECK(g.gradient(unused).rows() == 3);
    CHECK(g.gradient(unused).cols() == 4);
    CHECK(g.gradient(unused).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward rejects a non-scalar loss") {
    gr::Graph g;
    gr::Var x = g.leaf(Matrix(Matrix::Zero(2, 2)), true);
    CHECK_THROWS_AS(g.backward(x), std::invalid_argument);
}

TEST_CASE("non-finite values surface as errors at evaluation") {
    gr::Graph g;
    Matrix bad(1, 2);
    bad << 1.0, std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(g.leaf(bad, false), std::runtime_error);

    gr::Var big = g.constant(Matrix(Matrix::Constant(1, 2, 1e308)));
    CHECK_THROWS_AS(gr::mul(big, big), std::runtime_error);
}

TEST_CASE("forward and backward replay bit-identically") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Matrix x = uniform_pm1(rng, 5, 4);
        Matrix w = uniform_pm1(rng, 4, 3);
        gr::Graph g;
        gr::Var xv = g.leaf(x, true);
        gr::Var wv = g.leaf(w, true);
        gr::Var h = gr::gelu(gr::matmul(xv, wv));
        gr::Var loss = gr::mean(gr::mul(h, h));
        g.backward(loss);
        std::uint64_t digest = hash_matrix(loss.value());
        digest = hash_matrix(g.gradient(xv), digest);
        digest = hash_matrix(g.gradient(wv), digest);
        return digest;
    };
    CHECK(run(123) == run(123));
    CHECK(run(123) != run(124));
}

TEST_CASE("composite graph gradient matches finite differences") {
    Rng rng(51);
    std::vector<Matrix> inputs = {uniform_pm1(rng, 3, 4), uniform_pm1(rng, 4, 4),
                                  uniform_pm1(rng, 1, 4), uniform_pm1(rng, 1, 4)};
    const double err = fd_max_rel_err(inputs, [](gr::Graph& g, const std::vector<gr::Var>& in) {
        gr::Var h = gr::layer_norm(gr::matmul(in[0], in[1]), in[2], in[3]);
        gr::Var attn = gr::softmax_rows(gr::matmul(h, gr::transpose(h)));
        gr::Var mixed = gr::matmul(attn, gr::gelu(h));
        return gr::mean(gr::mul(mixed, mixed));
    });
    CHECK(err < 1e-6);
}
