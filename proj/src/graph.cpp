#include "neuroencode/graph.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace neuroencode::grad {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

void check_value(const Graph& g, const Matrix& m, const char* op) {
    if (g.check_finite() && !m.allFinite())
        throw std::runtime_error(std::string("non-finite values produced by op '") + op + "'");
}

Graph* common_graph(Var a, Var b) {
    require(a.valid() && b.valid(), "operand is not attached to a graph");
    require(a.graph() == b.graph(), "operands belong to different graphs");
    return a.graph();
}

bool scalar_shaped(Var v) { return v.rows() == 1 && v.cols() == 1; }

Matrix scalar1x1(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return m;
}

}  // namespace

const Matrix& Var::value() const { return g_->value(idx_); }
bool Var::requires_grad() const { return g_->requires_grad(idx_); }

Var Graph::leaf(Matrix value, bool requires_grad) {
    check_value(*this, value, "leaf");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::constant(double v) { return leaf(scalar1x1(v), false); }

Var Graph::add_op(Matrix value, std::span<const Var> parents, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    for (const Var& p : parents) {
        require(p.valid() && p.graph() == this, "parent from a different graph");
        n.parents.push_back(p.index());
        n.requires_grad = n.requires_grad || p.requires_grad();
    }
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Graph::accumulate(int idx, const Matrix& g) {
    Node& n = nodes_[static_cast<std::size_t>(idx)];
    if (!n.requires_grad) return;
    if (!n.grad_ready) {
        n.grad = g;
        n.grad_ready = true;
    } else {
        n.grad += g;
    }
}

void Graph::backward(Var loss) {
    require(loss.valid() && loss.graph() == this, "loss not attached to this graph");
    require(scalar_shaped(loss), "backward requires a scalar (1x1) loss");
    for (Node& n : nodes_) {
        n.grad_ready = false;
        n.grad.resize(0, 0);
    }
    if (!loss.requires_grad()) return;  // loss is constant; all gradients stay zero
    Node& top = nodes_[static_cast<std::size_t>(loss.index())];
    top.grad = Matrix::Ones(1, 1);
    top.grad_ready = true;
    for (int i = loss.index(); i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.grad_ready && n.backward) n.backward(*this, i);
    }
}

Matrix Graph::gradient(Var v) const {
    require(v.valid() && v.graph() == this, "node not attached to this graph");
    const Node& n = nodes_[static_cast<std::size_t>(v.index())];
    if (n.grad_ready) return n.grad;
    return Matrix::Zero(n.value.rows(), n.value.cols());
}

// --- op implementations ------------------------------------------------------

Var matmul(Var a, Var b) {
    Graph* g = common_graph(a, b);
    require(a.cols() == b.rows(), "matmul: inner dimensions disagree");
    Matrix out(a.rows(), b.cols());
    out.noalias() = a.value() * b.value();
    check_value(*g, out, "matmul");
    const int ia = a.index(), ib = b.index();
    const Var parents[] = {a, b};
    return g->add_op(std::move(out), parents, [ia, ib](Graph& gr, int self) {
        const Matrix& go = gr.grad_of(self);
        gr.accumulate(ia, Matrix(go * gr.value(ib).transpose()));
        gr.accumulate(ib, Matrix(gr.value(ia).transpose() * go));
    });
}

Var transpose(Var a) {
    Graph* g = a.graph();
    Matrix out = a.value().transpose();
    const int ia = a.index();
    const Var parents[] = {a};
    return g->add_op(std::move(out), parents, [ia](Graph& gr, int self) {
        gr.accumulate(ia, Matrix(gr.grad_of(self).transpose()));
    });
}

Var add(Var a, Var b) {
    Graph* g = common_graph(a, b);
    if (scalar_shaped(a) && !scalar_shaped(b)) std::swap(a, b);
    const bool bcast = !(a.rows() == b.rows() && a.cols() == b.cols());
    if (bcast) require(scalar_shaped(b), "add: shapes are neither equal nor scalar-broadcastable");
    Matrix out = bcast ? Matrix((a.value().array() + b.value()(0, 0)).matrix())
                       : Matrix(a.value() + b.value());
    check_value(*g, out, "add");
    const int ia = a.index(), ib = b.index();
    const Var parents[] = {a, b};
    return g->add_op(std::move(out), parents, [ia, ib, bcast](Graph& gr, int self) {
        const Matrix& go = gr.grad_of(self);
        gr.accumulate(ia, go);
        gr.accumulate(ib, bcast ? scalar1x1(go.sum()) : go);
    });
}

Var add_rows(Var a, Var row) {
    Graph* g = common_graph(a, row);
    require(row.rows() == 1 && row.cols() == a.cols(), "add_rows: row must be 1 x cols(a)");
    Matrix out = a.value();
    out.rowwise() += row.value().row(0);
    check_value(*g, out, "add_rows");
    const int ia = a.index(), ir = row.index();
    const Var parents[] = {a, row};
    return g->add_op(std::move(out), parents, [ia, ir](Graph& gr, int self) {
        const Matrix& go = gr.grad_of(self);
        gr.accumulate(ia, go);
        gr.accumulate(ir, Matrix(go.colwise().sum()));
    });
}

Var sub(Var a, Var b) {
    Graph* g = common_graph(a, b);
    const bool equal = a.rows() == b.rows() && a.cols() == b.cols();
    const bool bcast_b = !equal && scalar_shaped(b);
    const bool bcast_a = !equal && !bcast_b && scalar_shaped(a);
    require(equal || bcast_a || bcast_b, "sub: shapes are neither equal nor scalar-broadcastable");
    Matrix out;
    if (equal) out = a.value() - b.value();
    else if (bcast_b) out = (a.value().array() - b.value()(0, 0)).matrix();
    else out = (a.value()(0, 0) - b.value().array()).matrix();
    check_value(*g, out, "sub");
    const int ia = a.index(), ib = b.index();
    const Var parents[] = {a, b};
    return g->add_op(std::move(out), parents, [ia, ib, bcast_a, bcast_b](Graph& gr, int self) {
        const Matrix& go = gr.grad_of(self);
        gr.accumulate(ia, bcast_a ? scalar1x1(go.sum()) : go);
        gr.accumulate(ib, bcast_b ? scalar1x1(-go.sum()) : Matrix(-go));
    });
}

Var mul(Var a, Var b) {
    Graph* g = common_graph(a, b);
    if (scalar_shaped(a) && !scalar_shaped(b)) std::swap(a, b);
    const bool bcast = !(a.rows() == b.rows() && a.cols() == b.cols());
    if (bcast) require(scalar_shaped(b), "mul: shapes are neither equal nor scalar-broadcastable");
    Matrix out = bcast ? Matrix(a.value() * b.value()(0, 0))
                       : Matrix(a.value().cwiseProduct(b.value()));
    check_value(*g, out, "mul");
    const int ia = a.index(), ib = b.index();
    const Var parents[] = {a, b};
    return g->add_op(std::move(out), parents, [ia, ib, bcast](Graph& gr, int self) {
        const Matrix& go = gr.grad_of(self);
        if (bcast) {
            gr.accumulate(ia, Matrix(go * gr.value(ib)(0, 0)));
            gr.accumulate(ib, scalar1x1(go.cwiseProduct(gr.value(ia)).sum()));
        } else {
            gr.accumulate(ia, Matrix(go.cwiseProduct(gr.value(ib))));
            gr.accumulate(ib, Matrix(go.cwiseProduct(gr.value(ia))));
        }
    });
}

Var scale(Var a, double s) {
    Graph* g = a.graph();
    Matrix out = a.value() * s;
    check_value(*g, out, "scale");
    const int ia = a.index();
    const Var parents[] = {a};
    return g->add_op(std::move(out), parents, [ia, s](Graph& gr, int self) {
        gr.accumulate(ia, Matrix(gr.grad_of(self) * s));
    });
}

Var gelu(Var a) {
    Graph* g = a.graph();
    Matrix out = a.value().unaryExpr(
        [](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); });
    check_value(*g, out, "gelu");
    const int ia = a.index();
    const Var parents[] = {a};
    return g->add_op(std::move(out), parents, [ia](Graph& gr, int self) {
        const Matrix d = gr.value(ia).unaryExpr([](double v) {
            const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
            const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
            return cdf + v * pdf;
        });
        gr.accumulate(ia, Matrix(gr.grad_of(self).cwiseProduct(d)));
    });
}

Var tanh(Var a) {
    Graph* g = a.graph();
    Matrix out = a.value().array().tanh().matrix();
    check_value(*g, out, "tanh");
    const int ia = a.index();
    const Var parents[] = {a};
    return g->add_op(std::move(out), parents, [ia](Graph& gr, int self) {
        const Matrix& y = gr.value(self);
        gr.accumulate(ia, Matrix((gr.grad_of(self).array() * (1.0 - y.array().square())).matrix()));
    });
}

Var softmax_rows(Var a) {
    Graph* g = a.graph();
    const Matrix& x = a.value();
    Matrix out(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        const double m = x.row(r).maxCoeff();
        out.row(r) = (x.row(r).array() - m).exp().matrix();
        out.row(r) /= out.row(r).sum();
    }
    check_value(*g, out, "softmax_rows");
    const int ia = a.index();
    const Var parents[] = {a};
    return g->add_op(std::move(out), parents, [ia](Graph& gr, int self) {
        const Matrix& y = gr.value(self);
        const Matrix& go = gr.grad_of(self);
        Matrix dx(y.rows(), y.cols());
        for (Index r = 0; r < y.rows(); ++r) {
            const double dot = go.row(r).dot(y.row(r));
            dx.row(r) = (y.row(r).array() * (go.row(r).array() - dot)).matrix();
        }
        gr.accumulate(ia, dx);
    });
}

Var layer_norm(Var x, Var gain, Var bias) {
    Graph* g = common_graph(x, gain);
    common_graph(x, bias);
    const Index n = x.cols();
    require(n >= 2, "layer_norm: needs at least 2 columns");
    require(gain.rows() == 1 && gain.cols() == n, "layer_norm: gain must be 1 x n");
    require(bias.rows() == 1 && bias.cols() == n, "layer_norm: bias must be 1 x n");
    const Matrix& xv = x.value();
    Matrix xhat(xv.rows(), n);
    Vector inv_std(xv.rows());
    for (Index r = 0; r < xv.rows(); ++r) {
        const double mu = xv.row(r).mean();
        const double var = (xv.row(r).array() - mu).square().sum() / static_cast<double>(n);
        inv_std(r) = 1.0 / std::sqrt(var + kLayerNormEps);
        xhat.row(r) = ((xv.row(r).array() - mu) * inv_std(r)).matrix();
    }
    Matrix out(xv.rows(), n);
    for (Index r = 0; r < xv.rows(); ++r)
        out.row(r) = xhat.row(r).cwiseProduct(gain.value().row(0)) + bias.value().row(0);
    check_value(*g, out, "layer_norm");
    const int ix = x.index(), igain = gain.index(), ibias = bias.index();
    const Var parents[] = {x, gain, bias};
    return g->add_op(std::move(out), parents,
                     [ix, igain, ibias, xhat, inv_std](Graph& gr, int self) {
        const Matrix& go = gr.grad_of(self);
        const Index rows = go.rows(), n = go.cols();
        Matrix dgain = Matrix::Zero(1, n);
        Matrix dbias = Matrix::Zero(1, n);
        for (Index r = 0; r < rows; ++r) {
            dgain.row(0) += go.row(r).cwiseProduct(xhat.row(r));
            dbias.row(0) += go.row(r);
        }
        gr.accumulate(igain, dgain);
        gr.accumulate(ibias, dbias);
        const Matrix& gainv = gr.value(igain);
        Matrix dx(rows, n);
        for (Index r = 0; r < rows; ++r) {
            const RowVector h = go.row(r).cwiseProduct(gainv.row(0));
            const double mh = h.mean();
            const double mhx = h.cwiseProduct(xhat.row(r)).mean();
            dx.row(r) = ((h.array() - mh - xhat.row(r).array() * mhx) * inv_std(r)).matrix();
        }
        gr.accumulate(ix, dx);
    });
}

Var slice_rows(Var a, Index r0, Index n) {
    Graph* g = a.graph();
    require(r0 >= 0 && n >= 1 && r0 + n <= a.rows(), "slice_rows: range out of bounds");
    Matrix out = a.value().middleRows(r0, n);
    const int ia = a.index();
    const Index rows = a.rows(), cols = a.cols();
    const Var parents[] = {a};
    return g->add_op(std::move(out), parents, [ia, r0, n, rows, cols](Graph& gr, int self) {
        Matrix dx = Matrix::Zero(rows, cols);
        dx.middleRows(r0, n) = gr.grad_of(self);
        gr.accumulate(ia, dx);
    });
}

Var slice_cols(Var a, Index c0, Index n) {
    Graph* g = a.graph();
    require(c0 >= 0 && n >= 1 && c0 + n <= a.cols(), "slice_cols: range out of bounds");
    Matrix out = a.value().middleCols(c0, n);
    const int ia = a.index();
    const Index rows = a.rows(), cols = a.cols();
    const Var parents[] = {a};
    return g->add_op(std::move(out), parents, [ia, c0, n, rows, cols](Graph& gr, int self) {
        Matrix dx = Matrix::Zero(rows, cols);
        dx.middleCols(c0, n) = gr.grad_of(self);
        gr.accumulate(ia, dx);
    });
}

Var concat_rows(std::span<const Var> parts) {
    require(!parts.empty(), "concat_rows: no parts");
    Graph* g = parts[0].graph();
    Index rows = 0;
    const Index cols = parts[0].cols();
    for (const Var& p : parts) {
        require(p.graph() == g, "concat_rows: parts from different graphs");
        require(p.cols() == cols, "concat_rows: column counts differ");
        rows += p.rows();
    }
    Matrix out(rows, cols);
    std::vector<int> idx;
    std::vector<Index> heights;
    Index at = 0;
    for (const Var& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        idx.push_back(p.index());
        heights.push_back(p.rows());
        at += p.rows();
    }
    return g->add_op(std::move(out), parts, [idx, heights](Graph& gr, int self) {
        const Matrix& go = gr.grad_of(self);
        Index at = 0;
        for (std::size_t k = 0; k < idx.size(); ++k) {
            gr.accumulate(idx[k], Matrix(go.middleRows(at, heights[k])));
            at += heights[k];
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    require(!parts.empty(), "concat_cols: no parts");
    Graph* g = parts[0].graph();
    Index cols = 0;
    const Index rows = parts[0].rows();
    for (const Var& p : parts) {
        require(p.graph() == g, "concat_cols: parts from different graphs");
        require(p.rows() == rows, "concat_cols: row counts differ");
        cols += p.cols();
    }
    Matrix out(rows, cols);
    std::vector<int> idx;
    std::vector<Index> widths;
    Index at = 0;
    for (const Var& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        idx.push_back(p.index());
        widths.push_back(p.cols());
        at += p.cols();
    }
    return g->add_op(std::move(out), parts, [idx, widths](Graph& gr, int self) {
        const Matrix& go = gr.grad_of(self);
        Index at = 0;
        for (std::size_t k = 0; k < idx.size(); ++k) {
            gr.accumulate(idx[k], Matrix(go.middleCols(at, widths[k])));
            at += widths[k];
        }
    });
}

Var sum(Var a) {
    Graph* g = a.graph();
    Matrix out = scalar1x1(a.value().sum());
    check_value(*g, out, "sum");
    const int ia = a.index();
    const Index rows = a.rows(), cols = a.cols();
    const Var parents[] = {a};
    return g->add_op(std::move(out), parents, [ia, rows, cols](Graph& gr, int self) {
        gr.accumulate(ia, Matrix(Matrix::Constant(rows, cols, gr.grad_of(self)(0, 0))));
    });
}

Var mean(Var a) {
    Graph* g = a.graph();
    Matrix out = scalar1x1(a.value().mean());
    check_value(*g, out, "mean");
    const int ia = a.index();
    const Index rows = a.rows(), cols = a.cols();
    const double inv = 1.0 / static_cast<double>(rows * cols);
    const Var parents[] = {a};
    return g->add_op(std::move(out), parents, [ia, rows, cols, inv](Graph& gr, int self) {
        gr.accumulate(ia, Matrix(Matrix::Constant(rows, cols, gr.grad_of(self)(0, 0) * inv)));
    });
}

}  // namespace neuroencode::grad
