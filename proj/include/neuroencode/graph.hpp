#pragma once

#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "neuroencode/types.hpp"

namespace neuroencode::grad {

class Graph;

// Handle to a node in a Graph. Cheap to copy; only valid while the graph is
// alive.
class Var {
public:
    Var() = default;
    bool valid() const { return g_ != nullptr; }
    Graph* graph() const { return g_; }
    int index() const { return idx_; }
    const Matrix& value() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    bool requires_grad() const;

private:
    friend class Graph;
    Var(Graph* g, int idx) : g_(g), idx_(idx) {}
    Graph* g_ = nullptr;
    int idx_ = -1;
};

// Define-by-run tape. Nodes are evaluated eagerly at construction, so the
// creation order is a topological order. Graphs are rebuilt per batch and are
// not thread-safe; independent graphs may live on different threads.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, int self)>;

    explicit Graph(bool check_finite = true) : check_finite_(check_finite) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(Matrix value, bool requires_grad = false);
    Var constant(double v);
    Var constant(Matrix value) { return leaf(std::move(value), false); }

    // Extension point for ops with bespoke gradients. `fn` must accumulate
    // into the parents via accumulate(); it is only stored when some parent
    // requires a gradient.
    Var add_op(Matrix value, std::span<const Var> parents, BackwardFn fn);

    // Reverse pass from a scalar (1x1) loss. Gradients of earlier backward
    // calls are discarded. Leaves that do not reach the loss keep zero
    // gradients.
    void backward(Var loss);

    const Matrix& value(int idx) const { return nodes_[static_cast<std::size_t>(idx)].value; }
    bool requires_grad(int idx) const { return nodes_[static_cast<std::size_t>(idx)].requires_grad; }

    // Upstream gradient of node idx during its backward call.
    const Matrix& grad_of(int idx) const { return nodes_[static_cast<std::size_t>(idx)].grad; }

    // Gradient of the last backward() w.r.t. a node; zeros when unreached.
    Matrix gradient(Var v) const;

    // Adds g to the stored gradient of node idx (used by backward closures).
    void accumulate(int idx, const Matrix& g);

    int size() const { return static_cast<int>(nodes_.size()); }
    bool check_finite() const { return check_finite_; }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        std::vector<int> parents;
        BackwardFn backward;
        bool requires_grad = false;
        bool grad_ready = false;
    };

    std::deque<Node> nodes_;
    bool check_finite_ = true;
};

// --- operations -------------------------------------------------------------
// Elementwise ops broadcast a 1x1 operand against any shape; otherwise shapes
// must match exactly.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
// row is 1 x n, broadcast over the rows of a; gradient to row sums over rows.
Var add_rows(Var a, Var row);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var gelu(Var a);
Var tanh(Var a);
Var softmax_rows(Var a);
// gain and bias are 1 x n row vectors; epsilon 1e-5 sits inside the sqrt.
Var layer_norm(Var x, Var gain, Var bias);
Var slice_rows(Var a, Index r0, Index n);
Var slice_cols(Var a, Index c0, Index n);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var sum(Var a);
Var mean(Var a);

constexpr double kLayerNormEps = 1e-5;

}  // namespace neuroencode::grad
