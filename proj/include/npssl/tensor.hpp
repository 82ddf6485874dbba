#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

namespace npssl {

using NodeId = std::int32_t;
constexpr NodeId kNoNode = -1;

// Dense row-major array of doubles. Rank 2 for matrices/vectors (vectors are
// 1xN rows, scalars 1x1), rank 4 {N,C,H,W} for image batches.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor row(std::vector<double> v);
    static Tensor zeros(std::size_t rows, std::size_t cols);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    double& at(std::size_t r, std::size_t c);
    double at(std::size_t r, std::size_t c) const;
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

enum class Op : std::uint8_t {
    Leaf,
    MatMul,
    Add,        // equal shapes, or rhs 1xC broadcast over rows
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Logistic,
    Relu,
    Sqrt,
    SoftmaxRows,
    LogSoftmaxRows,
    MeanRows,   // column means; accumulation order canonicalized by sorting
    SumAll,
    ConcatCols,
    ConcatRows,
    Scale,      // aux.c * x
    Offset,     // x + aux.c
    RepeatRows, // tile a 1xN row into aux.n rows
    Conv2d,     // aux.n = stride, aux.m = zero padding
    AvgPool2d,  // aux.n = kernel/stride
    GlobalAvgPool,
};

const char* op_name(Op op);

// Value-level forward ops (no recording). The graph and the inference paths
// both route through these, so replay is bit-identical by construction.
namespace ops {
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor logistic(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor mean_rows(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor concat_cols(const std::vector<const Tensor*>& parts);
Tensor concat_rows(const std::vector<const Tensor*>& parts);
Tensor scale(const Tensor& a, double c);
Tensor offset(const Tensor& a, double c);
Tensor repeat_rows(const Tensor& a, std::size_t n);
Tensor conv2d(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad);
Tensor avg_pool2d(const Tensor& x, std::size_t k);
Tensor global_avg_pool(const Tensor& x);
}  // namespace ops

// Recorded computation for reverse-mode differentiation. Nodes are appended
// in execution order, which is already a topological order; backward walks it
// in reverse. Single-threaded during record/backward.
class Graph {
public:
    struct Aux {
        double c = 0.0;       // Scale/Offset constant
        std::size_t n = 0;    // RepeatRows count, conv stride, pool kernel
        std::size_t m = 0;    // conv padding
    };

    struct Node {
        Op op = Op::Leaf;
        std::vector<NodeId> inputs;
        Tensor value;
        Aux aux;
    };

    NodeId leaf(Tensor value);
    NodeId apply(Op op, const std::vector<NodeId>& inputs, Aux aux);
    NodeId apply(Op op, const std::vector<NodeId>& inputs) { return apply(op, inputs, Aux{}); }

    NodeId matmul(NodeId a, NodeId b) { return apply(Op::MatMul, {a, b}); }
    NodeId add(NodeId a, NodeId b) { return apply(Op::Add, {a, b}); }
    NodeId sub(NodeId a, NodeId b) { return apply(Op::Sub, {a, b}); }
    NodeId mul(NodeId a, NodeId b) { return apply(Op::Mul, {a, b}); }
    NodeId div(NodeId a, NodeId b) { return apply(Op::Div, {a, b}); }
    NodeId exp(NodeId a) { return apply(Op::Exp, {a}); }
    NodeId log(NodeId a) { return apply(Op::Log, {a}); }
    NodeId logistic(NodeId a) { return apply(Op::Logistic, {a}); }
    NodeId relu(NodeId a) { return apply(Op::Relu, {a}); }
    NodeId sqrt(NodeId a) { return apply(Op::Sqrt, {a}); }
    NodeId softmax_rows(NodeId a) { return apply(Op::SoftmaxRows, {a}); }
    NodeId log_softmax_rows(NodeId a) { return apply(Op::LogSoftmaxRows, {a}); }
    NodeId mean_rows(NodeId a) { return apply(Op::MeanRows, {a}); }
    NodeId sum_all(NodeId a) { return apply(Op::SumAll, {a}); }
    NodeId concat_cols(const std::vector<NodeId>& parts) { return apply(Op::ConcatCols, parts); }
    NodeId concat_rows(const std::vector<NodeId>& parts) { return apply(Op::ConcatRows, parts); }
    NodeId scale(NodeId a, double c) { return apply(Op::Scale, {a}, Aux{c, 0, 0}); }
    NodeId offset(NodeId a, double c) { return apply(Op::Offset, {a}, Aux{c, 0, 0}); }
    NodeId repeat_rows(NodeId a, std::size_t n) { return apply(Op::RepeatRows, {a}, Aux{0, n, 0}); }
    NodeId conv2d(NodeId x, NodeId k, std::size_t stride, std::size_t pad) {
        return apply(Op::Conv2d, {x, k}, Aux{0, stride, pad});
    }
    NodeId avg_pool2d(NodeId x, std::size_t k) { return apply(Op::AvgPool2d, {x}, Aux{0, k, 0}); }
    NodeId global_avg_pool(NodeId x) { return apply(Op::GlobalAvgPool, {x}); }

    const Tensor& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return nodes_.size(); }

    // Gradients of a scalar loss with respect to every leaf. Leaves with no
    // path to the loss map to zero tensors of their own shape.
    std::unordered_map<NodeId, Tensor> backward(NodeId loss) const;

    // Recomputes every non-leaf value from the recorded leaves, in order.
    std::vector<Tensor> replay() const;

    // Leaf ids reachable backwards from `id`.
    std::vector<NodeId> ancestor_leaves(NodeId id) const;

private:
    std::deque<Node> nodes_;
};

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued function of one tensor. eps must lie in (0, 1e-2].
using LossBuilder = std::function<NodeId(Graph&, NodeId)>;
double grad_check(const LossBuilder& f, const Tensor& point, double eps);

// Same check over a list of tensors (e.g. a whole parameter set).
using MultiLossBuilder = std::function<NodeId(Graph&, const std::vector<NodeId>&)>;
double grad_check_many(const MultiLossBuilder& f, const std::vector<Tensor>& points, double eps);

}  // namespace npssl
