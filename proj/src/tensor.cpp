#include "npssl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace npssl {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) throw std::invalid_argument("tensor: zero dimension in shape");
        n *= d;
    }
    return n;
}

[[noreturn]] void shape_error(const std::string& what) {
    throw std::invalid_argument("shape mismatch: " + what);
}

std::string shape_str(const Tensor& t) {
    std::string s = "(";
    for (std::size_t i = 0; i < t.shape().size(); ++i) {
        if (i) s += "x";
        s += std::to_string(t.shape()[i]);
    }
    return s + ")";
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) shape_error(std::string(op) + " expects a rank-2 tensor, got " + shape_str(t));
}

void require_rank4(const Tensor& t, const char* op) {
    if (t.rank() != 4) shape_error(std::string(op) + " expects a rank-4 tensor, got " + shape_str(t));
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != data_.size())
        throw std::invalid_argument("tensor: shape/data length mismatch");
}

Tensor Tensor::scalar(double v) { return Tensor({1, 1}, {v}); }

Tensor Tensor::row(std::vector<double> v) {
    std::size_t n = v.size();
    return Tensor({1, n}, std::move(v));
}

Tensor Tensor::zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

std::size_t Tensor::rows() const {
    if (shape_.size() != 2) throw std::invalid_argument("tensor: rows() on non-matrix");
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (shape_.size() != 2) throw std::invalid_argument("tensor: cols() on non-matrix");
    return shape_[1];
}

double& Tensor::at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::MatMul: return "matmul";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Logistic: return "logistic";
        case Op::Relu: return "relu";
        case Op::Sqrt: return "sqrt";
        case Op::SoftmaxRows: return "softmax_rows";
        case Op::LogSoftmaxRows: return "log_softmax_rows";
        case Op::MeanRows: return "mean_rows";
        case Op::SumAll: return "sum_all";
        case Op::ConcatCols: return "concat_cols";
        case Op::ConcatRows: return "concat_rows";
        case Op::Scale: return "scale";
        case Op::Offset: return "offset";
        case Op::RepeatRows: return "repeat_rows";
        case Op::Conv2d: return "conv2d";
        case Op::AvgPool2d: return "avg_pool2d";
        case Op::GlobalAvgPool: return "global_avg_pool";
    }
    return "?";
}

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.cols() != b.rows())
        shape_error("matmul inner dimensions " + shape_str(a) + " * " + shape_str(b));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.at(i, p);
            if (av == 0.0) continue;
            const double* brow = &b.data()[p * n];
            double* orow = &out.data()[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

namespace {
// rhs may be a 1xC row broadcast against an RxC lhs (bias add)
bool row_broadcast(const Tensor& a, const Tensor& b) {
    return a.rank() == 2 && b.rank() == 2 && b.rows() == 1 && a.cols() == b.cols() && a.rows() != 1;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, const char* name, F f) {
    if (a.same_shape(b)) {
        Tensor out = a;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
        return out;
    }
    shape_error(std::string(name) + " on " + shape_str(a) + " vs " + shape_str(b));
}

template <class F>
Tensor map(const Tensor& a, F f) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i]);
    return out;
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    if (row_broadcast(a, b)) {
        Tensor out = a;
        const std::size_t n = a.cols();
        for (std::size_t r = 0; r < a.rows(); ++r)
            for (std::size_t c = 0; c < n; ++c) out.data()[r * n + c] += b[c];
        return out;
    }
    return zip(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return zip(a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return zip(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    for (double v : b.data())
        if (v == 0.0) throw std::domain_error("div: zero divisor");
    return zip(a, b, "div", [](double x, double y) { return x / y; });
}

Tensor exp(const Tensor& a) {
    return map(a, [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
    for (double v : a.data())
        if (!(v > 0.0)) throw std::domain_error("log: non-positive input");
    return map(a, [](double x) { return std::log(x); });
}

Tensor logistic(const Tensor& a) {
    return map(a, [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
    });
}

Tensor relu(const Tensor& a) {
    return map(a, [](double x) { return x > 0.0 ? x : 0.0; });
}

Tensor sqrt(const Tensor& a) {
    for (double v : a.data())
        if (v < 0.0) throw std::domain_error("sqrt: negative input");
    return map(a, [](double x) { return std::sqrt(x); });
}

Tensor softmax_rows(const Tensor& a) {
    require_rank2(a, "softmax_rows");
    Tensor out = a;
    const std::size_t n = a.cols();
    for (std::size_t r = 0; r < a.rows(); ++r) {
        double* row = &out.data()[r * n];
        const double mx = *std::max_element(row, row + n);
        double sum = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        for (std::size_t c = 0; c < n; ++c) row[c] /= sum;
    }
    return out;
}

Tensor log_softmax_rows(const Tensor& a) {
    require_rank2(a, "log_softmax_rows");
    Tensor out = a;
    const std::size_t n = a.cols();
    for (std::size_t r = 0; r < a.rows(); ++r) {
        double* row = &out.data()[r * n];
        const double mx = *std::max_element(row, row + n);
        double sum = 0.0;
        for (std::size_t c = 0; c < n; ++c) sum += std::exp(row[c] - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t c = 0; c < n; ++c) row[c] -= lse;
    }
    return out;
}

// Column means with the summands sorted first, so the result is exactly
// invariant under any permutation of the rows.
Tensor mean_rows(const Tensor& a) {
    require_rank2(a, "mean_rows");
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out({1, n});
    std::vector<double> col(m);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t r = 0; r < m; ++r) col[r] = a.at(r, c);
        std::sort(col.begin(), col.end());
        double sum = 0.0;
        for (double v : col) sum += v;
        out[c] = sum / static_cast<double>(m);
    }
    return out;
}

Tensor sum_all(const Tensor& a) {
    double sum = 0.0;
    for (double v : a.data()) sum += v;
    return Tensor::scalar(sum);
}

Tensor concat_cols(const std::vector<const Tensor*>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::size_t m = parts[0]->rows();
    std::size_t total = 0;
    for (const Tensor* p : parts) {
        require_rank2(*p, "concat_cols");
        if (p->rows() != m) shape_error("concat_cols row counts differ");
        total += p->cols();
    }
    Tensor out({m, total});
    for (std::size_t r = 0; r < m; ++r) {
        std::size_t off = 0;
        for (const Tensor* p : parts) {
            for (std::size_t c = 0; c < p->cols(); ++c) out.at(r, off + c) = p->at(r, c);
            off += p->cols();
        }
    }
    return out;
}

Tensor concat_rows(const std::vector<const Tensor*>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const std::size_t n = parts[0]->cols();
    std::size_t total = 0;
    for (const Tensor* p : parts) {
        require_rank2(*p, "concat_rows");
        if (p->cols() != n) shape_error("concat_rows column counts differ");
        total += p->rows();
    }
    Tensor out({total, n});
    std::size_t off = 0;
    for (const Tensor* p : parts) {
        std::copy(p->data().begin(), p->data().end(), out.data().begin() + off * n);
        off += p->rows();
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    return map(a, [c](double x) { return c * x; });
}

Tensor offset(const Tensor& a, double c) {
    return map(a, [c](double x) { return x + c; });
}

Tensor repeat_rows(const Tensor& a, std::size_t n) {
    require_rank2(a, "repeat_rows");
    if (a.rows() != 1) shape_error("repeat_rows expects a 1xN row");
    if (n == 0) throw std::invalid_argument("repeat_rows: zero count");
    Tensor out({n, a.cols()});
    for (std::size_t r = 0; r < n; ++r)
        std::copy(a.data().begin(), a.data().end(), out.data().begin() + r * a.cols());
    return out;
}

Tensor conv2d(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad) {
    require_rank4(x, "conv2d");
    require_rank4(k, "conv2d");
    const std::size_t N = x.shape()[0], Ci = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::size_t Co = k.shape()[0], Kci = k.shape()[1], Kh = k.shape()[2], Kw = k.shape()[3];
    if (Kci != Ci) shape_error("conv2d channel counts differ");
    if (stride == 0) throw std::invalid_argument("conv2d: zero stride");
    if (H + 2 * pad < Kh || W + 2 * pad < Kw) shape_error("conv2d kernel larger than padded input");
    const std::size_t Ho = (H + 2 * pad - Kh) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - Kw) / stride + 1;
    Tensor out({N, Co, Ho, Wo});
    auto xat = [&](std::size_t n, std::size_t c, std::ptrdiff_t i, std::ptrdiff_t j) -> double {
        if (i < 0 || j < 0 || i >= static_cast<std::ptrdiff_t>(H) || j >= static_cast<std::ptrdiff_t>(W))
            return 0.0;
        return x.data()[((n * Ci + c) * H + i) * W + j];
    };
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Co; ++co)
            for (std::size_t oi = 0; oi < Ho; ++oi)
                for (std::size_t oj = 0; oj < Wo; ++oj) {
                    double acc = 0.0;
                    for (std::size_t ci = 0; ci < Ci; ++ci)
                        for (std::size_t ki = 0; ki < Kh; ++ki)
                            for (std::size_t kj = 0; kj < Kw; ++kj) {
                                const std::ptrdiff_t ii =
                                    static_cast<std::ptrdiff_t>(oi * stride + ki) - static_cast<std::ptrdiff_t>(pad);
                                const std::ptrdiff_t jj =
                                    static_cast<std::ptrdiff_t>(oj * stride + kj) - static_cast<std::ptrdiff_t>(pad);
                                acc += xat(n, ci, ii, jj) * k.data()[((co * Ci + ci) * Kh + ki) * Kw + kj];
                            }
                    out.data()[((n * Co + co) * Ho + oi) * Wo + oj] = acc;
                }
    return out;
}

Tensor avg_pool2d(const Tensor& x, std::size_t k) {
    require_rank4(x, "avg_pool2d");
    if (k == 0) throw std::invalid_argument("avg_pool2d: zero kernel");
    const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (H % k != 0 || W % k != 0) shape_error("avg_pool2d input not divisible by kernel");
    const std::size_t Ho = H / k, Wo = W / k;
    Tensor out({N, C, Ho, Wo});
    const double inv = 1.0 / static_cast<double>(k * k);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oi = 0; oi < Ho; ++oi)
                for (std::size_t oj = 0; oj < Wo; ++oj) {
                    double acc = 0.0;
                    for (std::size_t ki = 0; ki < k; ++ki)
                        for (std::size_t kj = 0; kj < k; ++kj)
                            acc += x.data()[((n * C + c) * H + oi * k + ki) * W + oj * k + kj];
                    out.data()[((n * C + c) * Ho + oi) * Wo + oj] = acc * inv;
                }
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    require_rank4(x, "global_avg_pool");
    const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    Tensor out({N, C});
    const double inv = 1.0 / static_cast<double>(H * W);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            double acc = 0.0;
            const double* base = &x.data()[(n * C + c) * H * W];
            for (std::size_t i = 0; i < H * W; ++i) acc += base[i];
            out.data()[n * C + c] = acc * inv;
        }
    return out;
}

}  // namespace ops

namespace {

Tensor run_op(Op op, const std::vector<const Tensor*>& in, const Graph::Aux& aux) {
    switch (op) {
        case Op::Leaf: throw std::logic_error("run_op on leaf");
        case Op::MatMul: return ops::matmul(*in[0], *in[1]);
        case Op::Add: return ops::add(*in[0], *in[1]);
        case Op::Sub: return ops::sub(*in[0], *in[1]);
        case Op::Mul: return ops::mul(*in[0], *in[1]);
        case Op::Div: return ops::div(*in[0], *in[1]);
        case Op::Exp: return ops::exp(*in[0]);
        case Op::Log: return ops::log(*in[0]);
        case Op::Logistic: return ops::logistic(*in[0]);
        case Op::Relu: return ops::relu(*in[0]);
        case Op::Sqrt: return ops::sqrt(*in[0]);
        case Op::SoftmaxRows: return ops::softmax_rows(*in[0]);
        case Op::LogSoftmaxRows: return ops::log_softmax_rows(*in[0]);
        case Op::MeanRows: return ops::mean_rows(*in[0]);
        case Op::SumAll: return ops::sum_all(*in[0]);
        case Op::ConcatCols: return ops::concat_cols(in);
        case Op::ConcatRows: return ops::concat_rows(in);
        case Op::Scale: return ops::scale(*in[0], aux.c);
        case Op::Offset: return ops::offset(*in[0], aux.c);
        case Op::RepeatRows: return ops::repeat_rows(*in[0], aux.n);
        case Op::Conv2d: return ops::conv2d(*in[0], *in[1], aux.n, aux.m);
        case Op::AvgPool2d: return ops::avg_pool2d(*in[0], aux.n);
        case Op::GlobalAvgPool: return ops::global_avg_pool(*in[0]);
    }
    throw std::logic_error("run_op: unknown op");
}

void accumulate(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

NodeId Graph::leaf(Tensor value) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::apply(Op op, const std::vector<NodeId>& inputs, Aux aux) {
    if (op == Op::Leaf) throw std::invalid_argument("apply: use leaf()");
    std::vector<const Tensor*> in;
    in.reserve(inputs.size());
    for (NodeId id : inputs) {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
            throw std::invalid_argument("apply: bad node id");
        in.push_back(&nodes_[static_cast<std::size_t>(id)].value);
    }
    Node n;
    n.op = op;
    n.inputs = inputs;
    n.aux = aux;
    n.value = run_op(op, in, aux);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

std::unordered_map<NodeId, Tensor> Graph::backward(NodeId loss) const {
    if (loss < 0 || static_cast<std::size_t>(loss) >= nodes_.size())
        throw std::invalid_argument("backward: bad loss id");
    const Tensor& lv = nodes_[static_cast<std::size_t>(loss)].value;
    if (lv.size() != 1) throw std::invalid_argument("backward: loss must be scalar");

    std::vector<Tensor> grads(nodes_.size());
    std::vector<bool> touched(nodes_.size(), false);
    auto grad_of = [&](NodeId id) -> Tensor& {
        auto i = static_cast<std::size_t>(id);
        if (!touched[i]) {
            grads[i] = Tensor(nodes_[i].value.shape());
            touched[i] = true;
        }
        return grads[i];
    };

    grad_of(loss)[0] = 1.0;

    for (std::size_t idx = static_cast<std::size_t>(loss) + 1; idx-- > 0;) {
        if (!touched[idx]) continue;
        const Node& n = nodes_[idx];
        if (n.op == Op::Leaf) continue;
        const Tensor& g = grads[idx];
        const Tensor& y = n.value;
        auto in = [&](std::size_t i) -> const Tensor& {
            return nodes_[static_cast<std::size_t>(n.inputs[i])].value;
        };

        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::MatMul: {
                const Tensor& a = in(0);
                const Tensor& b = in(1);
                Tensor& da = grad_of(n.inputs[0]);
                Tensor& db = grad_of(n.inputs[1]);
                const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
                // dA = g . B^T via a transposed copy of B, so the inner loop
                // runs over independent contiguous accumulators
                {
                    std::vector<double> bt(p * k);
                    for (std::size_t j = 0; j < k; ++j)
                        for (std::size_t c = 0; c < p; ++c) bt[c * k + j] = b.data()[j * p + c];
                    for (std::size_t i = 0; i < m; ++i) {
                        const double* grow = &g.data()[i * p];
                        double* darow = &da.data()[i * k];
                        for (std::size_t c = 0; c < p; ++c) {
                            const double gv = grow[c];
                            if (gv == 0.0) continue;
                            const double* btrow = &bt[c * k];
                            for (std::size_t j = 0; j < k; ++j) darow[j] += gv * btrow[j];
                        }
                    }
                }
                // dB = A^T . g
                for (std::size_t r = 0; r < m; ++r) {
                    const double* arow = &a.data()[r * k];
                    const double* grow = &g.data()[r * p];
                    for (std::size_t i = 0; i < k; ++i) {
                        const double av = arow[i];
                        if (av == 0.0) continue;
                        double* dbrow = &db.data()[i * p];
                        for (std::size_t j = 0; j < p; ++j) dbrow[j] += av * grow[j];
                    }
                }
                break;
            }
            case Op::Add: {
                accumulate(grad_of(n.inputs[0]), g);
                const Tensor& b = in(1);
                Tensor& db = grad_of(n.inputs[1]);
                if (b.same_shape(g)) {
                    accumulate(db, g);
                } else {  // row broadcast: column sums, ascending row order
                    const std::size_t cols = b.cols();
                    for (std::size_t c = 0; c < cols; ++c) {
                        double acc = 0.0;
                        for (std::size_t r = 0; r < g.rows(); ++r) acc += g.at(r, c);
                        db[c] += acc;
                    }
                }
                break;
            }
            case Op::Sub: {
                accumulate(grad_of(n.inputs[0]), g);
                Tensor& db = grad_of(n.inputs[1]);
                for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
                break;
            }
            case Op::Mul: {
                const Tensor& a = in(0);
                const Tensor& b = in(1);
                Tensor& da = grad_of(n.inputs[0]);
                Tensor& db = grad_of(n.inputs[1]);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    da[i] += g[i] * b[i];
                    db[i] += g[i] * a[i];
                }
                break;
            }
            case Op::Div: {
                const Tensor& a = in(0);
                const Tensor& b = in(1);
                Tensor& da = grad_of(n.inputs[0]);
                Tensor& db = grad_of(n.inputs[1]);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    da[i] += g[i] / b[i];
                    db[i] -= g[i] * a[i] / (b[i] * b[i]);
                }
                break;
            }
            case Op::Exp: {
                Tensor& da = grad_of(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i];
                break;
            }
            case Op::Log: {
                const Tensor& a = in(0);
                Tensor& da = grad_of(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] / a[i];
                break;
            }
            case Op::Logistic: {
                Tensor& da = grad_of(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i] * (1.0 - y[i]);
                break;
            }
            case Op::Relu: {
                const Tensor& a = in(0);
                Tensor& da = grad_of(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (a[i] > 0.0) da[i] += g[i];
                break;
            }
            case Op::Sqrt: {
                Tensor& da = grad_of(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * 0.5 / y[i];
                break;
            }
            case Op::SoftmaxRows: {
                Tensor& da = grad_of(n.inputs[0]);
                const std::size_t cols = y.cols();
                for (std::size_t r = 0; r < y.rows(); ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) dot += g.at(r, c) * y.at(r, c);
                    for (std::size_t c = 0; c < cols; ++c)
                        da.at(r, c) += y.at(r, c) * (g.at(r, c) - dot);
                }
                break;
            }
            case Op::LogSoftmaxRows: {
                Tensor& da = grad_of(n.inputs[0]);
                const std::size_t cols = y.cols();
                for (std::size_t r = 0; r < y.rows(); ++r) {
                    double sum = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) sum += g.at(r, c);
                    for (std::size_t c = 0; c < cols; ++c)
                        da.at(r, c) += g.at(r, c) - std::exp(y.at(r, c)) * sum;
                }
                break;
            }
            case Op::MeanRows: {
                const Tensor& a = in(0);
                Tensor& da = grad_of(n.inputs[0]);
                const double inv = 1.0 / static_cast<double>(a.rows());
                for (std::size_t r = 0; r < a.rows(); ++r)
                    for (std::size_t c = 0; c < a.cols(); ++c) da.at(r, c) += g[c] * inv;
                break;
            }
            case Op::SumAll: {
                Tensor& da = grad_of(n.inputs[0]);
                for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[0];
                break;
            }
            case Op::ConcatCols: {
                std::size_t off = 0;
                for (NodeId inp : n.inputs) {
                    const Tensor& part = nodes_[static_cast<std::size_t>(inp)].value;
                    Tensor& dp = grad_of(inp);
                    for (std::size_t r = 0; r < part.rows(); ++r)
                        for (std::size_t c = 0; c < part.cols(); ++c)
                            dp.at(r, c) += g.at(r, off + c);
                    off += part.cols();
                }
                break;
            }
            case Op::ConcatRows: {
                std::size_t off = 0;
                for (NodeId inp : n.inputs) {
                    const Tensor& part = nodes_[static_cast<std::size_t>(inp)].value;
                    Tensor& dp = grad_of(inp);
                    for (std::size_t i = 0; i < part.size(); ++i)
                        dp[i] += g[off * part.cols() + i];
                    off += part.rows();
                }
                break;
            }
            case Op::Scale: {
                Tensor& da = grad_of(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * n.aux.c;
                break;
            }
            case Op::Offset: {
                accumulate(grad_of(n.inputs[0]), g);
                break;
            }
            case Op::RepeatRows: {
                Tensor& da = grad_of(n.inputs[0]);
                const std::size_t cols = da.cols();
                for (std::size_t c = 0; c < cols; ++c) {
                    double acc = 0.0;
                    for (std::size_t r = 0; r < g.rows(); ++r) acc += g.at(r, c);
                    da[c] += acc;
                }
                break;
            }
            case Op::Conv2d: {
                const Tensor& x = in(0);
                const Tensor& k = in(1);
                Tensor& dx = grad_of(n.inputs[0]);
                Tensor& dk = grad_of(n.inputs[1]);
                const std::size_t N = x.shape()[0], Ci = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
                const std::size_t Co = k.shape()[0], Kh = k.shape()[2], Kw = k.shape()[3];
                const std::size_t Ho = y.shape()[2], Wo = y.shape()[3];
                const std::size_t stride = n.aux.n, pad = n.aux.m;
                for (std::size_t b = 0; b < N; ++b)
                    for (std::size_t co = 0; co < Co; ++co)
                        for (std::size_t oi = 0; oi < Ho; ++oi)
                            for (std::size_t oj = 0; oj < Wo; ++oj) {
                                const double gv = g.data()[((b * Co + co) * Ho + oi) * Wo + oj];
                                if (gv == 0.0) continue;
                                for (std::size_t ci = 0; ci < Ci; ++ci)
                                    for (std::size_t ki = 0; ki < Kh; ++ki)
                                        for (std::size_t kj = 0; kj < Kw; ++kj) {
                                            const std::ptrdiff_t ii =
                                                static_cast<std::ptrdiff_t>(oi * stride + ki) -
                                                static_cast<std::ptrdiff_t>(pad);
                                            const std::ptrdiff_t jj =
                                                static_cast<std::ptrdiff_t>(oj * stride + kj) -
                                                static_cast<std::ptrdiff_t>(pad);
                                            if (ii < 0 || jj < 0 || ii >= static_cast<std::ptrdiff_t>(H) ||
                                                jj >= static_cast<std::ptrdiff_t>(W))
                                                continue;
                                            const std::size_t xi = ((b * Ci + ci) * H + ii) * W + jj;
                                            const std::size_t kidx = ((co * Ci + ci) * Kh + ki) * Kw + kj;
                                            dx.data()[xi] += gv * k.data()[kidx];
                                            dk.data()[kidx] += gv * x.data()[xi];
                                        }
                            }
                break;
            }
            case Op::AvgPool2d: {
                const Tensor& x = in(0);
                Tensor& dx = grad_of(n.inputs[0]);
                const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
                const std::size_t kk = n.aux.n, Ho = H / kk, Wo = W / kk;
                const double inv = 1.0 / static_cast<double>(kk * kk);
                for (std::size_t b = 0; b < N; ++b)
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t oi = 0; oi < Ho; ++oi)
                            for (std::size_t oj = 0; oj < Wo; ++oj) {
                                const double gv = g.data()[((b * C + c) * Ho + oi) * Wo + oj] * inv;
                                for (std::size_t ki = 0; ki < kk; ++ki)
                                    for (std::size_t kj = 0; kj < kk; ++kj)
                                        dx.data()[((b * C + c) * H + oi * kk + ki) * W + oj * kk + kj] += gv;
                            }
                break;
            }
            case Op::GlobalAvgPool: {
                const Tensor& x = in(0);
                Tensor& dx = grad_of(n.inputs[0]);
                const std::size_t N = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
                const double inv = 1.0 / static_cast<double>(HW);
                for (std::size_t b = 0; b < N; ++b)
                    for (std::size_t c = 0; c < C; ++c) {
                        const double gv = g.data()[b * C + c] * inv;
                        double* base = &dx.data()[(b * C + c) * HW];
                        for (std::size_t i = 0; i < HW; ++i) base[i] += gv;
                    }
                break;
            }
        }
    }

    std::unordered_map<NodeId, Tensor> result;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].op != Op::Leaf) continue;
        const NodeId id = static_cast<NodeId>(i);
        result.emplace(id, touched[i] ? std::move(grads[i]) : Tensor(nodes_[i].value.shape()));
    }
    return result;
}

std::vector<Tensor> Graph::replay() const {
    std::vector<Tensor> values;
    values.reserve(nodes_.size());
    for (const Node& n : nodes_) {
        if (n.op == Op::Leaf) {
            values.push_back(n.value);
            continue;
        }
        std::vector<const Tensor*> in;
        in.reserve(n.inputs.size());
        for (NodeId id : n.inputs) in.push_back(&values[static_cast<std::size_t>(id)]);
        values.push_back(run_op(n.op, in, n.aux));
    }
    return values;
}

std::vector<NodeId> Graph::ancestor_leaves(NodeId id) const {
    std::vector<bool> seen(nodes_.size(), false);
    std::vector<NodeId> stack{id}, leaves;
    while (!stack.empty()) {
        const NodeId cur = stack.back();
        stack.pop_back();
        auto i = static_cast<std::size_t>(cur);
        if (seen[i]) continue;
        seen[i] = true;
        if (nodes_[i].op == Op::Leaf) {
            leaves.push_back(cur);
            continue;
        }
        for (NodeId inp : nodes_[i].inputs) stack.push_back(inp);
    }
    std::sort(leaves.begin(), leaves.end());
    return leaves;
}

double grad_check(const LossBuilder& f, const Tensor& point, double eps) {
    return grad_check_many(
        [&f](Graph& g, const std::vector<NodeId>& ids) { return f(g, ids[0]); }, {point}, eps);
}

double grad_check_many(const MultiLossBuilder& f, const std::vector<Tensor>& points, double eps) {
    if (!(eps > 0.0) || eps > 1e-2) throw std::invalid_argument("grad_check: eps out of (0, 1e-2]");

    auto eval = [&](const std::vector<Tensor>& pts) {
        Graph g;
        std::vector<NodeId> ids;
        ids.reserve(pts.size());
        for (const Tensor& p : pts) ids.push_back(g.leaf(p));
        const NodeId loss = f(g, ids);
        return g.value(loss)[0];
    };

    Graph g;
    std::vector<NodeId> ids;
    ids.reserve(points.size());
    for (const Tensor& p : points) ids.push_back(g.leaf(p));
    const NodeId loss = f(g, ids);
    auto grads = g.backward(loss);

    double worst = 0.0;
    std::vector<Tensor> work = points;
    for (std::size_t t = 0; t < points.size(); ++t) {
        const Tensor& analytic = grads.at(ids[t]);
        for (std::size_t i = 0; i < work[t].size(); ++i) {
            const double saved = work[t][i];
            work[t][i] = saved + eps;
            const double hi = eval(work);
            work[t][i] = saved - eps;
            const double lo = eval(work);
            work[t][i] = saved;
            const double numeric = (hi - lo) / (2.0 * eps);
            const double a = analytic[i];
            const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
            if (!(err <= worst)) worst = err;  // NaN propagates as failure
        }
    }
    return worst;
}

}  // namespace npssl
