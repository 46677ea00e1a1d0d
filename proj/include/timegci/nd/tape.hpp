#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "tensor.hpp"

namespace timegci::nd {

using NodeId = std::uint32_t;

namespace detail {

inline double stable_sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double stable_softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }

}  // namespace detail

// Reverse-mode tape over flat value/gradient arenas. Nodes are appended in
// forward (topological) order; backward() walks them in reverse. Leaves
// snapshot the tensors they are built from, so parameters may be mutated
// freely between tapes. reset() keeps capacity so a tape can be reused
// across training steps without reallocating.
class Tape {
public:
    enum class Op : std::uint8_t {
        leaf,
        affine,   // y = W x + b          a=W, b=x, c=bias
        matvec,   // y = W x              a=W, b=x
        add,
        sub,
        mul,      // elementwise
        concat,   // y = [a; b]
        slice,    // y = a[aux0 .. aux0+len)
        tanh_op,
        sigmoid,
        elu,
        softplus,
        exp_op,
        log_op,
        square,
        neg,
        abs_op,
        clamp,    // bounds in s0, s1
        scale,    // y = s0 * a
        add_const,// y = a + s0
        sum,      // scalar
    };

    struct Node {
        Op op;
        NodeId a = 0, b = 0, c = 0;
        std::uint32_t off = 0;
        std::uint32_t len = 0;
        std::uint32_t aux0 = 0, aux1 = 0;
        double s0 = 0.0, s1 = 0.0;
    };

    void reset() {
        nodes_.clear();
        values_.clear();
        grads_.clear();
    }

    std::size_t node_count() const { return nodes_.size(); }

    // ---- leaves -------------------------------------------------------

    NodeId leaf(std::span<const double> v) {
        NodeId id = push(Op::leaf, 0, 0, 0, static_cast<std::uint32_t>(v.size()));
        double* out = val(id);
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i];
        return id;
    }

    NodeId leaf(const Tensor& t) { return leaf(t.data()); }

    NodeId scalar(double v) { return leaf(std::span<const double>(&v, 1)); }

    // ---- ops ----------------------------------------------------------

    NodeId affine(NodeId w, NodeId x, NodeId bias, std::uint32_t rows, std::uint32_t cols) {
        check_len(w, rows * cols, "affine: weight");
        check_len(x, cols, "affine: input");
        check_len(bias, rows, "affine: bias");
        NodeId id = push(Op::affine, w, x, bias, rows, rows, cols);
        const double* wm = val(w);
        const double* xv = val(x);
        const double* bv = val(bias);
        double* out = val(id);
        for (std::uint32_t i = 0; i < rows; ++i) {
            double acc = bv[i];
            const double* wr = wm + static_cast<std::size_t>(i) * cols;
            for (std::uint32_t j = 0; j < cols; ++j) acc += wr[j] * xv[j];
            out[i] = acc;
        }
        return id;
    }

    NodeId matvec(NodeId w, NodeId x, std::uint32_t rows, std::uint32_t cols) {
        check_len(w, rows * cols, "matvec: weight");
        check_len(x, cols, "matvec: input");
        NodeId id = push(Op::matvec, w, x, 0, rows, rows, cols);
        const double* wm = val(w);
        const double* xv = val(x);
        double* out = val(id);
        for (std::uint32_t i = 0; i < rows; ++i) {
            double acc = 0.0;
            const double* wr = wm + static_cast<std::size_t>(i) * cols;
            for (std::uint32_t j = 0; j < cols; ++j) acc += wr[j] * xv[j];
            out[i] = acc;
        }
        return id;
    }

    NodeId add(NodeId a, NodeId b) { return binary(Op::add, a, b, [](double x, double y) { return x + y; }); }
    NodeId sub(NodeId a, NodeId b) { return binary(Op::sub, a, b, [](double x, double y) { return x - y; }); }
    NodeId mul(NodeId a, NodeId b) { return binary(Op::mul, a, b, [](double x, double y) { return x * y; }); }

    NodeId concat(NodeId a, NodeId b) {
        const std::uint32_t la = nodes_[a].len, lb = nodes_[b].len;
        NodeId id = push(Op::concat, a, b, 0, la + lb);
        double* out = val(id);
        const double* av = val(a);
        const double* bv = val(b);
        for (std::uint32_t i = 0; i < la; ++i) out[i] = av[i];
        for (std::uint32_t i = 0; i < lb; ++i) out[la + i] = bv[i];
        return id;
    }

    NodeId slice(NodeId a, std::uint32_t offset, std::uint32_t len) {
        if (offset + len > nodes_[a].len) throw std::invalid_argument("Tape::slice: out of range");
        NodeId id = push(Op::slice, a, 0, 0, len, offset);
        double* out = val(id);
        const double* av = val(a) + offset;
        for (std::uint32_t i = 0; i < len; ++i) out[i] = av[i];
        return id;
    }

    NodeId tanh(NodeId a) { return unary(Op::tanh_op, a, [](double x) { return std::tanh(x); }); }
    NodeId sigmoid(NodeId a) { return unary(Op::sigmoid, a, detail::stable_sigmoid); }
    NodeId elu(NodeId a) { return unary(Op::elu, a, detail::elu); }
    NodeId softplus(NodeId a) { return unary(Op::softplus, a, detail::stable_softplus); }
    NodeId exp(NodeId a) { return unary(Op::exp_op, a, [](double x) { return std::exp(x); }); }
    NodeId log(NodeId a) { return unary(Op::log_op, a, [](double x) { return std::log(x); }); }
    NodeId square(NodeId a) { return unary(Op::square, a, [](double x) { return x * x; }); }
    NodeId neg(NodeId a) { return unary(Op::neg, a, [](double x) { return -x; }); }
    NodeId abs(NodeId a) { return unary(Op::abs_op, a, [](double x) { return std::abs(x); }); }

    NodeId clamp(NodeId a, double lo, double hi) {
        NodeId id = push(Op::clamp, a, 0, 0, nodes_[a].len);
        nodes_[id].s0 = lo;
        nodes_[id].s1 = hi;
        const double* av = val(a);
        double* out = val(id);
        for (std::uint32_t i = 0; i < nodes_[id].len; ++i)
            out[i] = av[i] < lo ? lo : (av[i] > hi ? hi : av[i]);
        return id;
    }

    NodeId scale(NodeId a, double c) {
        NodeId id = push(Op::scale, a, 0, 0, nodes_[a].len);
        nodes_[id].s0 = c;
        const double* av = val(a);
        double* out = val(id);
        for (std::uint32_t i = 0; i < nodes_[id].len; ++i) out[i] = c * av[i];
        return id;
    }

    NodeId add_const(NodeId a, double c) {
        NodeId id = push(Op::add_const, a, 0, 0, nodes_[a].len);
        nodes_[id].s0 = c;
        const double* av = val(a);
        double* out = val(id);
        for (std::uint32_t i = 0; i < nodes_[id].len; ++i) out[i] = av[i] + c;
        return id;
    }

    NodeId sum(NodeId a) {
        NodeId id = push(Op::sum, a, 0, 0, 1);
        const double* av = val(a);
        double acc = 0.0;
        for (std::uint32_t i = 0; i < nodes_[a].len; ++i) acc += av[i];
        *val(id) = acc;
        return id;
    }

    NodeId mean(NodeId a) {
        const std::uint32_t n = nodes_[a].len;
        return scale(sum(a), 1.0 / static_cast<double>(n));
    }

    NodeId dot(NodeId a, NodeId b) { return sum(mul(a, b)); }

    // ---- access -------------------------------------------------------

    std::span<const double> value(NodeId id) const {
        const Node& n = nodes_[id];
        return std::span<const double>(values_.data() + n.off, n.len);
    }

    double value_scalar(NodeId id) const {
        if (nodes_[id].len != 1) throw std::invalid_argument("Tape::value_scalar: node is not scalar");
        return values_[nodes_[id].off];
    }

    std::span<const double> grad(NodeId id) const {
        const Node& n = nodes_[id];
        return std::span<const double>(grads_.data() + n.off, n.len);
    }

    // ---- reverse pass -------------------------------------------------

    // Exact reverse-mode gradients of a scalar loss w.r.t. every node.
    // Throws if the loss is not scalar, is non-finite, or a non-finite value
    // appears during accumulation.
    void backward(NodeId loss) {
        const Node& ln = nodes_[loss];
        if (ln.len != 1) throw std::invalid_argument("Tape::backward: loss must be scalar");
        if (!std::isfinite(values_[ln.off])) throw std::runtime_error("Tape::backward: loss is not finite");

        grads_.assign(values_.size(), 0.0);
        grads_[ln.off] = 1.0;

        for (std::uint32_t idx = loss + 1; idx-- > 0;) {
            const Node& n = nodes_[idx];
            const double* gy = grads_.data() + n.off;
            const double* y = values_.data() + n.off;
            switch (n.op) {
                case Op::leaf:
                    break;
                case Op::affine:
                case Op::matvec: {
                    const std::uint32_t rows = n.aux0, cols = n.aux1;
                    double* gw = grads_.data() + nodes_[n.a].off;
                    double* gx = grads_.data() + nodes_[n.b].off;
                    const double* wm = values_.data() + nodes_[n.a].off;
                    const double* xv = values_.data() + nodes_[n.b].off;
                    for (std::uint32_t i = 0; i < rows; ++i) {
                        const double g = gy[i];
                        if (g == 0.0) continue;
                        double* gwr = gw + static_cast<std::size_t>(i) * cols;
                        const double* wr = wm + static_cast<std::size_t>(i) * cols;
                        for (std::uint32_t j = 0; j < cols; ++j) {
                            gwr[j] += g * xv[j];
                            gx[j] += g * wr[j];
                        }
                    }
                    if (n.op == Op::affine) {
                        double* gb = grads_.data() + nodes_[n.c].off;
                        for (std::uint32_t i = 0; i < rows; ++i) gb[i] += gy[i];
                    }
                    break;
                }
                case Op::add: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    double* gb = grads_.data() + nodes_[n.b].off;
                    for (std::uint32_t i = 0; i < n.len; ++i) {
                        ga[i] += gy[i];
                        gb[i] += gy[i];
                    }
                    break;
                }
                case Op::sub: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    double* gb = grads_.data() + nodes_[n.b].off;
                    for (std::uint32_t i = 0; i < n.len; ++i) {
                        ga[i] += gy[i];
                        gb[i] -= gy[i];
                    }
                    break;
                }
                case Op::mul: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    double* gb = grads_.data() + nodes_[n.b].off;
                    const double* av = values_.data() + nodes_[n.a].off;
                    const double* bv = values_.data() + nodes_[n.b].off;
                    for (std::uint32_t i = 0; i < n.len; ++i) {
                        ga[i] += gy[i] * bv[i];
                        gb[i] += gy[i] * av[i];
                    }
                    break;
                }
                case Op::concat: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    double* gb = grads_.data() + nodes_[n.b].off;
                    const std::uint32_t la = nodes_[n.a].len;
                    for (std::uint32_t i = 0; i < la; ++i) ga[i] += gy[i];
                    for (std::uint32_t i = la; i < n.len; ++i) gb[i - la] += gy[i];
                    break;
                }
                case Op::slice: {
                    double* ga = grads_.data() + nodes_[n.a].off + n.aux0;
                    for (std::uint32_t i = 0; i < n.len; ++i) ga[i] += gy[i];
                    break;
                }
                case Op::tanh_op: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    for (std::uint32_t i = 0; i < n.len; ++i) ga[i] += gy[i] * (1.0 - y[i] * y[i]);
                    break;
                }
                case Op::sigmoid: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    for (std::uint32_t i = 0; i < n.len; ++i) ga[i] += gy[i] * y[i] * (1.0 - y[i]);
                    break;
                }
                case Op::elu: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    const double* av = values_.data() + nodes_[n.a].off;
                    for (std::uint32_t i = 0; i < n.len; ++i)
                        ga[i] += gy[i] * (av[i] > 0.0 ? 1.0 : y[i] + 1.0);
                    break;
                }
                case Op::softplus: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    const double* av = values_.data() + nodes_[n.a].off;
                    for (std::uint32_t i = 0; i < n.len; ++i)
                        ga[i] += gy[i] * detail::stable_sigmoid(av[i]);
                    break;
                }
                case Op::exp_op: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    for (std::uint32_t i = 0; i < n.len; ++i) ga[i] += gy[i] * y[i];
                    break;
                }
                case Op::log_op: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    const double* av = values_.data() + nodes_[n.a].off;
                    for (std::uint32_t i = 0; i < n.len; ++i) ga[i] += gy[i] / av[i];
                    break;
                }
                case Op::square: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    const double* av = values_.data() + nodes_[n.a].off;
                    for (std::uint32_t i = 0; i < n.len; ++i) ga[i] += gy[i] * 2.0 * av[i];
                    break;
                }
                case Op::neg: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    for (std::uint32_t i = 0; i < n.len; ++i) ga[i] -= gy[i];
                    break;
                }
                case Op::abs_op: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    const double* av = values_.data() + nodes_[n.a].off;
                    for (std::uint32_t i = 0; i < n.len; ++i)
                        ga[i] += gy[i] * (av[i] > 0.0 ? 1.0 : (av[i] < 0.0 ? -1.0 : 0.0));
                    break;
                }
                case Op::clamp: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    const double* av = values_.data() + nodes_[n.a].off;
                    for (std::uint32_t i = 0; i < n.len; ++i)
                        if (av[i] >= n.s0 && av[i] <= n.s1) ga[i] += gy[i];
                    break;
                }
                case Op::scale: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    for (std::uint32_t i = 0; i < n.len; ++i) ga[i] += n.s0 * gy[i];
                    break;
                }
                case Op::add_const: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    for (std::uint32_t i = 0; i < n.len; ++i) ga[i] += gy[i];
                    break;
                }
                case Op::sum: {
                    double* ga = grads_.data() + nodes_[n.a].off;
                    const double g = gy[0];
                    for (std::uint32_t i = 0; i < nodes_[n.a].len; ++i) ga[i] += g;
                    break;
                }
            }
        }

        for (double g : grads_)
            if (!std::isfinite(g)) throw std::runtime_error("Tape::backward: non-finite gradient");
    }

private:
    template <typename F>
    NodeId unary(Op op, NodeId a, F f) {
        NodeId id = push(op, a, 0, 0, nodes_[a].len);
        const double* av = val(a);
        double* out = val(id);
        for (std::uint32_t i = 0; i < nodes_[id].len; ++i) out[i] = f(av[i]);
        return id;
    }

    template <typename F>
    NodeId binary(Op op, NodeId a, NodeId b, F f) {
        if (nodes_[a].len != nodes_[b].len)
            throw std::invalid_argument("Tape: binary op length mismatch");
        NodeId id = push(op, a, b, 0, nodes_[a].len);
        const double* av = val(a);
        const double* bv = val(b);
        double* out = val(id);
        for (std::uint32_t i = 0; i < nodes_[id].len; ++i) out[i] = f(av[i], bv[i]);
        return id;
    }

    NodeId push(Op op, NodeId a, NodeId b, NodeId c, std::uint32_t len,
                std::uint32_t aux0 = 0, std::uint32_t aux1 = 0) {
        Node n;
        n.op = op;
        n.a = a;
        n.b = b;
        n.c = c;
        n.off = static_cast<std::uint32_t>(values_.size());
        n.len = len;
        n.aux0 = aux0;
        n.aux1 = aux1;
        nodes_.push_back(n);
        values_.resize(values_.size() + len, 0.0);
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    double* val(NodeId id) { return values_.data() + nodes_[id].off; }

    void check_len(NodeId id, std::uint32_t expected, const char* what) const {
        if (nodes_[id].len != expected)
            throw std::invalid_argument(std::string("Tape::") + what + " length mismatch");
    }

    std::vector<Node> nodes_;
    std::vector<double> values_;
    std::vector<double> grads_;
};

}  // namespace timegci::nd
