#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "random.hpp"
#include "tape.hpp"
#include "tensor.hpp"

// Layer primitives, each in two forms that perform identical arithmetic:
// a plain form over raw buffers (no gradients, used for rollouts and frozen
// targets) and a tape form (used wherever gradients are needed). Tests pin
// the two forms to bit-identical outputs.

namespace timegci::nd {

// ---- affine ------------------------------------------------------------

struct AffineParams {
    Tensor w;  // out x in, row-major
    Tensor b;  // out

    std::size_t out_size() const { return w.dim(0); }
    std::size_t in_size() const { return w.dim(1); }

    // U(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases.
    static AffineParams init(std::size_t out, std::size_t in, Rng& rng) {
        AffineParams p;
        p.w = Tensor({out, in});
        p.b = Tensor({out});
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        for (std::size_t i = 0; i < p.w.size(); ++i) p.w[i] = rng.uniform(-bound, bound);
        return p;
    }
};

inline void affine_apply(const AffineParams& p, std::span<const double> x, std::span<double> y) {
    const std::size_t rows = p.out_size(), cols = p.in_size();
    if (x.size() != cols || y.size() != rows)
        throw std::invalid_argument("affine_apply: shape mismatch");
    for (std::size_t i = 0; i < rows; ++i) {
        double acc = p.b[i];
        for (std::size_t j = 0; j < cols; ++j) acc += p.w(i, j) * x[j];
        y[i] = acc;
    }
}

struct AffineRef {
    NodeId w = 0, b = 0;
    std::uint32_t rows = 0, cols = 0;
};

inline AffineRef put(Tape& tape, const AffineParams& p) {
    AffineRef r;
    r.w = tape.leaf(p.w);
    r.b = tape.leaf(p.b);
    r.rows = static_cast<std::uint32_t>(p.out_size());
    r.cols = static_cast<std::uint32_t>(p.in_size());
    return r;
}

inline NodeId apply(Tape& tape, const AffineRef& r, NodeId x) {
    return tape.affine(r.w, x, r.b, r.rows, r.cols);
}

// ---- LSTM cell -----------------------------------------------------------

// Gate rows are packed [input, forget, candidate, output]; the forget block
// of the bias starts at +1.
struct LstmParams {
    Tensor w_x;  // 4H x in
    Tensor w_h;  // 4H x H
    Tensor b;    // 4H
    std::size_t input_size = 0;
    std::size_t hidden_size = 0;

    static LstmParams init(std::size_t in, std::size_t hidden, Rng& rng) {
        LstmParams p;
        p.input_size = in;
        p.hidden_size = hidden;
        p.w_x = Tensor({4 * hidden, in});
        p.w_h = Tensor({4 * hidden, hidden});
        p.b = Tensor({4 * hidden});
        const double bx = 1.0 / std::sqrt(static_cast<double>(in));
        const double bh = 1.0 / std::sqrt(static_cast<double>(hidden));
        for (std::size_t i = 0; i < p.w_x.size(); ++i) p.w_x[i] = rng.uniform(-bx, bx);
        for (std::size_t i = 0; i < p.w_h.size(); ++i) p.w_h[i] = rng.uniform(-bh, bh);
        for (std::size_t i = hidden; i < 2 * hidden; ++i) p.b[i] = 1.0;
        return p;
    }
};

struct LstmState {
    std::vector<double> h, c;

    static LstmState zeros(std::size_t hidden) {
        LstmState s;
        s.h.assign(hidden, 0.0);
        s.c.assign(hidden, 0.0);
        return s;
    }
};

inline void lstm_step(const LstmParams& p, std::span<const double> x, LstmState& s) {
    const std::size_t H = p.hidden_size;
    if (x.size() != p.input_size || s.h.size() != H || s.c.size() != H)
        throw std::invalid_argument("lstm_step: shape mismatch");
    // pre = (W_x x + b) + W_h h, accumulated in the same order as the tape form
    thread_local std::vector<double> t1, t2;
    t1.assign(4 * H, 0.0);
    t2.assign(4 * H, 0.0);
    for (std::size_t i = 0; i < 4 * H; ++i) {
        double acc = p.b[i];
        for (std::size_t j = 0; j < p.input_size; ++j) acc += p.w_x(i, j) * x[j];
        t1[i] = acc;
    }
    for (std::size_t i = 0; i < 4 * H; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < H; ++j) acc += p.w_h(i, j) * s.h[j];
        t2[i] = acc;
    }
    for (std::size_t k = 0; k < H; ++k) {
        const double gi = detail::stable_sigmoid(t1[k] + t2[k]);
        const double gf = detail::stable_sigmoid(t1[H + k] + t2[H + k]);
        const double gg = std::tanh(t1[2 * H + k] + t2[2 * H + k]);
        const double go = detail::stable_sigmoid(t1[3 * H + k] + t2[3 * H + k]);
        const double c_new = gf * s.c[k] + gi * gg;
        s.c[k] = c_new;
        s.h[k] = go * std::tanh(c_new);
    }
}

struct LstmRef {
    NodeId wx = 0, wh = 0, b = 0;
    std::uint32_t in = 0, hidden = 0;
};

inline LstmRef put(Tape& tape, const LstmParams& p) {
    LstmRef r;
    r.wx = tape.leaf(p.w_x);
    r.wh = tape.leaf(p.w_h);
    r.b = tape.leaf(p.b);
    r.in = static_cast<std::uint32_t>(p.input_size);
    r.hidden = static_cast<std::uint32_t>(p.hidden_size);
    return r;
}

// Advances (h, c) node ids in place.
inline void lstm_step(Tape& tape, const LstmRef& r, NodeId x, NodeId& h, NodeId& c) {
    const std::uint32_t H = r.hidden;
    NodeId pre = tape.add(tape.affine(r.wx, x, r.b, 4 * H, r.in), tape.matvec(r.wh, h, 4 * H, H));
    NodeId gi = tape.sigmoid(tape.slice(pre, 0, H));
    NodeId gf = tape.sigmoid(tape.slice(pre, H, H));
    NodeId gg = tape.tanh(tape.slice(pre, 2 * H, H));
    NodeId go = tape.sigmoid(tape.slice(pre, 3 * H, H));
    c = tape.add(tape.mul(gf, c), tape.mul(gi, gg));
    h = tape.mul(go, tape.tanh(c));
}

// Encodes rows [0, upto) of a T x D matrix from a zero state.
inline LstmState lstm_encode(const LstmParams& p, const Tensor& rows, std::size_t upto) {
    LstmState s = LstmState::zeros(p.hidden_size);
    for (std::size_t t = 0; t < upto; ++t) lstm_step(p, rows.row(t), s);
    return s;
}

inline NodeId lstm_encode(Tape& tape, const LstmRef& r, const Tensor& rows, std::size_t upto) {
    NodeId h = tape.leaf(std::vector<double>(r.hidden, 0.0));
    NodeId c = tape.leaf(std::vector<double>(r.hidden, 0.0));
    for (std::size_t t = 0; t < upto; ++t) lstm_step(tape, r, tape.leaf(rows.row(t)), h, c);
    return h;
}

// ---- MLP head ------------------------------------------------------------

// Two ELU hidden layers then a linear readout.
struct MlpHeadParams {
    AffineParams l1, l2, out;

    static MlpHeadParams init(std::size_t in, std::size_t hidden, std::size_t out_dim, Rng& rng) {
        MlpHeadParams p;
        p.l1 = AffineParams::init(hidden, in, rng);
        p.l2 = AffineParams::init(hidden, hidden, rng);
        p.out = AffineParams::init(out_dim, hidden, rng);
        return p;
    }

    std::size_t in_size() const { return l1.in_size(); }
    std::size_t out_size() const { return out.out_size(); }
};

inline void mlp_head_apply(const MlpHeadParams& p, std::span<const double> x, std::span<double> y) {
    thread_local std::vector<double> h1, h2;
    h1.assign(p.l1.out_size(), 0.0);
    h2.assign(p.l2.out_size(), 0.0);
    affine_apply(p.l1, x, h1);
    for (auto& v : h1) v = detail::elu(v);
    affine_apply(p.l2, h1, h2);
    for (auto& v : h2) v = detail::elu(v);
    affine_apply(p.out, h2, y);
}

struct MlpHeadRef {
    AffineRef l1, l2, out;
};

inline MlpHeadRef put(Tape& tape, const MlpHeadParams& p) {
    return MlpHeadRef{put(tape, p.l1), put(tape, p.l2), put(tape, p.out)};
}

inline NodeId apply(Tape& tape, const MlpHeadRef& r, NodeId x) {
    NodeId h1 = tape.elu(apply(tape, r.l1, x));
    NodeId h2 = tape.elu(apply(tape, r.l2, h1));
    return apply(tape, r.out, h2);
}

// ---- parameter lists -------------------------------------------------------

inline void collect(std::vector<Tensor*>& out, AffineParams& p) {
    out.push_back(&p.w);
    out.push_back(&p.b);
}

inline void collect(std::vector<Tensor*>& out, LstmParams& p) {
    out.push_back(&p.w_x);
    out.push_back(&p.w_h);
    out.push_back(&p.b);
}

inline void collect(std::vector<Tensor*>& out, MlpHeadParams& p) {
    collect(out, p.l1);
    collect(out, p.l2);
    collect(out, p.out);
}

inline void collect_leaves(std::vector<NodeId>& out, const AffineRef& r) {
    out.push_back(r.w);
    out.push_back(r.b);
}

inline void collect_leaves(std::vector<NodeId>& out, const LstmRef& r) {
    out.push_back(r.wx);
    out.push_back(r.wh);
    out.push_back(r.b);
}

inline void collect_leaves(std::vector<NodeId>& out, const MlpHeadRef& r) {
    collect_leaves(out, r.l1);
    collect_leaves(out, r.l2);
    collect_leaves(out, r.out);
}

}  // namespace timegci::nd
