#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "data.hpp"
#include "nd/adam.hpp"
#include "nd/layers.hpp"
#include "nd/random.hpp"
#include "nd/tape.hpp"

namespace timegci {

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kHalfLog2Pi = 0.91893853320467274;
inline constexpr double kLog2 = 0.69314718055994531;
inline constexpr double kBoundaryEps = 1e-6;
// |z| bound for sampled pre-squash values; keeps samples strictly inside (0,1).
inline constexpr double kSampleZClip = 12.0;

// x = (tanh(z) + 1) / 2 maps the Gaussian onto the normalized feature range.
inline double squash(double z) { return (std::tanh(z) + 1.0) / 2.0; }

inline double unsquash(double x) { return 0.5 * (std::log(x) - std::log1p(-x)); }

// log |dx/dz| = log((1 - tanh^2 z) / 2), written without cancellation.
inline double squash_log_jacobian(double z) {
    return kLog2 - 2.0 * z - 2.0 * nd::detail::stable_softplus(-2.0 * z);
}

// Clamps values into [eps, 1-eps]; rejects values that are not plausibly
// normalized at all.
inline double clip_interior(double v, double eps = kBoundaryEps) {
    if (!std::isfinite(v) || v < -1e-9 || v > 1.0 + 1e-9)
        throw std::invalid_argument("clip_interior: value is not in the normalized range [0,1]");
    return v < eps ? eps : (v > 1.0 - eps ? 1.0 - eps : v);
}

inline Trajectory clip_interior(const Trajectory& tr, double eps = kBoundaryEps) {
    Trajectory out(tr.length(), tr.dim());
    for (std::size_t t = 0; t < tr.length(); ++t)
        for (std::size_t i = 0; i < tr.dim(); ++i) out.values(t, i) = clip_interior(tr.values(t, i), eps);
    return out;
}

// Recurrent encoder state plus the step index t in [1, T+1]; t is the index
// of the next transition and the state reflects the t-1 inputs consumed.
struct HistoryState {
    nd::LstmState state;
    std::size_t t = 1;
    std::size_t horizon = 0;

    bool terminal() const { return t == horizon + 1; }
};

struct GaussianAction {
    std::vector<double> mean;
    std::vector<double> log_std;
};

namespace density_detail {

// log N(unsquash(x); mean, exp(log_std)) - log|dx/dz|, per feature, summed.
// sample_action and log_density share this path so they agree exactly.
inline double squashed_log_pdf(const GaussianAction& dist, std::span<const double> x) {
    double logp = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0.0 && x[i] < 1.0))
            throw std::invalid_argument("log_density: x must lie strictly inside (0,1)");
        const double z = unsquash(x[i]);
        const double inv_sigma = std::exp(-dist.log_std[i]);
        const double u = (z - dist.mean[i]) * inv_sigma;
        logp += -0.5 * u * u - dist.log_std[i] - kHalfLog2Pi - squash_log_jacobian(z);
    }
    return logp;
}

}  // namespace density_detail

// The explicit transition policy pi(x|h): LSTM history encoder plus a head
// emitting per-feature Gaussian mean and log-std (clamped to [-5, 2]), with
// samples squashed onto (0,1).
struct PolicyNet {
    nd::LstmParams encoder;
    nd::MlpHeadParams head;  // hidden -> 2D
    std::size_t feature_dim = 0;
    std::size_t hidden_size = 0;

    static PolicyNet init(std::size_t D, std::size_t hidden, nd::Rng& rng) {
        PolicyNet net;
        net.feature_dim = D;
        net.hidden_size = hidden;
        net.encoder = nd::LstmParams::init(D, hidden, rng);
        net.head = nd::MlpHeadParams::init(hidden, hidden, 2 * D, rng);
        return net;
    }

    std::vector<nd::Tensor*> parameters() {
        std::vector<nd::Tensor*> out;
        nd::collect(out, encoder);
        nd::collect(out, head);
        return out;
    }

    HistoryState init_history(std::size_t T) const {
        HistoryState h;
        h.state = nd::LstmState::zeros(hidden_size);
        h.t = 1;
        h.horizon = T;
        return h;
    }

    void advance(HistoryState& h, std::span<const double> x) const {
        if (h.t > h.horizon)
            throw std::logic_error("advance: history already at the end of the horizon");
        nd::lstm_step(encoder, x, h.state);
        h.t += 1;
    }

    GaussianAction action_dist(const HistoryState& h) const {
        GaussianAction dist;
        dist.mean.resize(feature_dim);
        dist.log_std.resize(feature_dim);
        std::vector<double> out(2 * feature_dim);
        nd::mlp_head_apply(head, h.state.h, out);
        for (std::size_t i = 0; i < feature_dim; ++i) {
            dist.mean[i] = out[i];
            dist.log_std[i] = std::clamp(out[feature_dim + i], kLogStdMin, kLogStdMax);
        }
        return dist;
    }

    // Reparameterized draw; x in (0,1)^D and log_prob = log_density(x) exactly.
    std::pair<std::vector<double>, double> sample_action(const HistoryState& h, nd::Rng& rng) const {
        const GaussianAction dist = action_dist(h);
        std::vector<double> x(feature_dim);
        for (std::size_t i = 0; i < feature_dim; ++i) {
            double z = dist.mean[i] + std::exp(dist.log_std[i]) * rng.normal();
            z = std::clamp(z, -kSampleZClip, kSampleZClip);
            x[i] = squash(z);
        }
        return {x, density_detail::squashed_log_pdf(dist, x)};
    }

    double log_density(const HistoryState& h, std::span<const double> x) const {
        if (x.size() != feature_dim) throw std::invalid_argument("log_density: dimension mismatch");
        return density_detail::squashed_log_pdf(action_dist(h), x);
    }

    // Open-loop rollout; sum of the returned log_probs is log p(trajectory).
    std::pair<Trajectory, std::vector<double>> rollout(std::size_t T, nd::Rng& rng) const {
        if (T < 1) throw std::invalid_argument("rollout: T must be >= 1");
        Trajectory tr(T, feature_dim);
        std::vector<double> log_probs(T);
        HistoryState h = init_history(T);
        for (std::size_t t = 0; t < T; ++t) {
            auto [x, logp] = sample_action(h, rng);
            for (std::size_t i = 0; i < feature_dim; ++i) tr.values(t, i) = x[i];
            log_probs[t] = logp;
            advance(h, x);
        }
        return {std::move(tr), std::move(log_probs)};
    }

    // Teacher-forced log p(trajectory); expects strictly interior values.
    double trajectory_log_density(const Trajectory& tr) const {
        HistoryState h = init_history(tr.length());
        double total = 0.0;
        for (std::size_t t = 0; t < tr.length(); ++t) {
            total += log_density(h, tr.step(t));
            advance(h, tr.step(t));
        }
        return total;
    }
};

// ---- tape-side policy graph --------------------------------------------------

struct PolicyRefs {
    nd::LstmRef enc;
    nd::MlpHeadRef head;
    std::uint32_t feature_dim = 0;
};

inline PolicyRefs put(nd::Tape& tape, const PolicyNet& net) {
    PolicyRefs r;
    r.enc = put(tape, net.encoder);
    r.head = put(tape, net.head);
    r.feature_dim = static_cast<std::uint32_t>(net.feature_dim);
    return r;
}

inline std::vector<nd::NodeId> leaf_list(const PolicyRefs& r) {
    std::vector<nd::NodeId> out;
    nd::collect_leaves(out, r.enc);
    nd::collect_leaves(out, r.head);
    return out;
}

struct DistNodes {
    nd::NodeId mean = 0, log_std = 0;
};

inline DistNodes dist_nodes(nd::Tape& tape, const PolicyRefs& r, nd::NodeId hidden) {
    nd::NodeId out = apply(tape, r.head, hidden);
    DistNodes d;
    d.mean = tape.slice(out, 0, r.feature_dim);
    d.log_std = tape.clamp(tape.slice(out, r.feature_dim, r.feature_dim), kLogStdMin, kLogStdMax);
    return d;
}

// Teacher-forced log pi(x|h) with x constant (training data); mirrors
// density_detail::squashed_log_pdf.
inline nd::NodeId teacher_forced_log_prob(nd::Tape& tape, const DistNodes& d,
                                          std::span<const double> x) {
    const std::size_t D = x.size();
    std::vector<double> z(D);
    double const_terms = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
        z[i] = unsquash(x[i]);
        const_terms += -kHalfLog2Pi - squash_log_jacobian(z[i]);
    }
    nd::NodeId zc = tape.leaf(z);
    nd::NodeId u = tape.mul(tape.sub(zc, d.mean), tape.exp(tape.neg(d.log_std)));
    nd::NodeId quad = tape.scale(tape.sum(tape.square(u)), -0.5);
    nd::NodeId logp = tape.sub(quad, tape.sum(d.log_std));
    return tape.add_const(logp, const_terms);
}

struct ReparamSample {
    nd::NodeId x = 0;        // squashed action, length D
    nd::NodeId log_prob = 0; // scalar
};

// Reparameterized sample with frozen noise eps; gradients flow through mean
// and log_std into the squash and the density.
inline ReparamSample reparam_sample(nd::Tape& tape, const DistNodes& d,
                                    std::span<const double> eps) {
    const std::size_t D = eps.size();
    double const_terms = -static_cast<double>(D) * kHalfLog2Pi;
    for (std::size_t i = 0; i < D; ++i) const_terms += -0.5 * eps[i] * eps[i];
    nd::NodeId epsc = tape.leaf(eps);
    nd::NodeId z = tape.add(d.mean, tape.mul(tape.exp(d.log_std), epsc));
    // log|dx/dz| = log2 - 2(z + softplus(-2z)), per feature
    nd::NodeId sp = tape.softplus(tape.scale(z, -2.0));
    nd::NodeId jac = tape.add_const(tape.scale(tape.add(z, sp), -2.0), kLog2);
    nd::NodeId logp = tape.sub(tape.neg(tape.sum(d.log_std)), tape.sum(jac));
    ReparamSample s;
    s.log_prob = tape.add_const(logp, const_terms);
    s.x = tape.scale(tape.add_const(tape.tanh(z), 1.0), 0.5);
    return s;
}

// ---- losses -------------------------------------------------------------------

// Negative mean teacher-forced log-likelihood over a batch, -(1/(M T)) sum log pi.
// Data is boundary-clipped into the open interval before unsquashing.
inline nd::NodeId mle_loss_node(nd::Tape& tape, const PolicyRefs& r,
                                std::span<const Trajectory> batch) {
    if (batch.empty()) throw std::invalid_argument("mle_loss: empty batch");
    nd::NodeId total = tape.scalar(0.0);
    std::size_t steps = 0;
    std::vector<double> clipped;
    for (const Trajectory& tr : batch) {
        nd::NodeId h = tape.leaf(std::vector<double>(r.enc.hidden, 0.0));
        nd::NodeId c = tape.leaf(std::vector<double>(r.enc.hidden, 0.0));
        clipped.resize(tr.dim());
        for (std::size_t t = 0; t < tr.length(); ++t) {
            auto row = tr.step(t);
            for (std::size_t i = 0; i < row.size(); ++i) clipped[i] = clip_interior(row[i]);
            DistNodes d = dist_nodes(tape, r, h);
            total = tape.add(total, teacher_forced_log_prob(tape, d, clipped));
            nd::lstm_step(tape, r.enc, tape.leaf(clipped), h, c);
            ++steps;
        }
    }
    return tape.scale(total, -1.0 / static_cast<double>(steps));
}

inline double mle_loss(const PolicyNet& net, std::span<const Trajectory> batch) {
    nd::Tape tape;
    PolicyRefs r = put(tape, net);
    return tape.value_scalar(mle_loss_node(tape, r, batch));
}

}  // namespace timegci
