#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "energy.hpp"
#include "policy.hpp"
#include "replay.hpp"

namespace timegci {

// Soft Q-function over (history, action); same encoder/head structure as the
// energy, with its own parameters.
struct CriticNet {
    nd::LstmParams encoder;
    nd::MlpHeadParams head;  // (hidden + D) -> 1
    std::size_t feature_dim = 0;
    std::size_t hidden_size = 0;

    static CriticNet init(std::size_t D, std::size_t hidden, nd::Rng& rng) {
        CriticNet net;
        net.feature_dim = D;
        net.hidden_size = hidden;
        net.encoder = nd::LstmParams::init(D, hidden, rng);
        net.head = nd::MlpHeadParams::init(hidden + D, hidden, 1, rng);
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
        if (h.t > h.horizon) throw std::logic_error("CriticNet::advance: past the horizon");
        nd::lstm_step(encoder, x, h.state);
        h.t += 1;
    }

    double q_value(const HistoryState& h, std::span<const double> x) const {
        if (x.size() != feature_dim) throw std::invalid_argument("q_value: dimension mismatch");
        thread_local std::vector<double> in;
        in.assign(h.state.h.begin(), h.state.h.end());
        in.insert(in.end(), x.begin(), x.end());
        double out = 0.0;
        nd::mlp_head_apply(head, in, std::span<double>(&out, 1));
        return out;
    }
};

// Lagged copy used for bootstrap targets; only polyak tracking may write it.
struct TargetCritic {
    CriticNet net;

    static TargetCritic copy_of(const CriticNet& online) { return TargetCritic{online}; }

    void track(CriticNet& online, double rate) {
        auto t = net.parameters();
        auto o = online.parameters();
        nd::polyak_update(t, o, rate);
    }
};

// Single-sample bootstrapped state value at the successor history given by
// rows [0, successor_len) of a trajectory:
//   V(h') = Q_target(h', x') - alpha * log pi(x'|h'),  x' ~ pi(.|h').
// Exactly 0 at the terminal boundary (successor_len == horizon). Pure target:
// nothing here carries gradients.
inline double soft_state_value(const TargetCritic& target, const PolicyNet& policy,
                               const Trajectory& tr, std::size_t successor_len,
                               std::size_t horizon, double alpha, nd::Rng& rng) {
    if (successor_len > horizon) throw std::invalid_argument("soft_state_value: prefix too long");
    if (successor_len == horizon) return 0.0;
    HistoryState hp = policy.init_history(horizon);
    HistoryState hc = target.net.init_history(horizon);
    for (std::size_t t = 0; t < successor_len; ++t) {
        policy.advance(hp, tr.step(t));
        target.net.advance(hc, tr.step(t));
    }
    auto [x, log_p] = policy.sample_action(hp, rng);
    return target.net.q_value(hc, x) - alpha * log_p;
}

// ---- tape-side critic graph ---------------------------------------------------

struct CriticRefs {
    nd::LstmRef enc;
    nd::MlpHeadRef head;
    std::uint32_t feature_dim = 0;
};

inline CriticRefs put(nd::Tape& tape, const CriticNet& net) {
    CriticRefs r;
    r.enc = put(tape, net.encoder);
    r.head = put(tape, net.head);
    r.feature_dim = static_cast<std::uint32_t>(net.feature_dim);
    return r;
}

inline std::vector<nd::NodeId> leaf_list(const CriticRefs& r) {
    std::vector<nd::NodeId> out;
    nd::collect_leaves(out, r.enc);
    nd::collect_leaves(out, r.head);
    return out;
}

// ---- soft Bellman residual loss -------------------------------------------------

// Mean squared residual (Q(h,x) - f(h,x) - V(h'))^2 over a transition batch.
// The energy and the bootstrap are frozen; gradients flow into the online
// critic only.
inline nd::NodeId critic_loss_node(nd::Tape& tape, const CriticRefs& online,
                                   const TargetCritic& target, const PolicyNet& policy,
                                   const EnergyNet& energy,
                                   std::span<const TransitionSample> transitions, double alpha,
                                   nd::Rng& rng) {
    if (transitions.empty()) throw std::invalid_argument("critic_loss: empty batch");
    nd::NodeId total = tape.scalar(0.0);
    for (const TransitionSample& tr : transitions) {
        const std::size_t horizon = tr.trajectory.length();
        const std::size_t prefix_len = tr.cutoff - 1;

        HistoryState he = energy.init_history(horizon);
        for (std::size_t t = 0; t < prefix_len; ++t) energy.advance(he, tr.trajectory.step(t));
        const double f = energy.transition_energy(he, tr.action());
        const double v = soft_state_value(target, policy, tr.trajectory, tr.cutoff, horizon,
                                          alpha, rng);

        nd::NodeId hid = lstm_encode(tape, online.enc, tr.trajectory.values, prefix_len);
        nd::NodeId q = apply(tape, online.head, tape.concat(hid, tape.leaf(tr.action())));
        nd::NodeId residual = tape.add_const(q, -(f + v));
        total = tape.add(total, tape.square(residual));
    }
    return tape.scale(total, 1.0 / static_cast<double>(transitions.size()));
}

inline double critic_loss(CriticNet& online, const TargetCritic& target, const PolicyNet& policy,
                          const EnergyNet& energy, std::span<const TransitionSample> transitions,
                          double alpha, nd::Rng& rng) {
    nd::Tape tape;
    CriticRefs r = put(tape, online);
    return tape.value_scalar(critic_loss_node(tape, r, target, policy, energy, transitions,
                                              alpha, rng));
}

// ---- actor loss ------------------------------------------------------------------

// Soft policy improvement objective: mean over histories of
//   alpha * log pi(x|h) - Q(h,x),  x reparameterized from pi(.|h).
// The critic is treated as a constant: its encoder runs off-tape (it does not
// depend on x) and only its head sits on the tape so the pathwise gradient
// d Q / d x can reach the policy.
inline nd::NodeId actor_loss_node(nd::Tape& tape, const PolicyRefs& policy_refs,
                                  const CriticNet& critic, const nd::MlpHeadRef& critic_head,
                                  std::span<const HistorySample> histories, double alpha,
                                  std::span<const double> noise) {
    if (histories.empty()) throw std::invalid_argument("actor_loss: empty batch");
    if (alpha < 0.0) throw std::invalid_argument("actor_loss: alpha must be non-negative");
    if (noise.size() != histories.size() * policy_refs.feature_dim)
        throw std::invalid_argument("actor_loss: noise must hold one draw per history feature");
    nd::NodeId total = tape.scalar(0.0);
    for (std::size_t k = 0; k < histories.size(); ++k) {
        const HistorySample& hs = histories[k];
        const std::size_t prefix_len = hs.cutoff - 1;
        nd::NodeId h = lstm_encode(tape, policy_refs.enc, hs.trajectory.values, prefix_len);
        DistNodes d = dist_nodes(tape, policy_refs, h);
        ReparamSample s = reparam_sample(
            tape, d, noise.subspan(k * policy_refs.feature_dim, policy_refs.feature_dim));

        nd::LstmState cs = nd::lstm_encode(critic.encoder, hs.trajectory.values, prefix_len);
        nd::NodeId q = apply(tape, critic_head, tape.concat(tape.leaf(cs.h), s.x));
        total = tape.add(total, tape.sub(tape.scale(s.log_prob, alpha), q));
    }
    return tape.scale(total, 1.0 / static_cast<double>(histories.size()));
}

inline std::vector<double> draw_actor_noise(std::size_t histories, std::size_t feature_dim,
                                            nd::Rng& rng) {
    std::vector<double> noise(histories * feature_dim);
    for (auto& e : noise) e = rng.normal();
    return noise;
}

}  // namespace timegci
