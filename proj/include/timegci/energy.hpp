#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "policy.hpp"

namespace timegci {

// Stepwise energy model f(h, x) with learnable log-partition; the trajectory
// energy is the teacher-forced sum of stepwise values over its own encoder.
struct EnergyNet {
    nd::LstmParams encoder;
    nd::MlpHeadParams head;  // (hidden + D) -> 1
    nd::Tensor log_z;        // learnable scalar, starts at 0
    std::size_t feature_dim = 0;
    std::size_t hidden_size = 0;

    static EnergyNet init(std::size_t D, std::size_t hidden, nd::Rng& rng) {
        EnergyNet net;
        net.feature_dim = D;
        net.hidden_size = hidden;
        net.encoder = nd::LstmParams::init(D, hidden, rng);
        net.head = nd::MlpHeadParams::init(hidden + D, hidden, 1, rng);
        net.log_z = nd::Tensor({1});
        return net;
    }

    std::vector<nd::Tensor*> parameters() {
        std::vector<nd::Tensor*> out;
        nd::collect(out, encoder);
        nd::collect(out, head);
        out.push_back(&log_z);
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
        if (h.t > h.horizon) throw std::logic_error("EnergyNet::advance: past the horizon");
        nd::lstm_step(encoder, x, h.state);
        h.t += 1;
    }

    double transition_energy(const HistoryState& h, std::span<const double> x) const {
        if (x.size() != feature_dim)
            throw std::invalid_argument("transition_energy: dimension mismatch");
        thread_local std::vector<double> in;
        in.assign(h.state.h.begin(), h.state.h.end());
        in.insert(in.end(), x.begin(), x.end());
        double out = 0.0;
        nd::mlp_head_apply(head, in, std::span<double>(&out, 1));
        return out;
    }

    double trajectory_energy(const Trajectory& tr) const {
        if (tr.dim() != feature_dim)
            throw std::invalid_argument("trajectory_energy: dimension mismatch");
        HistoryState h = init_history(tr.length());
        double total = 0.0;
        for (std::size_t t = 0; t < tr.length(); ++t) {
            total += transition_energy(h, tr.step(t));
            advance(h, tr.step(t));
        }
        return total;
    }
};

// ---- structured classifier ---------------------------------------------------
//
// log-odds of "real" for a trajectory: F(tau) - log Z - log p_policy(tau).
// Everything stays in log space; the probability is a stable sigmoid of it.

inline double classifier_log_odds(const EnergyNet& energy, const PolicyNet& policy,
                                  const Trajectory& tr) {
    const Trajectory interior = clip_interior(tr);
    return energy.trajectory_energy(interior) - energy.log_z[0] -
           policy.trajectory_log_density(interior);
}

inline double classifier_prob(const EnergyNet& energy, const PolicyNet& policy,
                              const Trajectory& tr) {
    return nd::detail::stable_sigmoid(classifier_log_odds(energy, policy, tr));
}

// Mean binary logistic loss over real/fake log-odds, in log-sigmoid form:
// -log sigmoid(u) = softplus(-u) for the real side, softplus(u) for the fake.
inline double logistic_pair_loss(std::span<const double> real_log_odds,
                                 std::span<const double> fake_log_odds) {
    if (real_log_odds.empty() || fake_log_odds.empty())
        throw std::invalid_argument("logistic_pair_loss: empty batch");
    double real_term = 0.0, fake_term = 0.0;
    for (double u : real_log_odds) real_term += nd::detail::stable_softplus(-u);
    for (double u : fake_log_odds) fake_term += nd::detail::stable_softplus(u);
    return real_term / static_cast<double>(real_log_odds.size()) +
           fake_term / static_cast<double>(fake_log_odds.size());
}

// ---- tape-side energy graph ----------------------------------------------------

struct EnergyRefs {
    nd::LstmRef enc;
    nd::MlpHeadRef head;
    nd::NodeId log_z = 0;
    std::uint32_t feature_dim = 0;
};

inline EnergyRefs put(nd::Tape& tape, const EnergyNet& net) {
    EnergyRefs r;
    r.enc = put(tape, net.encoder);
    r.head = put(tape, net.head);
    r.log_z = tape.leaf(net.log_z);
    r.feature_dim = static_cast<std::uint32_t>(net.feature_dim);
    return r;
}

inline std::vector<nd::NodeId> leaf_list(const EnergyRefs& r) {
    std::vector<nd::NodeId> out;
    nd::collect_leaves(out, r.enc);
    nd::collect_leaves(out, r.head);
    out.push_back(r.log_z);
    return out;
}

// Teacher-forced trajectory energy; the trajectory enters as constants.
inline nd::NodeId trajectory_energy_node(nd::Tape& tape, const EnergyRefs& r,
                                         const Trajectory& tr) {
    nd::NodeId h = tape.leaf(std::vector<double>(r.enc.hidden, 0.0));
    nd::NodeId c = tape.leaf(std::vector<double>(r.enc.hidden, 0.0));
    nd::NodeId total = tape.scalar(0.0);
    for (std::size_t t = 0; t < tr.length(); ++t) {
        nd::NodeId x = tape.leaf(tr.step(t));
        nd::NodeId f = apply(tape, r.head, tape.concat(h, x));
        total = tape.add(total, f);
        nd::lstm_step(tape, r.enc, x, h, c);
    }
    return total;
}

// Contrastive loss: -E_real log d - E_fake log(1 - d), with the policy's
// densities computed off-tape (gradients flow into the energy only).
inline nd::NodeId energy_loss_node(nd::Tape& tape, const EnergyRefs& r, const PolicyNet& policy,
                                   std::span<const Trajectory> real,
                                   std::span<const Trajectory> fake) {
    if (real.empty() || fake.empty()) throw std::invalid_argument("energy_loss: empty batch");
    nd::NodeId real_term = tape.scalar(0.0);
    for (const Trajectory& tr : real) {
        const Trajectory interior = clip_interior(tr);
        const double log_p = policy.trajectory_log_density(interior);
        nd::NodeId u = tape.sub(trajectory_energy_node(tape, r, interior), r.log_z);
        u = tape.add_const(u, -log_p);
        real_term = tape.add(real_term, tape.softplus(tape.neg(u)));
    }
    nd::NodeId fake_term = tape.scalar(0.0);
    for (const Trajectory& tr : fake) {
        const Trajectory interior = clip_interior(tr);
        const double log_p = policy.trajectory_log_density(interior);
        nd::NodeId u = tape.sub(trajectory_energy_node(tape, r, interior), r.log_z);
        u = tape.add_const(u, -log_p);
        fake_term = tape.add(fake_term, tape.softplus(u));
    }
    return tape.add(tape.scale(real_term, 1.0 / static_cast<double>(real.size())),
                    tape.scale(fake_term, 1.0 / static_cast<double>(fake.size())));
}

inline double energy_loss(const EnergyNet& energy, const PolicyNet& policy,
                          std::span<const Trajectory> real, std::span<const Trajectory> fake) {
    if (real.empty() || fake.empty()) throw std::invalid_argument("energy_loss: empty batch");
    std::vector<double> ur, uf;
    ur.reserve(real.size());
    uf.reserve(fake.size());
    for (const Trajectory& tr : real) ur.push_back(classifier_log_odds(energy, policy, tr));
    for (const Trajectory& tr : fake) uf.push_back(classifier_log_odds(energy, policy, tr));
    return logistic_pair_loss(ur, uf);
}

}  // namespace timegci
