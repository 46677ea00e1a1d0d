#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <timegci/critic.hpp>

#include "helpers/gradcheck.hpp"

using namespace timegci;
using nd::Rng;
using nd::Tape;

namespace {

CriticNet small_critic(std::size_t D, std::size_t hidden, std::uint64_t seed) {
    Rng rng(seed);
    return CriticNet::init(D, hidden, rng);
}

PolicyNet small_policy(std::size_t D, std::size_t hidden, std::uint64_t seed) {
    Rng rng(seed);
    return PolicyNet::init(D, hidden, rng);
}

EnergyNet small_energy(std::size_t D, std::size_t hidden, std::uint64_t seed) {
    Rng rng(seed);
    return EnergyNet::init(D, hidden, rng);
}

void zero_head(nd::MlpHeadParams& head, double out_bias = 0.0) {
    head.l1.w.fill(0.0);
    head.l2.w.fill(0.0);
    head.out.w.fill(0.0);
    head.l1.b.fill(0.0);
    head.l2.b.fill(0.0);
    head.out.b.fill(out_bias);
}

std::vector<TransitionSample> rollout_transitions(const PolicyNet& policy, std::size_t T,
                                                  std::size_t n, Rng& rng) {
    ReplayBuffer buf(n, T, policy.feature_dim);
    for (std::size_t k = 0; k < n; ++k) buf.push(policy.rollout(T, rng).first);
    return buf.sample_transitions(n, rng);
}

}  // namespace

TEST_CASE("q_value with a zeroed head returns the bias, deterministically") {
    CriticNet net = small_critic(2, 6, 1);
    zero_head(net.head, 1.75);
    HistoryState h = net.init_history(3);
    std::vector<double> x{0.4, 0.6};
    CHECK(net.q_value(h, x) == 1.75);
    CHECK(net.q_value(h, x) == net.q_value(h, x));
}

TEST_CASE("q_value gradient matches finite differences") {
    CriticNet net = small_critic(2, 5, 2);
    Rng rng(3);
    Trajectory tr(3, 2);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t i = 0; i < 2; ++i) tr.values(t, i) = rng.uniform(0.1, 0.9);
    std::vector<double> x{0.35, 0.65};
    auto build = [&](Tape& tape) {
        CriticRefs r = put(tape, net);
        nd::NodeId hid = lstm_encode(tape, r.enc, tr.values, 2);
        nd::NodeId q = apply(tape, r.head, tape.concat(hid, tape.leaf(x)));
        return testutil::TapeLoss{q, leaf_list(r)};
    };
    auto report = testutil::grad_check(net.parameters(), build);
    CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("soft state value is exactly zero at the terminal boundary") {
    CriticNet online = small_critic(2, 6, 4);
    TargetCritic target = TargetCritic::copy_of(online);
    PolicyNet policy = small_policy(2, 6, 5);
    Rng rng(7);
    Trajectory tr(4, 2);
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t i = 0; i < 2; ++i) tr.values(t, i) = rng.uniform(0.1, 0.9);
    CHECK(soft_state_value(target, policy, tr, 4, 4, 0.2, rng) == 0.0);
}

TEST_CASE("soft state value reduces to the entropy term when Q is zero") {
    CriticNet online = small_critic(2, 6, 6);
    zero_head(online.head);
    TargetCritic target = TargetCritic::copy_of(online);
    PolicyNet policy = small_policy(2, 6, 7);
    Rng rng(11);
    Trajectory tr(4, 2);
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t i = 0; i < 2; ++i) tr.values(t, i) = rng.uniform(0.1, 0.9);

    Rng clone(0);
    clone.deserialize(rng.serialize());
    const double alpha = 0.2;
    const double v = soft_state_value(target, policy, tr, 2, 4, alpha, rng);

    HistoryState hp = policy.init_history(4);
    policy.advance(hp, tr.step(0));
    policy.advance(hp, tr.step(1));
    auto [x, log_p] = policy.sample_action(hp, clone);
    (void)x;
    CHECK(v == Catch::Approx(-alpha * log_p).margin(1e-12));
}

TEST_CASE("averaged single-sample state values converge to a batched estimate") {
    CriticNet online = small_critic(1, 6, 8);
    TargetCritic target = TargetCritic::copy_of(online);
    PolicyNet policy = small_policy(1, 6, 9);
    Rng rng(13);
    Trajectory tr(3, 1);
    for (std::size_t t = 0; t < 3; ++t) tr.values(t, 0) = rng.uniform(0.2, 0.8);

    auto estimate = [&](Rng& r, int n, double& se) {
        double sum = 0.0, sum2 = 0.0;
        for (int k = 0; k < n; ++k) {
            const double v = soft_state_value(target, policy, tr, 1, 3, 0.2, r);
            sum += v;
            sum2 += v * v;
        }
        const double mean = sum / n;
        se = std::sqrt((sum2 / n - mean * mean) / n);
        return mean;
    };
    Rng ra(17), rb(19);
    double se_a = 0.0, se_b = 0.0;
    const double a = estimate(ra, 10000, se_a);
    const double b = estimate(rb, 10000, se_b);
    CHECK(std::abs(a - b) <= 3.0 * std::sqrt(se_a * se_a + se_b * se_b));
}

TEST_CASE("critic loss vanishes when Q is hand-set to the terminal target") {
    // T=1: every transition is terminal, so the target is f(h,x); make the
    // critic share the energy's encoder and head so Q == f pointwise.
    Rng rng(21);
    EnergyNet energy = small_energy(2, 6, 22);
    CriticNet online = small_critic(2, 6, 23);
    online.encoder = energy.encoder;
    online.head = energy.head;
    TargetCritic target = TargetCritic::copy_of(online);
    PolicyNet policy = small_policy(2, 6, 24);

    auto transitions = rollout_transitions(policy, 1, 16, rng);
    Rng boot(25);
    CHECK(critic_loss(online, target, policy, energy, transitions, 0.2, boot) ==
          Catch::Approx(0.0).margin(1e-20));
}

TEST_CASE("critic converges to a constant energy on terminal-only data") {
    Rng rng(31);
    EnergyNet energy = small_energy(1, 8, 32);
    zero_head(energy.head, 0.6);  // f == 0.6 everywhere
    PolicyNet policy = small_policy(1, 8, 33);
    CriticNet online = small_critic(1, 8, 34);
    TargetCritic target = TargetCritic::copy_of(online);

    auto params = online.parameters();
    nd::AdamState adam = nd::AdamState::init(params);
    Tape tape;
    ReplayBuffer buf(256, 1, 1);
    for (int k = 0; k < 256; ++k) buf.push(policy.rollout(1, rng).first);
    Rng boot(35);
    for (int step = 0; step < 2000; ++step) {
        auto transitions = buf.sample_transitions(32, rng);
        tape.reset();
        CriticRefs r = put(tape, online);
        nd::NodeId loss = critic_loss_node(tape, r, target, policy, energy, transitions, 0.2, boot);
        tape.backward(loss);
        auto leaves = leaf_list(r);
        nd::apply_adam(tape, leaves, params, adam, 1e-2);
        target.track(online, 0.01);
    }
    HistoryState h = online.init_history(1);
    for (double x = 0.1; x < 1.0; x += 0.2) {
        std::vector<double> xv{x};
        CHECK(online.q_value(h, xv) == Catch::Approx(0.6).margin(0.05));
    }
}

TEST_CASE("critic loss gradient matches finite differences") {
    Rng rng(41);
    EnergyNet energy = small_energy(2, 4, 42);
    PolicyNet policy = small_policy(2, 4, 43);
    CriticNet online = small_critic(2, 4, 44);
    TargetCritic target = TargetCritic::copy_of(online);
    auto transitions = rollout_transitions(policy, 3, 4, rng);
    auto build = [&](Tape& tape) {
        Rng boot(45);  // frozen bootstrap draws across rebuilds
        CriticRefs r = put(tape, online);
        return testutil::TapeLoss{
            critic_loss_node(tape, r, target, policy, energy, transitions, 0.2, boot),
            leaf_list(r)};
    };
    auto report = testutil::grad_check(online.parameters(), build);
    CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("critic loss rejects an empty batch") {
    EnergyNet energy = small_energy(1, 4, 50);
    PolicyNet policy = small_policy(1, 4, 51);
    CriticNet online = small_critic(1, 4, 52);
    TargetCritic target = TargetCritic::copy_of(online);
    std::vector<TransitionSample> empty;
    Rng rng(53);
    CHECK_THROWS(critic_loss(online, target, policy, energy, empty, 0.2, rng));
}

TEST_CASE("converged critic satisfies the soft Bellman identity on a T=2 toy") {
    const double alpha = 0.2;
    Rng rng(61);
    EnergyNet energy = small_energy(1, 8, 62);
    PolicyNet policy = small_policy(1, 8, 63);
    CriticNet online = small_critic(1, 8, 64);
    TargetCritic target = TargetCritic::copy_of(online);

    ReplayBuffer buf(512, 2, 1);
    for (int k = 0; k < 512; ++k) buf.push(policy.rollout(2, rng).first);

    auto params = online.parameters();
    nd::AdamState adam = nd::AdamState::init(params);
    Tape tape;
    Rng boot(65);
    for (int step = 0; step < 6000; ++step) {
        auto transitions = buf.sample_transitions(64, rng);
        tape.reset();
        CriticRefs r = put(tape, online);
        nd::NodeId loss = critic_loss_node(tape, r, target, policy, energy, transitions, alpha, boot);
        tape.backward(loss);
        auto leaves = leaf_list(r);
        nd::apply_adam(tape, leaves, params, adam, 3e-3);
        target.track(online, 0.01);
    }

    // Bellman residual by 1e4-sample Monte Carlo at 10 random (h, x)
    Rng check(66);
    for (int probe = 0; probe < 10; ++probe) {
        const Trajectory& tr = buf.at(check.uniform_index(buf.size()));
        const std::size_t cutoff = 1 + check.uniform_index(2);
        const std::size_t prefix = cutoff - 1;

        HistoryState hc = online.init_history(2);
        HistoryState he = energy.init_history(2);
        for (std::size_t t = 0; t < prefix; ++t) {
            online.advance(hc, tr.step(t));
            energy.advance(he, tr.step(t));
        }
        const double q = online.q_value(hc, tr.step(prefix));
        const double f = energy.transition_energy(he, tr.step(prefix));

        double rhs = f;
        if (cutoff < 2) {
            HistoryState hp = policy.init_history(2);
            HistoryState hq = online.init_history(2);
            for (std::size_t t = 0; t < cutoff; ++t) {
                policy.advance(hp, tr.step(t));
                online.advance(hq, tr.step(t));
            }
            double acc = 0.0;
            const int n = 10000;
            for (int k = 0; k < n; ++k) {
                auto [x2, log_p] = policy.sample_action(hp, check);
                acc += online.q_value(hq, x2) - alpha * log_p;
            }
            rhs += acc / n;
        }
        CHECK(q == Catch::Approx(rhs).margin(0.05));
    }
}

TEST_CASE("target critic tracks the polyak recursion exactly") {
    CriticNet online = small_critic(2, 5, 70);
    TargetCritic target = TargetCritic::copy_of(online);
    std::vector<std::vector<double>> manual;
    for (nd::Tensor* p : target.net.parameters())
        manual.emplace_back(p->data().begin(), p->data().end());

    Rng rng(71);
    const double rate = 0.005;
    for (int step = 0; step < 50; ++step) {
        auto params = online.parameters();
        for (nd::Tensor* p : params)
            for (std::size_t i = 0; i < p->size(); ++i) (*p)[i] += rng.uniform(-0.01, 0.01);
        target.track(online, rate);
        for (std::size_t k = 0; k < params.size(); ++k)
            for (std::size_t i = 0; i < params[k]->size(); ++i)
                manual[k][i] = (1.0 - rate) * manual[k][i] + rate * (*params[k])[i];
    }
    auto tp = target.net.parameters();
    double max_err = 0.0;
    for (std::size_t k = 0; k < tp.size(); ++k)
        for (std::size_t i = 0; i < tp[k]->size(); ++i)
            max_err = std::max(max_err, std::abs((*tp[k])[i] - manual[k][i]));
    CHECK(max_err <= 1e-12);
}

TEST_CASE("actor loss equals the entropy term when Q is zero") {
    PolicyNet policy = small_policy(2, 6, 80);
    CriticNet critic = small_critic(2, 6, 81);
    zero_head(critic.head);
    Rng rng(82);
    ReplayBuffer buf(32, 4, 2);
    for (int k = 0; k < 32; ++k) buf.push(policy.rollout(4, rng).first);
    auto histories = buf.sample_histories(16, rng);
    auto noise = draw_actor_noise(histories.size(), 2, rng);
    const double alpha = 0.2;

    Tape tape;
    PolicyRefs pr = put(tape, policy);
    nd::MlpHeadRef ch = put(tape, critic.head);
    const double loss =
        tape.value_scalar(actor_loss_node(tape, pr, critic, ch, histories, alpha, noise));

    // independent recomputation of alpha * mean log pi from the same noise
    double acc = 0.0;
    for (std::size_t k = 0; k < histories.size(); ++k) {
        HistoryState h = policy.init_history(4);
        for (std::size_t t = 0; t + 1 < histories[k].cutoff; ++t)
            policy.advance(h, histories[k].trajectory.step(t));
        GaussianAction d = policy.action_dist(h);
        double log_p = 0.0;
        for (std::size_t i = 0; i < 2; ++i) {
            const double eps = noise[k * 2 + i];
            const double z = d.mean[i] + std::exp(d.log_std[i]) * eps;
            log_p += -0.5 * eps * eps - d.log_std[i] - kHalfLog2Pi - squash_log_jacobian(z);
        }
        acc += alpha * log_p;
    }
    CHECK(loss == Catch::Approx(acc / histories.size()).margin(1e-9));
}

TEST_CASE("actor loss has zero policy gradient for alpha=0 and constant Q") {
    PolicyNet policy = small_policy(2, 5, 83);
    CriticNet critic = small_critic(2, 5, 84);
    zero_head(critic.head, 3.0);  // Q == 3 regardless of (h, x)
    Rng rng(85);
    ReplayBuffer buf(8, 3, 2);
    for (int k = 0; k < 8; ++k) buf.push(policy.rollout(3, rng).first);
    auto histories = buf.sample_histories(8, rng);
    auto noise = draw_actor_noise(histories.size(), 2, rng);

    Tape tape;
    PolicyRefs pr = put(tape, policy);
    nd::MlpHeadRef ch = put(tape, critic.head);
    nd::NodeId loss = actor_loss_node(tape, pr, critic, ch, histories, 0.0, noise);
    tape.backward(loss);
    double max_grad = 0.0;
    for (nd::NodeId leaf : leaf_list(pr))
        for (double g : tape.grad(leaf)) max_grad = std::max(max_grad, std::abs(g));
    CHECK(max_grad <= 1e-12);
}

TEST_CASE("actor loss gradient matches finite differences with frozen noise") {
    PolicyNet policy = small_policy(2, 4, 86);
    CriticNet critic = small_critic(2, 4, 87);
    Rng rng(88);
    ReplayBuffer buf(6, 3, 2);
    for (int k = 0; k < 6; ++k) buf.push(policy.rollout(3, rng).first);
    auto histories = buf.sample_histories(6, rng);
    auto noise = draw_actor_noise(histories.size(), 2, rng);

    auto build = [&](Tape& tape) {
        PolicyRefs pr = put(tape, policy);
        nd::MlpHeadRef ch = put(tape, critic.head);
        return testutil::TapeLoss{actor_loss_node(tape, pr, critic, ch, histories, 0.2, noise),
                                  leaf_list(pr)};
    };
    auto report = testutil::grad_check(policy.parameters(), build);
    CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("larger entropy temperature settles at wider action noise") {
    // Fixed peaked Q: regress the critic head onto Q*(h,x) = -20 (x - 0.7)^2
    // so the exploitation pressure opposes entropy; then the converged
    // log-std should grow with alpha.
    const std::size_t D = 1, hidden = 8;
    CriticNet critic = small_critic(D, hidden, 90);
    PolicyNet base = small_policy(D, hidden, 91);
    Rng rng(92);
    ReplayBuffer buf(64, 3, D);
    for (int k = 0; k < 64; ++k) buf.push(base.rollout(3, rng).first);
    auto histories = buf.sample_histories(32, rng);

    {
        auto params = critic.parameters();
        nd::AdamState adam = nd::AdamState::init(params);
        Tape tape;
        for (int step = 0; step < 800; ++step) {
            tape.reset();
            CriticRefs r = put(tape, critic);
            nd::NodeId total = tape.scalar(0.0);
            for (int k = 0; k < 16; ++k) {
                const auto& hs = histories[rng.uniform_index(histories.size())];
                nd::NodeId hid = lstm_encode(tape, r.enc, hs.trajectory.values, hs.cutoff - 1);
                const double x = rng.uniform(0.02, 0.98);
                std::vector<double> xv{x};
                nd::NodeId q = apply(tape, r.head, tape.concat(hid, tape.leaf(xv)));
                const double want = -20.0 * (x - 0.7) * (x - 0.7);
                total = tape.add(total, tape.square(tape.add_const(q, -want)));
            }
            nd::NodeId loss = tape.scale(total, 1.0 / 16.0);
            tape.backward(loss);
            auto leaves = leaf_list(r);
            nd::apply_adam(tape, leaves, params, adam, 1e-2);
        }
    }

    auto mean_log_std_after = [&](double alpha) {
        PolicyNet policy = base;  // identical start
        auto params = policy.parameters();
        nd::AdamState adam = nd::AdamState::init(params);
        Rng noise_rng(93);
        Tape tape;
        for (int step = 0; step < 500; ++step) {
            auto noise = draw_actor_noise(histories.size(), D, noise_rng);
            tape.reset();
            PolicyRefs pr = put(tape, policy);
            nd::MlpHeadRef ch = put(tape, critic.head);
            nd::NodeId loss = actor_loss_node(tape, pr, critic, ch, histories, alpha, noise);
            tape.backward(loss);
            auto leaves = leaf_list(pr);
            nd::apply_adam(tape, leaves, params, adam, 3e-3);
        }
        double acc = 0.0;
        for (const auto& hs : histories) {
            HistoryState h = policy.init_history(3);
            for (std::size_t t = 0; t + 1 < hs.cutoff; ++t) policy.advance(h, hs.trajectory.step(t));
            acc += policy.action_dist(h).log_std[0];
        }
        return acc / histories.size();
    };

    const double lo = mean_log_std_after(0.05);
    const double mid = mean_log_std_after(0.2);
    const double hi = mean_log_std_after(1.0);
    CHECK(lo < mid);
    CHECK(mid < hi);
}
