#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "energy.hpp"
#include "eval.hpp"
#include "toy.hpp"

// Executable checks for the framework's two structural results and the two
// diagnostics built on the analytic toy sources:
//  - contrastive optimality: the energy loss is globally minimized where
//    F - log Z matches the true log-density, so a converged fit should land
//    on it up to estimation error;
//  - gradient equality: when the sampler equals the normalized energy model,
//    the contrastive gradient reduces to -(T/2) times the moment-matching
//    gradient;
//  - the expected-quality-difference estimator is zero at the source itself
//    and positive for a corrupted model;
//  - perturbed-history forecasting: multi-step error grows slower for a
//    trajectory-matching model than for a pure conditional-MLE one.

namespace timegci {

// ---- contrastive optimality -------------------------------------------------

struct NceCheckResult {
    double r2 = 0.0;
    double slope = 0.0;
    double final_loss = 0.0;
    bool pass = false;
};

struct NceCheckOptions {
    std::size_t train_steps = 8000;
    std::size_t batch = 128;
    double lr = 1e-3;
    std::size_t grid = 30;
    double grid_lo = 0.05;
    double grid_hi = 0.95;
    std::size_t hidden = 32;
    double uniform_mix = 0.5;  // per-step weight of the uniform kernel in the noise
    double r2_threshold = 0.95;
    double slope_lo = 0.9;
    double slope_hi = 1.1;
};

inline double lr_at(std::size_t step, const NceCheckOptions& opts) {
    if (step >= opts.train_steps * 9 / 10) return opts.lr / 10.0;
    if (step >= opts.train_steps * 7 / 10) return opts.lr / 3.0;
    return opts.lr;
}

// Fixed noise process for the optimality check: at every step, a coin picks
// between the (untrained) policy kernel and a uniform kernel on (0,1). The
// mixture keeps the noise density bounded below over the whole evaluation
// grid, so the contrastive fit is well-conditioned everywhere on it, and its
// log-density is exact: per step, log(w + (1-w) pi(x|h)).
struct MixtureNoise {
    PolicyNet net;
    double uniform_weight = 0.5;

    Trajectory sample(std::size_t T, nd::Rng& rng) const {
        Trajectory tr(T, 1);
        HistoryState h = net.init_history(T);
        for (std::size_t t = 0; t < T; ++t) {
            double x;
            if (rng.uniform() < uniform_weight) {
                x = clip_interior(rng.uniform());
            } else {
                x = net.sample_action(h, rng).first[0];
            }
            tr.values(t, 0) = x;
            net.advance(h, tr.step(t));
        }
        return tr;
    }

    double log_density(const Trajectory& tr) const {
        HistoryState h = net.init_history(tr.length());
        double total = 0.0;
        for (std::size_t t = 0; t < tr.length(); ++t) {
            const double lp = net.log_density(h, tr.step(t));
            // log(w * 1 + (1-w) * exp(lp)), stable in both tails
            const double a = std::log(uniform_weight);
            const double b = std::log1p(-uniform_weight) + lp;
            total += std::max(a, b) + std::log1p(std::exp(-std::abs(a - b)));
            net.advance(h, tr.step(t));
        }
        return total;
    }
};

// Trains the energy against the fixed mixture noise on fresh samples from the
// analytic source, then regresses the fitted log-density against the true one
// over a grid of trajectories.
inline NceCheckResult nce_optimality_check(std::uint64_t seed, const ToySource& source = {},
                                           NceCheckOptions opts = {}) {
    nd::Rng init_rng(nd::derive_seed(seed, 0xACE0));
    MixtureNoise noise;
    noise.net = PolicyNet::init(1, opts.hidden, init_rng);
    noise.uniform_weight = opts.uniform_mix;
    EnergyNet energy = EnergyNet::init(1, opts.hidden, init_rng);

    nd::Rng rng(nd::derive_seed(seed, 0xACE1));
    auto params = energy.parameters();
    nd::AdamState adam = nd::AdamState::init(params);
    nd::Tape tape;
    NceCheckResult result;
    for (std::size_t step = 0; step < opts.train_steps; ++step) {
        tape.reset();
        EnergyRefs r = put(tape, energy);
        nd::NodeId real_term = tape.scalar(0.0);
        nd::NodeId fake_term = tape.scalar(0.0);
        for (std::size_t k = 0; k < opts.batch; ++k) {
            const Trajectory real = source.sample(rng);
            nd::NodeId u_real = tape.add_const(
                tape.sub(trajectory_energy_node(tape, r, real), r.log_z),
                -noise.log_density(real));
            real_term = tape.add(real_term, tape.softplus(tape.neg(u_real)));

            const Trajectory fake = noise.sample(source.T, rng);
            nd::NodeId u_fake = tape.add_const(
                tape.sub(trajectory_energy_node(tape, r, fake), r.log_z),
                -noise.log_density(fake));
            fake_term = tape.add(fake_term, tape.softplus(u_fake));
        }
        const double scale = 1.0 / static_cast<double>(opts.batch);
        nd::NodeId loss = tape.add(tape.scale(real_term, scale), tape.scale(fake_term, scale));
        tape.backward(loss);
        result.final_loss = tape.value_scalar(loss);
        auto leaves = leaf_list(r);
        nd::apply_adam(tape, leaves, params, adam, lr_at(step, opts));
    }

    // grid regression of fitted vs true log-density
    std::vector<double> truth, fitted;
    const std::size_t G = opts.grid;
    for (std::size_t i = 0; i < G; ++i) {
        for (std::size_t j = 0; j < G; ++j) {
            Trajectory tr(2, 1);
            tr.values(0, 0) =
                opts.grid_lo + (opts.grid_hi - opts.grid_lo) * static_cast<double>(i) / (G - 1);
            tr.values(1, 0) =
                opts.grid_lo + (opts.grid_hi - opts.grid_lo) * static_cast<double>(j) / (G - 1);
            truth.push_back(source.log_density(tr));
            fitted.push_back(energy.trajectory_energy(tr) - energy.log_z[0]);
        }
    }
    const std::size_t n = truth.size();
    double mx = 0.0, my = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        mx += truth[k];
        my += fitted[k];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        sxx += (truth[k] - mx) * (truth[k] - mx);
        syy += (fitted[k] - my) * (fitted[k] - my);
        sxy += (truth[k] - mx) * (fitted[k] - my);
    }
    result.slope = sxy / sxx;
    result.r2 = (sxy * sxy) / (sxx * syy);
    result.pass = result.r2 >= opts.r2_threshold && result.slope >= opts.slope_lo &&
                  result.slope <= opts.slope_hi;
    return result;
}

// ---- gradient equality --------------------------------------------------------

struct GradEqCoordinate {
    std::string name;
    double contrastive = 0.0;  // Monte-Carlo d L_energy / d coord
    double moment = 0.0;       // -(T/2) (E_s - E_model) of dF / d coord
    double se = 0.0;           // combined standard error
    double z = 0.0;
};

struct GradEqCheckResult {
    std::vector<GradEqCoordinate> coords;
    bool pass = false;
};

// One-step analytic family: F(x) = log squashedN(x; mu, sigma), log Z folded
// in as a third coordinate; the sampler is set exactly equal to the
// normalized model. Both estimators use independent sample streams.
inline GradEqCheckResult gradient_equality_check(std::uint64_t seed, std::size_t n_samples = 100000) {
    const double mu_s = -0.4, sigma_s = 1.1;   // data source
    const double mu_m = 0.3, sigma_m = 0.9;    // model == sampler

    auto sample = [](double mu, double sigma, nd::Rng& rng) {
        return squash(std::clamp(mu + sigma * rng.normal(), -kSampleZClip, kSampleZClip));
    };
    auto log_pdf = [](double mu, double sigma, double x) {
        const double z = unsquash(x);
        const double u = (z - mu) / sigma;
        return -0.5 * u * u - std::log(sigma) - kHalfLog2Pi - squash_log_jacobian(z);
    };
    // dF/d(mu), dF/d(log sigma), dF/d(log Z) at the model parameters
    auto grad_f = [&](double x, double out[3]) {
        const double z = unsquash(x);
        const double u = (z - mu_m) / sigma_m;
        out[0] = u / sigma_m;
        out[1] = u * u - 1.0;
        out[2] = 0.0;
    };

    struct Accum {
        double sum[3] = {}, sq[3] = {};
        void add(const double g[3]) {
            for (int i = 0; i < 3; ++i) {
                sum[i] += g[i];
                sq[i] += g[i] * g[i];
            }
        }
        void mean_se(std::size_t n, double mean[3], double se[3]) const {
            for (int i = 0; i < 3; ++i) {
                mean[i] = sum[i] / static_cast<double>(n);
                const double var = std::max(0.0, sq[i] / static_cast<double>(n) - mean[i] * mean[i]);
                se[i] = std::sqrt(var / static_cast<double>(n));
            }
        }
    };

    // Estimator A: d/d phi of the contrastive loss. With u(x) = F(x) - logZ -
    // log p_model(x) identically zero, the per-sample gradient weights are
    // sigmoid(0) = 1/2 on both sides.
    Accum acc_a;
    {
        nd::Rng rs(nd::derive_seed(seed, 1)), rm(nd::derive_seed(seed, 2));
        for (std::size_t k = 0; k < n_samples; ++k) {
            const double xs = sample(mu_s, sigma_s, rs);
            const double xm = sample(mu_m, sigma_m, rm);
            const double us = log_pdf(mu_m, sigma_m, xs) - log_pdf(mu_m, sigma_m, xs);
            const double um = log_pdf(mu_m, sigma_m, xm) - log_pdf(mu_m, sigma_m, xm);
            double gs[3], gm[3], g[3];
            grad_f(xs, gs);
            grad_f(xm, gm);
            const double ws = -nd::detail::stable_sigmoid(-us);  // -sigmoid(-u) on real side
            const double wm = nd::detail::stable_sigmoid(um);    // +sigmoid(u) on fake side
            // d u / d logZ = -1, d u / d(mu, log sigma) = dF
            g[0] = ws * gs[0] + wm * gm[0];
            g[1] = ws * gs[1] + wm * gm[1];
            g[2] = ws * -1.0 + wm * -1.0;
            acc_a.add(g);
        }
    }

    // Estimator B: -(T/2) [E_source dF - E_model dF] with T = 1.
    Accum acc_b;
    {
        nd::Rng rs(nd::derive_seed(seed, 3)), rm(nd::derive_seed(seed, 4));
        for (std::size_t k = 0; k < n_samples; ++k) {
            double gs[3], gm[3], g[3];
            grad_f(sample(mu_s, sigma_s, rs), gs);
            grad_f(sample(mu_m, sigma_m, rm), gm);
            for (int i = 0; i < 3; ++i) g[i] = -0.5 * (gs[i] - gm[i]);
            acc_b.add(g);
        }
    }

    double ma[3], sa[3], mb[3], sb[3];
    acc_a.mean_se(n_samples, ma, sa);
    acc_b.mean_se(n_samples, mb, sb);

    GradEqCheckResult result;
    result.pass = true;
    const char* names[3] = {"mu", "log_sigma", "log_Z"};
    for (int i = 0; i < 3; ++i) {
        GradEqCoordinate c;
        c.name = names[i];
        c.contrastive = ma[i];
        c.moment = mb[i];
        c.se = std::sqrt(sa[i] * sa[i] + sb[i] * sb[i]);
        c.z = c.se > 0 ? std::abs(c.contrastive - c.moment) / c.se : 0.0;
        result.pass = result.pass && c.z <= 3.0;
        result.coords.push_back(c);
    }
    return result;
}

// ---- expected quality difference ------------------------------------------------

struct EqdCheckResult {
    EqdResult identity;
    EqdResult corrupted;
    bool pass = false;
};

// The corrupting mean shift must be large enough to push mass into genuinely
// low-density regions: small shifts toward the squash boundary can RAISE the
// average quality through the Jacobian term (measured: shift +0.5 gives
// delta = -0.36, shift +2.0 gives +1.20).
inline EqdCheckResult eqd_check(std::uint64_t seed, std::size_t n_mc = 20000,
                                double corruption = 2.0) {
    ToySource source;
    ToySource shifted = source;
    shifted.m1 += corruption;
    shifted.c0 += corruption;

    EqdCheckResult result;
    result.identity = expected_quality_difference(
        source, [&](nd::Rng& rng) { return source.sample(rng); }, n_mc,
        nd::derive_seed(seed, 10));
    result.corrupted = expected_quality_difference(
        source, [&](nd::Rng& rng) { return shifted.sample(rng); }, n_mc,
        nd::derive_seed(seed, 11));
    result.pass = std::abs(result.identity.estimate) <= 3.0 * result.identity.std_error &&
                  result.corrupted.estimate > 3.0 * result.corrupted.std_error;
    return result;
}

// ---- perturbation ablation ---------------------------------------------------------

struct PerturbCheckResult {
    PerturbationGrid model_a;  // trajectory-matching model
    PerturbationGrid model_b;  // conditional-MLE baseline
    bool single_step_parity = false;
    bool advantage_grows = false;
    bool monotone_in_noise = false;
    bool pass = false;
};

// Compares two trained models on the perturbed-history forecast grid; both
// must have been trained on data from the same simulator.
inline PerturbCheckResult perturbation_check(const PolicyNet& trajectory_model,
                                             const PolicyNet& mle_model, const SineSimulator& sim,
                                             double sigma, std::size_t episodes,
                                             std::uint64_t seed) {
    PerturbCheckResult r;
    r.model_a = perturbation_forecast_mse(trajectory_model, sim, sigma, episodes, seed);
    r.model_b = perturbation_forecast_mse(mle_model, sim, sigma, episodes, seed);

    const double d1 = std::abs(r.model_a.mse[0][0] - r.model_b.mse[0][0]);
    const double se1 = 2.0 * std::sqrt(r.model_a.std_error[0][0] * r.model_a.std_error[0][0] +
                                       r.model_b.std_error[0][0] * r.model_b.std_error[0][0]);
    r.single_step_parity = d1 <= se1;

    const double adv_t2 = r.model_b.mse[0][1] - r.model_a.mse[0][1];
    const double adv_t5 = r.model_b.mse[0][4] - r.model_a.mse[0][4];
    r.advantage_grows = adv_t5 > adv_t2;

    r.monotone_in_noise = true;
    for (int t = 0; t < 5; ++t)
        for (int c = 1; c < 5; ++c) {
            r.monotone_in_noise = r.monotone_in_noise &&
                                  r.model_a.mse[c][t] >= r.model_a.mse[c - 1][t] &&
                                  r.model_b.mse[c][t] >= r.model_b.mse[c - 1][t];
        }

    r.pass = r.single_step_parity && r.advantage_grows && r.monotone_in_noise;
    return r;
}

}  // namespace timegci
