#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "nd/adam.hpp"
#include "nd/layers.hpp"
#include "policy.hpp"
#include "toy.hpp"

namespace timegci {

// ---- TSTR predictive score -----------------------------------------------------
//
// Train-on-Synthetic, Test-on-Real: a small recurrent regressor learns to
// predict x_{t+k} from the prefix (x_1..x_t) on synthetic data; the score is
// its mean absolute error on real data. Direct (single-shot) multi-horizon
// regression, not recursive rollout.

struct PredictorOptions {
    std::size_t steps = 5000;
    double lr = 1e-3;
    std::size_t batch = 64;
    std::size_t hidden = 0;  // 0: max(1, D/2)
};

namespace eval_detail {

struct Predictor {
    nd::LstmParams cell;
    nd::AffineParams readout;

    std::vector<nd::Tensor*> parameters() {
        std::vector<nd::Tensor*> out;
        nd::collect(out, cell);
        nd::collect(out, readout);
        return out;
    }
};

struct PredictorRefs {
    nd::LstmRef cell;
    nd::AffineRef readout;
};

inline PredictorRefs put(nd::Tape& tape, const Predictor& p) {
    return PredictorRefs{put(tape, p.cell), put(tape, p.readout)};
}

inline std::vector<nd::NodeId> leaf_list(const PredictorRefs& r) {
    std::vector<nd::NodeId> out;
    nd::collect_leaves(out, r.cell);
    nd::collect_leaves(out, r.readout);
    return out;
}

// Mean absolute k-step-ahead error of one sequence on the tape.
inline nd::NodeId sequence_mae_node(nd::Tape& tape, const PredictorRefs& r, const Trajectory& tr,
                                    std::size_t horizon) {
    const std::size_t T = tr.length();
    nd::NodeId h = tape.leaf(std::vector<double>(r.cell.hidden, 0.0));
    nd::NodeId c = tape.leaf(std::vector<double>(r.cell.hidden, 0.0));
    nd::NodeId total = tape.scalar(0.0);
    std::size_t terms = 0;
    for (std::size_t t = 0; t + horizon < T; ++t) {
        nd::lstm_step(tape, r.cell, tape.leaf(tr.step(t)), h, c);
        nd::NodeId pred = apply(tape, r.readout, h);
        nd::NodeId err = tape.abs(tape.sub(pred, tape.leaf(tr.step(t + horizon))));
        total = tape.add(total, tape.sum(err));
        terms += tr.dim();
    }
    return tape.scale(total, 1.0 / static_cast<double>(terms));
}

inline double sequence_mae(const Predictor& p, const Trajectory& tr, std::size_t horizon) {
    const std::size_t T = tr.length();
    nd::LstmState s = nd::LstmState::zeros(p.cell.hidden_size);
    std::vector<double> pred(tr.dim());
    double total = 0.0;
    std::size_t terms = 0;
    for (std::size_t t = 0; t + horizon < T; ++t) {
        nd::lstm_step(p.cell, tr.step(t), s);
        nd::affine_apply(p.readout, s.h, pred);
        auto want = tr.step(t + horizon);
        for (std::size_t i = 0; i < pred.size(); ++i) total += std::abs(pred[i] - want[i]);
        terms += tr.dim();
    }
    return total / static_cast<double>(terms);
}

}  // namespace eval_detail

inline double predictive_score(const Dataset& synthetic, const Dataset& real_test,
                               std::size_t horizon, std::uint64_t seed,
                               PredictorOptions opts = {}) {
    if (horizon < 1) throw std::invalid_argument("predictive_score: horizon must be >= 1");
    if (synthetic.size() == 0 || real_test.size() == 0)
        throw std::invalid_argument("predictive_score: empty dataset");
    synthetic.check_uniform();
    real_test.check_uniform();
    if (synthetic.dim() != real_test.dim() || synthetic.length() != real_test.length())
        throw std::invalid_argument("predictive_score: (T, D) mismatch between datasets");
    const std::size_t T = synthetic.length(), D = synthetic.dim();
    if (horizon >= T) throw std::invalid_argument("predictive_score: horizon must be < T");

    nd::Rng rng(nd::derive_seed(seed, 0xE7A1));
    eval_detail::Predictor p;
    const std::size_t hidden = opts.hidden > 0 ? opts.hidden : std::max<std::size_t>(1, D / 2);
    p.cell = nd::LstmParams::init(D, hidden, rng);
    p.readout = nd::AffineParams::init(D, hidden, rng);

    auto params = p.parameters();
    nd::AdamState adam = nd::AdamState::init(params);
    nd::Tape tape;
    for (std::size_t step = 0; step < opts.steps; ++step) {
        tape.reset();
        eval_detail::PredictorRefs r = put(tape, p);
        nd::NodeId total = tape.scalar(0.0);
        for (std::size_t b = 0; b < opts.batch; ++b) {
            const Trajectory& tr = synthetic.trajectories[rng.uniform_index(synthetic.size())];
            total = tape.add(total, eval_detail::sequence_mae_node(tape, r, tr, horizon));
        }
        nd::NodeId loss = tape.scale(total, 1.0 / static_cast<double>(opts.batch));
        tape.backward(loss);
        auto leaves = leaf_list(r);
        nd::apply_adam(tape, leaves, params, adam, opts.lr);
    }

    double total = 0.0;
    for (const Trajectory& tr : real_test.trajectories)
        total += eval_detail::sequence_mae(p, tr, horizon);
    return total / static_cast<double>(real_test.size());
}

// ---- cross-correlation score ------------------------------------------------------

struct XcorrResult {
    double score = 0.0;
    std::size_t zero_variance_entries = 0;  // matrix cells zeroed by the guard

    operator double() const { return score; }
};

namespace eval_detail {

// Pearson correlation matrix across the sample dimension at a fixed step;
// entries whose variance denominator underflows are zeroed and counted.
inline std::vector<double> correlation_at_step(const Dataset& ds, std::size_t t,
                                               std::size_t& zeroed) {
    const std::size_t n = ds.size(), D = ds.dim();
    std::vector<double> mean(D, 0.0);
    for (const auto& tr : ds.trajectories)
        for (std::size_t i = 0; i < D; ++i) mean[i] += tr.values(t, i);
    for (auto& m : mean) m /= static_cast<double>(n);
    std::vector<double> cov(D * D, 0.0);
    for (const auto& tr : ds.trajectories)
        for (std::size_t i = 0; i < D; ++i) {
            const double di = tr.values(t, i) - mean[i];
            for (std::size_t j = 0; j < D; ++j) cov[i * D + j] += di * (tr.values(t, j) - mean[j]);
        }
    std::vector<double> corr(D * D, 0.0);
    for (std::size_t i = 0; i < D; ++i)
        for (std::size_t j = 0; j < D; ++j) {
            const double denom = std::sqrt(cov[i * D + i] * cov[j * D + j]);
            if (denom < 1e-12) {
                ++zeroed;
                corr[i * D + j] = 0.0;
            } else {
                corr[i * D + j] = cov[i * D + j] / denom;
            }
        }
    return corr;
}

}  // namespace eval_detail

// (1/T) sum_t sum_{i,j} |C_real(t)_{ij} - C_synth(t)_{ij}|.
inline XcorrResult xcorr_score(const Dataset& real, const Dataset& synthetic) {
    real.check_uniform();
    synthetic.check_uniform();
    if (real.dim() != synthetic.dim() || real.length() != synthetic.length())
        throw std::invalid_argument("xcorr_score: (T, D) mismatch");
    if (real.size() < 30 || synthetic.size() < 30)
        throw std::invalid_argument("xcorr_score: needs at least 30 samples per side");
    const std::size_t T = real.length(), D = real.dim();
    XcorrResult result;
    double total = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        auto cr = eval_detail::correlation_at_step(real, t, result.zero_variance_entries);
        auto cs = eval_detail::correlation_at_step(synthetic, t, result.zero_variance_entries);
        for (std::size_t k = 0; k < D * D; ++k) total += std::abs(cr[k] - cs[k]);
    }
    result.score = total / static_cast<double>(T);
    return result;
}

// ---- expected quality difference ----------------------------------------------------
//
// Monte-Carlo estimate of E_{source} F_s - E_{model} F_s where F_s is the toy
// source's own log-density; zero when the model equals the source.

struct EqdResult {
    double estimate = 0.0;
    double std_error = 0.0;
};

inline EqdResult expected_quality_difference(const ToySource& source,
                                             const std::function<Trajectory(nd::Rng&)>& model,
                                             std::size_t n_mc, std::uint64_t seed) {
    if (n_mc < 1000) throw std::invalid_argument("expected_quality_difference: n_mc >= 1000");
    nd::Rng rng_s(nd::derive_seed(seed, 1));
    nd::Rng rng_m(nd::derive_seed(seed, 2));
    double sum_s = 0.0, sq_s = 0.0, sum_m = 0.0, sq_m = 0.0;
    for (std::size_t k = 0; k < n_mc; ++k) {
        const double fs = source.log_density(source.sample(rng_s));
        sum_s += fs;
        sq_s += fs * fs;
        const double fm = source.log_density(clip_interior(model(rng_m)));
        sum_m += fm;
        sq_m += fm * fm;
    }
    const double n = static_cast<double>(n_mc);
    const double mean_s = sum_s / n, mean_m = sum_m / n;
    const double var_s = std::max(0.0, sq_s / n - mean_s * mean_s);
    const double var_m = std::max(0.0, sq_m / n - mean_m * mean_m);
    EqdResult r;
    r.estimate = mean_s - mean_m;
    r.std_error = std::sqrt((var_s + var_m) / n);
    return r;
}

// ---- perturbation-forecast ablation ---------------------------------------------------
//
// Gaussian noise N(0, (c sigma)^2) is injected at a random step K of an
// otherwise exact sinusoid; the model forecasts t steps ahead by open-loop
// sampling from the perturbed history and is scored against the analytic
// continuation. The same episodes and unit perturbations are shared across
// noise multipliers so the grid is comparable cell-to-cell.

struct PerturbationGrid {
    // [c-1][t-1] for c, t in {1..5}
    double mse[5][5] = {};
    double std_error[5][5] = {};
};

inline PerturbationGrid perturbation_forecast_mse(const PolicyNet& model,
                                                  const SineSimulator& sim, double sigma,
                                                  std::size_t episodes, std::uint64_t seed) {
    if (episodes < 100) throw std::invalid_argument("perturbation_forecast_mse: episodes >= 100");
    const std::size_t T = sim.T, D = sim.D;
    if (model.feature_dim != D) throw std::invalid_argument("perturbation grid: dimension mismatch");
    PerturbationGrid grid;
    for (std::size_t ahead = 1; ahead <= 5; ++ahead) {
        if (ahead >= T) throw std::invalid_argument("perturbation grid: t_ahead must be < T");
        std::vector<double> sum(5, 0.0), sq(5, 0.0);
        nd::Rng rng(nd::derive_seed(seed, 0x9E37 + ahead));
        std::vector<double> unit(D);
        for (std::size_t ep = 0; ep < episodes; ++ep) {
            const SineSimulator::Episode e = sim.draw(rng);
            // K uniform on {1..T-1}, redrawn until the horizon fits
            std::size_t K = 1 + rng.uniform_index(T - 1);
            while (K + ahead > T) K = 1 + rng.uniform_index(T - 1);
            for (auto& u : unit) u = rng.normal();
            const std::uint64_t rollout_seed = rng.next_u64();

            for (std::size_t c = 1; c <= 5; ++c) {
                HistoryState h = model.init_history(T);
                for (std::size_t t = 0; t + 1 < K; ++t) {
                    std::vector<double> x(D);
                    for (std::size_t i = 0; i < D; ++i) x[i] = sim.value(e, t, i);
                    model.advance(h, x);
                }
                std::vector<double> xk(D);
                for (std::size_t i = 0; i < D; ++i)
                    xk[i] = sim.value(e, K - 1, i) + static_cast<double>(c) * sigma * unit[i];
                model.advance(h, xk);

                nd::Rng roll(rollout_seed);
                std::vector<double> x(D);
                for (std::size_t step = 0; step < ahead; ++step) {
                    auto [sample, logp] = model.sample_action(h, roll);
                    (void)logp;
                    x = sample;
                    if (step + 1 < ahead) model.advance(h, x);
                }
                double err = 0.0;
                for (std::size_t i = 0; i < D; ++i) {
                    const double truth = sim.value(e, K - 1 + ahead, i);
                    err += (x[i] - truth) * (x[i] - truth);
                }
                err /= static_cast<double>(D);
                sum[c - 1] += err;
                sq[c - 1] += err * err;
            }
        }
        const double n = static_cast<double>(episodes);
        for (std::size_t c = 1; c <= 5; ++c) {
            const double mean = sum[c - 1] / n;
            grid.mse[c - 1][ahead - 1] = mean;
            grid.std_error[c - 1][ahead - 1] =
                std::sqrt(std::max(0.0, sq[c - 1] / n - mean * mean) / n);
        }
    }
    return grid;
}

// ---- report -------------------------------------------------------------------------

struct EvalReport {
    double predictive_score_1 = 0.0;
    double predictive_score_3 = 0.0;
    double predictive_score_5 = 0.0;
    double xcorr = 0.0;
    std::size_t xcorr_zero_variance = 0;
    std::uint64_t seed = 0;
};

inline EvalReport evaluate_synthetic(const Dataset& synthetic, const Dataset& real_test,
                                     std::uint64_t seed, PredictorOptions opts = {}) {
    EvalReport report;
    report.seed = seed;
    report.predictive_score_1 = predictive_score(synthetic, real_test, 1, seed, opts);
    report.predictive_score_3 = predictive_score(synthetic, real_test, 3, seed, opts);
    report.predictive_score_5 = predictive_score(synthetic, real_test, 5, seed, opts);
    XcorrResult xc = xcorr_score(real_test, synthetic);
    report.xcorr = xc.score;
    report.xcorr_zero_variance = xc.zero_variance_entries;
    return report;
}

}  // namespace timegci
