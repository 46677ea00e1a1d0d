#pragma once

#include <cmath>
#include <stdexcept>

#include "policy.hpp"

namespace timegci {

// One-dimensional squashed-Gaussian autoregressive source with an analytic
// transition density: z_1 ~ N(m1, s1^2), z_t ~ N(c0 + c1 * x_{t-1}, s2^2) for
// t > 1, x_t = squash(z_t). Serves as a known ground truth for the
// quality-difference diagnostic and the contrastive-optimality checks.
struct ToySource {
    double m1 = 0.2;
    double s1 = 0.8;
    double c0 = -0.3;
    double c1 = 1.0;
    double s2 = 0.7;
    std::size_t T = 2;

    double step_mean(std::size_t t, double prev_x) const {
        return t == 0 ? m1 : c0 + c1 * prev_x;
    }
    double step_std(std::size_t t) const { return t == 0 ? s1 : s2; }

    // log pi_s(x_t | h_t) with x strictly inside (0,1)
    double step_log_density(std::size_t t, double prev_x, double x) const {
        if (!(x > 0.0 && x < 1.0))
            throw std::invalid_argument("ToySource: x must lie strictly inside (0,1)");
        const double z = unsquash(x);
        const double sd = step_std(t);
        const double u = (z - step_mean(t, prev_x)) / sd;
        return -0.5 * u * u - std::log(sd) - kHalfLog2Pi - squash_log_jacobian(z);
    }

    // F_s(tau) = sum_t log pi_s(x_t | h_t) = log p_s(tau)
    double log_density(const Trajectory& tr) const {
        if (tr.dim() != 1 || tr.length() != T)
            throw std::invalid_argument("ToySource: trajectory shape mismatch");
        double total = 0.0;
        double prev = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
            total += step_log_density(t, prev, tr.values(t, 0));
            prev = tr.values(t, 0);
        }
        return total;
    }

    Trajectory sample(nd::Rng& rng) const {
        Trajectory tr(T, 1);
        double prev = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
            double z = step_mean(t, prev) + step_std(t) * rng.normal();
            z = std::clamp(z, -kSampleZClip, kSampleZClip);
            tr.values(t, 0) = squash(z);
            prev = tr.values(t, 0);
        }
        return tr;
    }
};

// Noise-free multivariate sinusoid process whose continuation is analytic;
// the generator behind the sines dataset, exposed per episode so ablations
// can compare model forecasts against exact ground truth.
struct SineSimulator {
    std::size_t T = 24;
    std::size_t D = 5;
    double f_max = 0.1;
    double phase_max = 0.1;

    struct Episode {
        std::vector<double> freq, phase;
    };

    Episode draw(nd::Rng& rng) const {
        Episode ep;
        ep.freq.resize(D);
        ep.phase.resize(D);
        for (std::size_t i = 0; i < D; ++i) {
            ep.freq[i] = rng.uniform(0.0, f_max);
            ep.phase[i] = rng.uniform(0.0, phase_max);
        }
        return ep;
    }

    // t is 0-based; matches generate_sines exactly
    double value(const Episode& ep, std::size_t t, std::size_t i) const {
        return (std::sin(ep.freq[i] * static_cast<double>(t) + ep.phase[i]) + 1.0) / 2.0;
    }

    Dataset dataset(std::size_t n, std::uint64_t seed) const {
        return generate_sines(n, T, D, seed, f_max, phase_max);
    }
};

}  // namespace timegci
