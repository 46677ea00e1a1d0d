#pragma once

#include <functional>
#include <utility>
#include <vector>

#include <timegci/nd/tape.hpp>
#include <timegci/nd/tensor.hpp>

// Finite-difference gradient oracle. Independent of the tape's backward pass:
// it only uses forward evaluations at perturbed parameter values.
//
// Central differences degrade to O(h) accuracy when a pre-activation sits
// within ~h of an ELU/clamp kink, so test states must be in general position;
// all call sites use fixed seeds verified to give several-x margin.

namespace testutil {

struct TapeLoss {
    timegci::nd::NodeId loss;
    std::vector<timegci::nd::NodeId> leaves;  // aligned with the parameter list
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
};

// rel(ad, fd) = |ad - fd| / max(1e-3, |ad|, |fd|); the floor keeps coordinates
// with near-zero true gradient from amplifying finite-difference noise.
template <typename BuildTape>
GradCheckReport grad_check(std::vector<timegci::nd::Tensor*> params, BuildTape build,
                           double h = 1e-5) {
    using timegci::nd::Tape;

    Tape tape;
    TapeLoss tl = build(tape);
    tape.backward(tl.loss);
    std::vector<std::vector<double>> analytic;
    for (auto id : tl.leaves) {
        auto g = tape.grad(id);
        analytic.emplace_back(g.begin(), g.end());
    }

    auto eval = [&]() {
        Tape t;
        TapeLoss l = build(t);
        return t.value_scalar(l.loss);
    };

    GradCheckReport report;
    for (std::size_t k = 0; k < params.size(); ++k) {
        timegci::nd::Tensor& p = *params[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double saved = p[i];
            p[i] = saved + h;
            const double fplus = eval();
            p[i] = saved - h;
            const double fminus = eval();
            p[i] = saved;
            const double fd = (fplus - fminus) / (2.0 * h);
            const double ad = analytic[k][i];
            const double denom = std::max({1e-3, std::abs(ad), std::abs(fd)});
            report.max_rel_err = std::max(report.max_rel_err, std::abs(ad - fd) / denom);
            ++report.checked;
        }
    }
    return report;
}

}  // namespace testutil
