#pragma once

#include <random>

#include "nnarx.hpp"

namespace nnmpc {

/// Outcome of the trajectory-pair contraction test.
struct IncrementalStabilityReport {
    bool passed = false;
    double rho = 0.0;     // fitted overshoot constant
    double lambda = 1.0;  // fitted decay rate
    int worst_steps_to_tol = -1;  // largest step count needed to reach gap_tol over all pairs (-1: never)
    double worst_final_gap = 0.0;
};

/// Empirical check of ||x_a,k - x_b,k|| <= rho ||x_a,0 - x_b,0|| lambda^k for random pairs of initial
/// states driven by the same random input sequence. States and inputs are drawn uniformly from
/// [-state_scale, state_scale] and `box` (in model coordinates).
inline IncrementalStabilityReport incremental_stability_test(const NnarxModel& model, const InputBox& box,
                                                             int pairs = 20, int steps = 200, double gap_tol = 1e-8,
                                                             double state_scale = 1.0, std::uint64_t seed = 7) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const Index n = model.state_dim(), m = model.input_dim();
    IncrementalStabilityReport rep;
    rep.worst_steps_to_tol = 0;
    double log_lambda = -std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> all_gaps;

    for (int p = 0; p < pairs; ++p) {
        Vec xa(n), xb(n);
        for (Index i = 0; i < n; ++i) {
            xa(i) = state_scale * (2 * unit(rng) - 1);
            xb(i) = state_scale * (2 * unit(rng) - 1);
        }
        std::vector<double> gaps{(xa - xb).norm()};
        int reached = -1;
        for (int k = 1; k <= steps; ++k) {
            Vec u(m);
            for (Index i = 0; i < m; ++i) u(i) = box.lower(i) + (box.upper(i) - box.lower(i)) * unit(rng);
            xa = model.step(xa, u);
            xb = model.step(xb, u);
            if (!xa.allFinite() || !xb.allFinite()) return rep;
            gaps.push_back((xa - xb).norm());
            if (reached < 0 && gaps.back() < gap_tol) reached = k;
        }
        if (reached < 0) {
            rep.worst_steps_to_tol = -1;
        } else if (rep.worst_steps_to_tol >= 0) {
            rep.worst_steps_to_tol = std::max(rep.worst_steps_to_tol, reached);
        }
        rep.worst_final_gap = std::max(rep.worst_final_gap, gaps.back());

        // Least-squares slope of log(gap) above the round-off floor, after the register flush.
        const Index start = std::min<Index>(model.horizon(), steps);
        double sk = 0, sl = 0, skk = 0, skl = 0;
        int cnt = 0;
        for (size_t k = static_cast<size_t>(start); k < gaps.size(); ++k) {
            if (gaps[k] <= 1e-13 * gaps[0]) break;
            double l = std::log(gaps[k]);
            sk += k;
            sl += l;
            skk += double(k) * k;
            skl += k * l;
            ++cnt;
        }
        if (cnt >= 2) {
            double slope = (cnt * skl - sk * sl) / (cnt * skk - sk * sk);
            log_lambda = std::max(log_lambda, slope);
        }
        all_gaps.push_back(std::move(gaps));
    }
    rep.lambda = std::isfinite(log_lambda) ? std::exp(log_lambda) : 0.0;
    if (rep.lambda <= 0.0) rep.lambda = 1e-3;  // every pair collapsed inside the flush window
    for (const auto& g : all_gaps) {
        if (g[0] == 0.0) continue;
        for (size_t k = 0; k < g.size(); ++k) {
            if (g[k] <= 1e-13 * g[0]) break;
            rep.rho = std::max(rep.rho, g[k] / (g[0] * std::pow(rep.lambda, double(k))));
        }
    }
    rep.passed = rep.lambda < 1.0 && rep.worst_steps_to_tol >= 0 && std::isfinite(rep.rho);
    return rep;
}

}  // namespace nnmpc
