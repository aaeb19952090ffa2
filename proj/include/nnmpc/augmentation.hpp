#pragma once

#include <cmath>
#include <optional>
#include <string>

#include "errors.hpp"
#include "linalg.hpp"
#include "model_io.hpp"
#include "nnarx.hpp"

namespace nnmpc {

// All quantities here live in the model's own coordinates (normalized units for a trained model).

struct EquilibriumTriple {
    Vec x;  // stacked [y; u] blocks
    Vec u;
    Vec y;
    double residual = 0.0;  // max(|x - f(x,u)|_inf, |y - Cx|_inf)
    int newton_iterations = 0;
};

struct EquilibriumOptions {
    int max_iterations = 100;
    int max_halvings = 20;
    double tolerance = 1e-9;
};

/// Equilibrium for output `ybar`: the state is [ybar; u] repeated over N blocks, so the problem
/// reduces to the m-dimensional root ybar = eta(x(ybar,u), u), solved by damped Newton on u.
inline EquilibriumTriple solve_equilibrium(const NnarxModel& model, const Vec& ybar, const Vec& u_guess,
                                           const InputBox& box, const EquilibriumOptions& opt = {}) {
    detail::require_dims(ybar.size() == model.output_dim() && u_guess.size() == model.input_dim(),
                         "solve_equilibrium: dimensions");
    if (model.output_dim() != model.input_dim()) throw DimensionError("solve_equilibrium: square systems only");
    const Mat S = model.input_slot_selector();
    auto residual = [&](const Vec& u) { return Vec(model.eta(model.equilibrium_state(ybar, u), u) - ybar); };
    Vec u = u_guess;
    Vec r = residual(u);
    int it = 0;
    while (r.lpNorm<Eigen::Infinity>() >= opt.tolerance) {
        if (it >= opt.max_iterations)
            throw EquilibriumNotFound("solve_equilibrium: no convergence in " + std::to_string(opt.max_iterations) +
                                      " Newton iterations (residual " + std::to_string(r.lpNorm<Eigen::Infinity>()) +
                                      ")");
        ++it;
        auto lin = model.jacobians(model.equilibrium_state(ybar, u), u);
        Mat J = lin.eta_x * S + lin.eta_u;
        Eigen::FullPivLU<Mat> lu(J);
        if (!lu.isInvertible()) throw EquilibriumNotFound("solve_equilibrium: singular Newton Jacobian");
        Vec du = -lu.solve(r);
        double t = 1.0;
        Vec u_try = u + du, r_try = residual(u_try);
        for (int h = 0; h < opt.max_halvings && !(r_try.norm() < r.norm()); ++h) {
            t *= 0.5;
            u_try = u + t * du;
            r_try = residual(u_try);
        }
        if (!r_try.allFinite()) throw EquilibriumNotFound("solve_equilibrium: non-finite residual");
        u = u_try;
        r = r_try;
    }
    EquilibriumTriple eq;
    eq.u = u;
    eq.y = ybar;
    eq.x = model.equilibrium_state(ybar, u);
    eq.residual = std::max((eq.x - model.step(eq.x, u)).lpNorm<Eigen::Infinity>(),
                           (ybar - model.output(eq.x)).lpNorm<Eigen::Infinity>());
    eq.newton_iterations = it;
    if (!box.contains(u, 1e-12))
        throw InfeasibleSetpoint("solve_equilibrium: equilibrium input lies outside the input box");
    return eq;
}

inline Linearization linearize(const NnarxModel& model, const EquilibriumTriple& eq) {
    return model.jacobians(eq.x, eq.u);
}

struct SchurCheck {
    bool stable = false;
    double spectral_radius = 0.0;
};

inline SchurCheck check_schur(const Mat& A) {
    const double rho = spectral_radius(A);
    return {rho < 1.0 - 1e-9, rho};
}

/// Steady-state gain C (I - A)^-1 B.
inline Mat dc_gain(const Mat& A, const Mat& B, const Mat& C) {
    Eigen::FullPivLU<Mat> lu(Mat::Identity(A.rows(), A.cols()) - A);
    if (!lu.isInvertible()) throw InternalInconsistency("dc_gain: I - A is singular");
    return C * lu.solve(B);
}

inline Mat reachability_matrix(const Mat& A, const Mat& B) {
    const Index n = A.rows();
    Mat R(n, n * B.cols());
    Mat blk = B;
    for (Index i = 0; i < n; ++i) {
        R.middleCols(i * B.cols(), B.cols()) = blk;
        blk = A * blk;
    }
    return R;
}

inline Mat observability_matrix(const Mat& A, const Mat& C) {
    return reachability_matrix(A.transpose(), C.transpose()).transpose();
}

struct StructuralReport {
    bool reachable = false;
    bool observable = false;
    bool dc_gain_nonsingular = false;
    Index reachability_rank = 0;
    Index observability_rank = 0;
    Mat dc_gain;
};

/// Kalman ranks (singular values below 1e-8 sigma_max count as zero) and nonsingularity of the
/// steady-state gain, which for Schur A is equivalent to the absence of an invariant zero at 1.
inline StructuralReport check_structural(const Mat& A, const Mat& B, const Mat& C, double rank_tol = 1e-8) {
    detail::require_dims(A.rows() == A.cols() && B.rows() == A.rows() && C.cols() == A.rows(),
                         "check_structural: dimensions");
    if (!check_schur(A).stable) throw ValidationError("check_structural: A must be Schur stable");
    StructuralReport rep;
    rep.reachability_rank = numerical_rank(reachability_matrix(A, B), rank_tol);
    rep.observability_rank = numerical_rank(observability_matrix(A, C), rank_tol);
    rep.reachable = rep.reachability_rank == A.rows();
    rep.observable = rep.observability_rank == A.rows();
    rep.dc_gain = dc_gain(A, B, C);
    rep.dc_gain_nonsingular =
        rep.dc_gain.rows() == rep.dc_gain.cols() && numerical_rank(rep.dc_gain, rank_tol) == rep.dc_gain.rows();
    return rep;
}

struct IntegratorGain {
    Mat mu;               // m x m
    double mu_tilde = 0;  // scalar design parameter
    Mat dc_gain;
    double loop_spectral_radius = 0;
};

/// Linearized loop on (dx, dxi): dx+ = A dx + B dxi, dxi+ = -mu C dx + dxi.
inline Mat augmented_loop_matrix(const Mat& A, const Mat& B, const Mat& C, const Mat& mu) {
    const Index n = A.rows(), m = B.cols();
    Mat L = Mat::Zero(n + m, n + m);
    L.topLeftCorner(n, n) = A;
    L.topRightCorner(n, m) = B;
    L.bottomLeftCorner(m, n) = -mu * C;
    L.bottomRightCorner(m, m).setIdentity();
    return L;
}

/// mu = mu_tilde * dc_gain^-1, with the spectral radius of the resulting linearized loop.
inline IntegratorGain compute_gain(const Mat& A, const Mat& B, const Mat& C, double mu_tilde) {
    if (!(mu_tilde > 0.0)) throw ValidationError("compute_gain: mu_tilde must be > 0");
    IntegratorGain g;
    g.dc_gain = dc_gain(A, B, C);
    Eigen::FullPivLU<Mat> lu(g.dc_gain);
    if (g.dc_gain.rows() != g.dc_gain.cols() || !lu.isInvertible())
        throw TuningFailure("compute_gain: steady-state gain is singular");
    g.mu_tilde = mu_tilde;
    g.mu = mu_tilde * lu.inverse();
    g.loop_spectral_radius = spectral_radius(augmented_loop_matrix(A, B, C, g.mu));
    return g;
}

struct MuSearch {
    double mu_tilde_max = 0.0;
    Mat mu_max;  // gain matrix at mu_tilde_max
    int evaluations = 0;
};

/// Largest mu_tilde such that the linearized loop is Schur for mu_tilde and for the 10 grid
/// points j/10 * mu_tilde, located by doubling then bisection to `resolution`.
inline MuSearch find_mu_max(const Mat& A, const Mat& B, const Mat& C, double resolution = 1e-4) {
    if (!(resolution > 0.0)) throw ValidationError("find_mu_max: resolution must be > 0");
    const Mat G = dc_gain(A, B, C);
    Eigen::FullPivLU<Mat> lu(G);
    if (G.rows() != G.cols() || !lu.isInvertible()) throw TuningFailure("find_mu_max: steady-state gain is singular");
    const Mat Ginv = lu.inverse();
    MuSearch out;
    auto stable = [&](double mt) {
        ++out.evaluations;
        return spectral_radius(augmented_loop_matrix(A, B, C, mt * Ginv)) < 1.0;
    };
    auto stable_with_grid = [&](double mt) {
        if (!stable(mt)) return false;
        for (int j = 1; j < 10; ++j)
            if (!stable(mt * j / 10.0)) return false;
        return true;
    };
    const double floor = 1e-6;
    if (!stable_with_grid(floor)) throw TuningFailure("find_mu_max: no stabilizing gain down to 1e-6");
    double lo = floor, hi = 2 * floor;
    while (stable_with_grid(hi)) {
        lo = hi;
        hi *= 2;
        if (hi > 1e8) throw TuningFailure("find_mu_max: loop stable for every gain tried");
    }
    while (hi - lo > resolution) {
        const double mid = 0.5 * (lo + hi);
        (stable_with_grid(mid) ? lo : hi) = mid;
    }
    out.mu_tilde_max = lo;
    out.mu_max = lo * Ginv;
    return out;
}

/// Augmented state chi = [x; xi; theta].
struct AugmentedLayout {
    Index n = 0, m = 0;
    Index size() const { return n + 2 * m; }
    Vec x(const Vec& chi) const { return chi.head(n); }
    Vec xi(const Vec& chi) const { return chi.segment(n, m); }
    Vec theta(const Vec& chi) const { return chi.tail(m); }
    Vec pack(const Vec& x, const Vec& xi, const Vec& theta) const {
        Vec chi(size());
        chi << x, xi, theta;
        return chi;
    }
};

struct AugmentedStep {
    Vec chi_next;
    Vec zeta;  // [Cx; u]
    Vec u;     // applied input xi + v - theta
};

/// u = xi + (v - theta); x+ = f(x,u); xi+ = xi + mu (ybar - Cx); theta+ = v.
inline AugmentedStep augmented_step(const NnarxModel& model, const Vec& chi, const Vec& v, const Vec& ybar,
                                    const Mat& mu) {
    AugmentedLayout L{model.state_dim(), model.input_dim()};
    detail::require_dims(chi.size() == L.size() && v.size() == L.m && ybar.size() == model.output_dim() &&
                             mu.rows() == L.m && mu.cols() == model.output_dim(),
                         "augmented_step: dimensions");
    const Vec x = L.x(chi), xi = L.xi(chi), theta = L.theta(chi);
    AugmentedStep s;
    s.u = xi + (v - theta);
    const Vec y = model.output(x);
    s.chi_next = L.pack(model.step(x, s.u), xi + mu * (ybar - y), v);
    s.zeta.resize(y.size() + s.u.size());
    s.zeta << y, s.u;
    return s;
}

// ---------------------------------------------------------------------------
// Per-setpoint tuning
// ---------------------------------------------------------------------------

struct TuningConfig {
    std::optional<double> mu_tilde;  // fixed design value; otherwise mu_fraction * mu_tilde_max
    double mu_fraction = 0.5;
    double resolution = 1e-4;
    EquilibriumOptions equilibrium{};
};

struct TuningReport {
    EquilibriumTriple equilibrium;
    Linearization linearization;
    SchurCheck schur;
    StructuralReport structural;
    MuSearch search;
    IntegratorGain gain;
};

/// Equilibrium, Schur and structural checks, stability limit of the integral gain and the
/// chosen gain for one setpoint. Synthesis requires Schur A_delta and a nonsingular steady-state
/// gain; reachability and observability are reported.
inline TuningReport tune_setpoint(const NnarxModel& model, const Vec& ybar, const Vec& u_guess, const InputBox& box,
                                  const TuningConfig& cfg = {}) {
    TuningReport rep;
    rep.equilibrium = solve_equilibrium(model, ybar, u_guess, box, cfg.equilibrium);
    rep.linearization = linearize(model, rep.equilibrium);
    const auto& A = rep.linearization.A_delta;
    const auto& B = rep.linearization.B_delta;
    const Mat& C = model.shift().C;
    rep.schur = check_schur(A);
    if (!rep.schur.stable)
        throw TuningFailure("tune_setpoint: linearization is not Schur stable (rho = " +
                            std::to_string(rep.schur.spectral_radius) + ")");
    rep.structural = check_structural(A, B, C);
    if (!rep.structural.dc_gain_nonsingular) throw TuningFailure("tune_setpoint: steady-state gain is singular");
    rep.search = find_mu_max(A, B, C, cfg.resolution);
    const double mt = cfg.mu_tilde ? *cfg.mu_tilde : cfg.mu_fraction * rep.search.mu_tilde_max;
    rep.gain = compute_gain(A, B, C, mt);
    if (!(rep.gain.loop_spectral_radius < 1.0))
        throw TuningFailure("tune_setpoint: chosen gain does not stabilize the linearized loop");
    return rep;
}

inline json tuning_report_to_json(const TuningReport& r, const Scaling& sc) {
    const Vec y_phys = sc.denormalize_y(r.equilibrium.y), u_phys = sc.denormalize_u(r.equilibrium.u);
    return {{"setpoint", io::vector_to_json(y_phys)},
            {"equilibrium_input", io::vector_to_json(u_phys)},
            {"equilibrium_input_normalized", io::vector_to_json(r.equilibrium.u)},
            {"equilibrium_residual", r.equilibrium.residual},
            {"newton_iterations", r.equilibrium.newton_iterations},
            {"spectral_radius_A", r.schur.spectral_radius},
            {"schur_stable", r.schur.stable},
            {"reachable", r.structural.reachable},
            {"observable", r.structural.observable},
            {"reachability_rank", r.structural.reachability_rank},
            {"observability_rank", r.structural.observability_rank},
            {"dc_gain_nonsingular", r.structural.dc_gain_nonsingular},
            {"dc_gain", io::matrix_to_json(r.structural.dc_gain)},
            {"mu_tilde_max", r.search.mu_tilde_max},
            {"mu_max", io::matrix_to_json(r.search.mu_max)},
            {"mu_tilde", r.gain.mu_tilde},
            {"mu", io::matrix_to_json(r.gain.mu)},
            {"loop_spectral_radius", r.gain.loop_spectral_radius}};
}

}  // namespace nnmpc
