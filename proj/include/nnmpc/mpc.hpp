#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "augmentation.hpp"
#include "errors.hpp"
#include "linalg.hpp"
#include "model_io.hpp"
#include "nnarx.hpp"

namespace nnmpc {

// Everything here is expressed in the model's coordinates.

struct MpcWeights {
    Mat Q_x;    // n x n
    Mat Q_xi;   // m x m
    Mat Q_theta;
    Mat R_e;    // p x p
    Mat R_u;    // m x m

    /// R = diag(R_e, R_u) on every [y; u] block of the state, Q_xi = 1, Q_theta = 1e-5.
    static MpcWeights defaults(Index N, Index m = 1, Index p = 1, double r_e = 10.0, double r_u = 0.1) {
        MpcWeights w;
        w.R_e = r_e * Mat::Identity(p, p);
        w.R_u = r_u * Mat::Identity(m, m);
        w.Q_x = Mat::Zero(N * (m + p), N * (m + p));
        for (Index i = 0; i < N; ++i) {
            w.Q_x.block(i * (m + p), i * (m + p), p, p) = w.R_e;
            w.Q_x.block(i * (m + p) + p, i * (m + p) + p, m, m) = w.R_u;
        }
        w.Q_xi = Mat::Identity(m, m);
        w.Q_theta = 1e-5 * Mat::Identity(m, m);
        return w;
    }

    Mat Q() const { return block_diag({Q_x, Q_xi, Q_theta}); }
    Mat R() const { return block_diag({R_e, R_u}); }

    void validate(Index n, Index m, Index p) const {
        detail::require_dims(Q_x.rows() == n && Q_xi.rows() == m && Q_theta.rows() == m && R_e.rows() == p &&
                                 R_u.rows() == m,
                             "MpcWeights: block sizes");
        for (const Mat* M : {&Q_x, &Q_xi, &Q_theta, &R_e, &R_u})
            if (!is_psd(*M)) throw ValidationError("MpcWeights: every block must be symmetric PSD");
    }

    MpcWeights scaled(double s) const { return {s * Q_x, s * Q_xi, s * Q_theta, s * R_e, s * R_u}; }
};

struct OcpProblem {
    const NnarxModel* model = nullptr;
    Index horizon = 50;
    Vec chi0;      // [x; xi; theta]
    Vec chi_bar;   // [x_bar; u_bar; v_bar]
    Vec zeta_bar;  // [y_bar; u_bar]
    Vec v_bar;
    Mat mu;        // m x p integral gain
    MpcWeights weights;
    InputBox box = InputBox::unbounded(1);

    AugmentedLayout layout() const { return {model->state_dim(), model->input_dim()}; }
    Vec y_bar() const { return zeta_bar.head(model->output_dim()); }

    void validate() const {
        if (!model) throw ValidationError("OcpProblem: no model");
        if (horizon < 1) throw ValidationError("OcpProblem: horizon must be >= 1");
        const auto L = layout();
        const Index m = L.m, p = model->output_dim();
        detail::require_dims(chi0.size() == L.size() && chi_bar.size() == L.size() && zeta_bar.size() == p + m &&
                                 v_bar.size() == m && mu.rows() == m && mu.cols() == p && box.lower.size() == m,
                             "OcpProblem: dimensions");
        weights.validate(L.n, m, p);
    }
};

struct MpcConfig {
    Index horizon = 50;
    Index control_horizon = 0;  // 0 means equal to horizon
    double terminal_tolerance = 1e-6;
    double optimality_tolerance = 1e-6;
    int max_inner_iterations = 500;
    int max_outer_iterations = 20;
    double initial_penalty = 1.0;
    double penalty_growth = 10.0;
    double armijo = 1e-4;
    double backtrack = 0.5;
    bool relax_terminal = false;  // replace the terminal equality by a quadratic penalty
    double terminal_weight = 1e6;

    void validate() const {
        if (horizon < 1) throw ValidationError("MpcConfig: horizon must be >= 1");
        if (control_horizon < 0 || control_horizon > horizon)
            throw ValidationError("MpcConfig: control horizon must lie in [0, horizon]");
        if (!(terminal_tolerance > 0) || !(optimality_tolerance > 0))
            throw ValidationError("MpcConfig: tolerances must be > 0");
        if (max_inner_iterations < 1 || max_outer_iterations < 1)
            throw ValidationError("MpcConfig: iteration caps must be >= 1");
        if (!(initial_penalty > 0) || !(penalty_growth > 1)) throw ValidationError("MpcConfig: penalty settings");
        if (!(armijo > 0 && armijo < 1) || !(backtrack > 0 && backtrack < 1))
            throw ValidationError("MpcConfig: line-search constants must lie in (0, 1)");
    }

    Index blocks() const { return control_horizon == 0 ? horizon : control_horizon; }
};

struct OcpSolution {
    Mat v;           // m x N_p optimal v_0..v_{N_p-1}
    Mat u;           // m x N_p predicted inputs
    Mat chi;         // (n+2m) x (N_p+1)
    Mat zeta;        // (p+m) x (N_p+1)
    double cost = 0.0;
    double terminal_residual = 0.0;  // |chi_Np - chi_bar|_inf
    double optimality = 0.0;         // projected-gradient norm of the last inner solve
    int inner_iterations = 0;
    int outer_iterations = 0;
    bool converged = false;
    Vec multiplier;  // terminal-constraint multiplier estimate
    double penalty = 0.0;  // augmented-Lagrangian penalty at exit
};

/// Multiplier and penalty carried between consecutive solves.
struct AlWarmStart {
    Vec multiplier;
    double penalty = 0.0;
};

// ---------------------------------------------------------------------------
// Cost in v-space with a reverse-mode gradient
// ---------------------------------------------------------------------------

struct CostAndGradient {
    double cost = 0.0;
    Mat gradient;  // m x N_p
};

/// Single-shooting rollout of the augmented model under v_0..v_{N_p-1}; the terminal stage uses
/// v_bar. Returns sum_{i=0}^{N_p} |chi_i - chi_bar|_Q^2 + |zeta_i - zeta_bar|_R^2 and its gradient.
inline CostAndGradient evaluate_cost(const OcpProblem& prob, const Mat& v_seq) {
    prob.validate();
    const auto L = prob.layout();
    const NnarxModel& model = *prob.model;
    const Index Np = prob.horizon, n = L.n, m = L.m, p = model.output_dim(), blk = model.block_dim();
    detail::require_dims(v_seq.rows() == m && v_seq.cols() == Np, "evaluate_cost: v_seq must be m x N_p");
    const Mat Q = prob.weights.Q(), R = prob.weights.R(), C = model.shift().C;
    const Vec ybar = prob.y_bar();

    std::vector<Vec> chi(Np + 1), u(Np + 1);
    std::vector<EtaTape> tapes(Np);
    chi[0] = prob.chi0;
    for (Index i = 0; i <= Np; ++i) {
        const Vec v = i < Np ? Vec(v_seq.col(i)) : prob.v_bar;
        u[i] = L.xi(chi[i]) + v - L.theta(chi[i]);
        if (i == Np) break;
        const Vec x = L.x(chi[i]);
        chi[i + 1] = L.pack(model.step(x, u[i], &tapes[i]), L.xi(chi[i]) + prob.mu * (ybar - C * x), v);
    }

    CostAndGradient out;
    out.gradient = Mat::Zero(m, Np);
    Vec lam = Vec::Zero(L.size());  // adjoint of chi_{i+1}
    for (Index i = Np + 1; i-- > 0;) {
        const Vec dchi = chi[i] - prob.chi_bar;
        Vec zeta(p + m);
        zeta << C * L.x(chi[i]), u[i];
        const Vec dzeta = zeta - prob.zeta_bar;
        out.cost += dchi.dot(Q * dchi) + dzeta.dot(R * dzeta);

        Vec g_chi = 2.0 * Q * dchi;
        const Vec g_zeta = 2.0 * R * dzeta;
        g_chi.head(n) += C.transpose() * g_zeta.head(p);
        Vec g_u = g_zeta.tail(m);
        Vec g_v = Vec::Zero(m);
        if (i < Np) {
            // chi_{i+1} = [f(x, u); xi + mu (ybar - C x); v]
            const Vec lx = lam.head(n), lxi = L.xi(lam), lth = L.theta(lam);
            Vec gx = Vec::Zero(n);
            gx.tail(n - blk) = lx.head(n - blk);  // older blocks move one slot toward the front
            g_u += lx.tail(m);
            Vec lam_eta = lx.segment(n - blk, p);
            Vec gxe = Vec::Zero(n), gue = Vec::Zero(m);
            model.eta_vjp(tapes[i], lam_eta, &gxe, &gue, nullptr);
            gx += gxe;
            g_u += gue;
            gx -= C.transpose() * (prob.mu.transpose() * lxi);
            g_chi.head(n) += gx;
            g_chi.segment(n, m) += lxi;
            g_v += lth;
        }
        // u = xi + v - theta
        g_chi.segment(n, m) += g_u;
        g_chi.tail(m) -= g_u;
        g_v += g_u;
        if (i < Np) out.gradient.col(i) = g_v;
        lam = g_chi;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

namespace detail {

/// Rollout in u-space with forward sensitivities. Decisions z are N_c blocks of m; u_i uses
/// block min(i, N_c - 1). v_i = u_i - xi_i + theta_i.
struct Rollout {
    std::vector<Vec> chi;  // 0..Np
    std::vector<Vec> u;    // 0..Np (u_Np = xi_Np + v_bar - theta_Np)
    std::vector<Mat> S;    // d chi_i / dz
    std::vector<Mat> Su;   // d u_i / dz
};

inline Rollout rollout_u(const OcpProblem& prob, const Mat& U, Index Nc, bool sensitivities) {
    const auto L = prob.layout();
    const NnarxModel& model = *prob.model;
    const Index Np = prob.horizon, n = L.n, m = L.m, nz = Nc * m;
    const Mat& C = model.shift().C;
    const Vec ybar = prob.y_bar();
    Rollout r;
    r.chi.resize(Np + 1);
    r.u.resize(Np + 1);
    r.chi[0] = prob.chi0;
    if (sensitivities) {
        r.S.assign(Np + 1, Mat::Zero(L.size(), nz));
        r.Su.assign(Np + 1, Mat::Zero(m, nz));
    }
    for (Index i = 0; i < Np; ++i) {
        const Index b = std::min(i, Nc - 1);
        r.u[i] = U.col(b);
        const Vec x = L.x(r.chi[i]), xi = L.xi(r.chi[i]), th = L.theta(r.chi[i]);
        r.chi[i + 1] = L.pack(model.step(x, r.u[i]), xi + prob.mu * (ybar - C * x), r.u[i] - xi + th);
        if (sensitivities) {
            auto lin = model.jacobians(x, r.u[i]);
            const Mat& S = r.S[i];
            Mat& Sn = r.S[i + 1];
            r.Su[i].middleCols(b * m, m).setIdentity();
            Sn.topRows(n) = lin.A_delta * S.topRows(n);
            Sn.topRows(n).middleCols(b * m, m) += lin.B_delta;
            Sn.middleRows(n, m) = S.middleRows(n, m) - prob.mu * C * S.topRows(n);
            Sn.bottomRows(m) = S.bottomRows(m) - S.middleRows(n, m);
            Sn.bottomRows(m).middleCols(b * m, m) += Mat::Identity(m, m);
        }
    }
    r.u[Np] = L.xi(r.chi[Np]) + prob.v_bar - L.theta(r.chi[Np]);
    if (sensitivities) r.Su[Np] = r.S[Np].middleRows(n, m) - r.S[Np].bottomRows(m);
    return r;
}

/// Gradient of |r(z)|^2 + lambda'h(z) by one reverse sweep (relaxed mode: lambda empty and the
/// terminal term is w |h|^2).
inline Vec lagrangian_gradient(const OcpProblem& prob, const Vec& z, Index Nc, const Vec& lambda, double relax_w) {
    const auto L = prob.layout();
    const NnarxModel& model = *prob.model;
    const Index Np = prob.horizon, n = L.n, m = L.m, p = model.output_dim(), blk = model.block_dim();
    const Mat& C = model.shift().C;
    const Mat Q = prob.weights.Q(), R = prob.weights.R();
    const Vec ybar = prob.y_bar();
    std::vector<Vec> chi(Np + 1), u(Np + 1);
    std::vector<EtaTape> tapes(Np);
    chi[0] = prob.chi0;
    for (Index i = 0; i < Np; ++i) {
        u[i] = z.segment(std::min(i, Nc - 1) * m, m);
        const Vec x = L.x(chi[i]), xi = L.xi(chi[i]), th = L.theta(chi[i]);
        chi[i + 1] = L.pack(model.step(x, u[i], &tapes[i]), xi + prob.mu * (ybar - C * x), u[i] - xi + th);
    }
    u[Np] = L.xi(chi[Np]) + prob.v_bar - L.theta(chi[Np]);
    Vec gz = Vec::Zero(z.size());
    Vec a;  // adjoint of chi_{i+1}
    for (Index i = Np + 1; i-- > 0;) {
        const Vec dchi = chi[i] - prob.chi_bar;
        Vec g_chi = 2.0 * Q * dchi;
        Vec dzeta(p + m);
        dzeta << C * L.x(chi[i]) - ybar, u[i] - prob.zeta_bar.tail(m);
        const Vec g_zeta = 2.0 * R * dzeta;
        g_chi.head(n) += C.transpose() * g_zeta.head(p);
        const Vec g_u = g_zeta.tail(m);
        if (i == Np) {
            // u_Np = xi + v_bar - theta
            g_chi.segment(n, m) += g_u;
            g_chi.tail(m) -= g_u;
            if (lambda.size()) g_chi += lambda;
            if (relax_w > 0) g_chi += 2.0 * relax_w * dchi;
        } else {
            const Vec ax = a.head(n), axi = L.xi(a), ath = L.theta(a);
            Vec gx = Vec::Zero(n), gu = g_u;
            gx.tail(n - blk) = ax.head(n - blk);
            gu += ax.tail(m);
            model.eta_vjp(tapes[i], ax.segment(n - blk, p), &gx, &gu, nullptr);
            gx -= C.transpose() * (prob.mu.transpose() * axi);
            g_chi.head(n) += gx;
            g_chi.segment(n, m) += axi - ath;
            g_chi.tail(m) += ath;
            gu += ath;
            gz.segment(std::min(i, Nc - 1) * m, m) += gu;
        }
        a = g_chi;
    }
    return gz;
}

}  // namespace detail

/// Predicted v sequence for a u sequence (inverse of u = xi + v - theta along the rollout).
inline Mat u_to_v(const OcpProblem& prob, const Mat& U) {
    auto r = detail::rollout_u(prob, U, U.cols(), false);
    const auto L = prob.layout();
    Mat V(L.m, prob.horizon);
    for (Index i = 0; i < prob.horizon; ++i) V.col(i) = r.u[i] - L.xi(r.chi[i]) + L.theta(r.chi[i]);
    return V;
}

/// Predicted u sequence for a v sequence.
inline Mat v_to_u(const OcpProblem& prob, const Mat& V) {
    const auto L = prob.layout();
    Mat U(L.m, prob.horizon);
    Vec chi = prob.chi0;
    for (Index i = 0; i < prob.horizon; ++i) {
        auto s = augmented_step(*prob.model, chi, V.col(i), prob.y_bar(), prob.mu);
        U.col(i) = s.u;
        chi = s.chi_next;
    }
    return U;
}

namespace detail {

/// Residual form of a shooting problem: cost |r(z)|^2, equality h(z) = 0.
struct SqpEval {
    Vec r;
    Mat J;
    Vec h;  // empty when there is no equality
    Mat S;
};

struct SqpProblem {
    Index nz = 0;
    Index nh = 0;
    Index block = 1;  // z is a sequence of blocks of this size, each boxed by `box`
    InputBox box = InputBox::unbounded(1);
    std::function<SqpEval(const Vec&, bool)> evaluate;
    // gradient of |r|^2 + lambda'h; when empty it is formed from the Jacobians
    std::function<Vec(const Vec&, const Vec&)> lagrangian_gradient;
};

struct SqpResult {
    Vec z;
    SqpEval eval;
    Vec multiplier;
    double penalty = 0.0;
    double optimality = 0.0;
    int inner_iterations = 0;
    int outer_iterations = 0;
    bool converged = false;
};

/// Box-constrained, equality-constrained least squares by a bound-constrained augmented
/// Lagrangian: the inner loop minimizes |r|^2 + lambda'h + rho/2 |h|^2 over the box by projected
/// Newton steps (exact Hessian from central differences of the reverse-mode gradient when it is
/// positive definite on the free variables, Gauss-Newton otherwise); the outer loop updates the
/// multiplier and raises the penalty when the equality residual stalls.
inline SqpResult sqp_solve(const SqpProblem& P, Vec z, const MpcConfig& cfg, const AlWarmStart* al_warm = nullptr) {
    const Index nz = P.nz, nh = P.nh, m = P.block;
    auto project = [&](Vec w) {
        for (Index b = 0; b < nz / m; ++b) w.segment(b * m, m) = P.box.clamp(w.segment(b * m, m));
        return w;
    };
    auto lag_grad = [&](const Vec& zz, const Vec& lam) -> Vec {
        if (P.lagrangian_gradient) return P.lagrangian_gradient(zz, lam);
        const SqpEval e = P.evaluate(zz, true);
        Vec g = 2.0 * e.J.transpose() * e.r;
        if (nh) g += e.S.transpose() * lam;
        return g;
    };
    z = project(z);

    const bool warm_al = al_warm && al_warm->multiplier.size() == nh && nh > 0;
    Vec lambda = warm_al ? al_warm->multiplier : Vec::Zero(nh);
    double rho = warm_al ? std::max(cfg.initial_penalty, al_warm->penalty) : cfg.initial_penalty;
    auto merit = [&](const SqpEval& e) {
        return e.r.squaredNorm() + (nh ? lambda.dot(e.h) + 0.5 * rho * e.h.squaredNorm() : 0.0);
    };

    SqpResult sol;
    sol.outer_iterations = 1;
    SqpEval e = P.evaluate(z, true);
    double last_term = std::numeric_limits<double>::infinity();
    // called when the inner problem is solved for the current multiplier and penalty
    auto outer_update = [&](double term) {
        if (!nh || sol.outer_iterations >= cfg.max_outer_iterations) return false;
        lambda += rho * e.h;
        if (term > 0.25 * last_term) rho = std::min(rho * cfg.penalty_growth, 1e12);
        last_term = term;
        ++sol.outer_iterations;
        return true;
    };
    for (int it = 0;; ++it) {
        const Vec g = 2.0 * e.J.transpose() * e.r;
        const Vec lam_hat = nh ? Vec(lambda + rho * e.h) : Vec();
        const Vec gA = nh ? Vec(g + e.S.transpose() * lam_hat) : g;
        sol.optimality = (project(z - gA) - z).lpNorm<Eigen::Infinity>();
        const double term = nh ? e.h.lpNorm<Eigen::Infinity>() : 0.0;
        if (sol.optimality < cfg.optimality_tolerance && term < cfg.terminal_tolerance) {
            sol.converged = true;
            if (nh) lambda = lam_hat;
            break;
        }
        // the inner problem only needs to be solved as accurately as the constraint is met
        if (sol.optimality < std::max(cfg.optimality_tolerance, std::min(1e-3, 0.1 * term))) {
            if (!outer_update(term)) break;
            continue;
        }
        if (it >= cfg.max_inner_iterations) break;
        ++sol.inner_iterations;

        // variables close to a bound and pushed against it are held (projected Newton)
        const double eps = std::min(1e-6, sol.optimality);
        std::vector<Index> fr, act;
        for (Index j = 0; j < nz; ++j) {
            const Index c = j % m;
            const bool at_lo = z(j) <= P.box.lower(c) + eps && gA(j) > 0;
            const bool at_hi = z(j) >= P.box.upper(c) - eps && gA(j) < 0;
            (at_lo || at_hi ? act : fr).push_back(j);
        }
        const Index nf = static_cast<Index>(fr.size());
        auto direction = [&](const Mat& H, Vec& d) {
            d = Vec::Zero(nz);
            for (Index j : act) d(j) = -gA(j) / std::max(H(j, j), 1e-12);
            if (nf == 0) return true;
            Mat Hf(nf, nf);
            Vec gf(nf);
            for (Index a = 0; a < nf; ++a) {
                gf(a) = gA(fr[a]);
                for (Index b = 0; b < nf; ++b) Hf(a, b) = H(fr[a], fr[b]);
            }
            Eigen::LLT<Mat> llt(Hf);
            if (llt.info() != Eigen::Success) return false;
            const Vec sf = -llt.solve(gf);
            if (!sf.allFinite()) return false;
            for (Index a = 0; a < nf; ++a) d(fr[a]) = sf(a);
            return true;
        };
        Vec z_new;
        SqpEval e_new;
        auto search = [&](const Vec& d) {
            const double m0 = merit(e);
            if (gA.dot(project(z + d) - z) >= 0.0) return false;
            double t = 1.0;
            for (int ls = 0; ls < 50; ++ls, t *= cfg.backtrack) {
                z_new = project(z + t * d);
                e_new = P.evaluate(z_new, false);
                const double m1 = merit(e_new);
                if (std::isfinite(m1) && m1 <= m0 + cfg.armijo * gA.dot(z_new - z) + 1e-15 * std::abs(m0))
                    return true;
            }
            return false;
        };

        Mat HGN = 2.0 * e.J.transpose() * e.J;
        if (nh) HGN += rho * e.S.transpose() * e.S;
        Vec d;
        bool accepted = false;
        Mat H(nz, nz);
        {
            const double h = 1e-5;
            const Vec lam_fd = nh ? lam_hat : Vec::Zero(0);
            for (Index j = 0; j < nz; ++j) {
                Vec zp = z, zm = z;
                zp(j) += h;
                zm(j) -= h;
                H.col(j) = (lag_grad(zp, lam_fd) - lag_grad(zm, lam_fd)) / (2 * h);
            }
            H = 0.5 * (H + H.transpose()).eval();
            if (nh) H += rho * e.S.transpose() * e.S;
        }
        if (nh && nf >= nh && term < 1e-2) {
            // near feasibility: equality-constrained Newton step on the free variables
            Mat K = Mat::Zero(nf + nh, nf + nh);
            Vec rhs(nf + nh);
            const Mat Hl = H - rho * e.S.transpose() * e.S;
            for (Index a = 0; a < nf; ++a) {
                rhs(a) = -g(fr[a]);
                for (Index b = 0; b < nf; ++b) K(a, b) = Hl(fr[a], fr[b]);
                for (Index k = 0; k < nh; ++k) K(nf + k, a) = K(a, nf + k) = e.S(k, fr[a]);
            }
            rhs.tail(nh) = -e.h;
            const Vec sk = K.partialPivLu().solve(rhs);
            if (sk.allFinite()) {
                Vec dk = Vec::Zero(nz);
                for (Index a = 0; a < nf; ++a) dk(fr[a]) = sk(a);
                const Vec lam_k = sk.tail(nh);
                const Vec z_try = project(z + dk);
                SqpEval e_try = P.evaluate(z_try, true);
                const Vec g_try = 2.0 * e_try.J.transpose() * e_try.r + e_try.S.transpose() * lam_k;
                const double opt_try = (project(z_try - g_try) - z_try).lpNorm<Eigen::Infinity>();
                const double term_try = e_try.h.lpNorm<Eigen::Infinity>();
                if (std::isfinite(opt_try) && std::max(opt_try, term_try) < 0.5 * std::max(sol.optimality, term)) {
                    z = z_try;
                    e = std::move(e_try);
                    lambda = lam_k - rho * e.h;
                    continue;
                }
            }
        }
        if (direction(H, d)) accepted = search(d);
        if (!accepted) {
            HGN.diagonal().array() += 1e-12 * std::max(1.0, HGN.diagonal().maxCoeff());
            if (direction(HGN, d)) accepted = search(d);
        }
        if (!accepted) {
            d = -gA;
            accepted = search(d);
        }
        if (!accepted) {
            // no descent left at working precision
            if (!outer_update(term)) break;
            continue;
        }
        z = z_new;
        e = P.evaluate(z, true);
    }
    sol.multiplier = lambda;
    sol.penalty = rho;
    sol.z = z;
    sol.eval = e;
    return sol;
}

}  // namespace detail


/// Minimizes the tracking cost subject to the augmented dynamics, the input box and
/// chi_Np = chi_bar. The decision variable is the predicted input sequence, so the box is an
/// exact projection; the returned v sequence is recovered along the optimal rollout.
inline OcpSolution solve_ocp(const OcpProblem& prob, const MpcConfig& cfg, const std::optional<Mat>& v_warm = {},
                             const AlWarmStart* al_warm = nullptr) {
    prob.validate();
    cfg.validate();
    if (cfg.horizon != prob.horizon) throw ValidationError("solve_ocp: config and problem horizons differ");
    const auto L = prob.layout();
    const Index Np = prob.horizon, n = L.n, m = L.m, p = prob.model->output_dim();
    const Index Nc = cfg.blocks(), nz = Nc * m, nc = L.size();
    const Mat C = prob.model->shift().C;
    const Mat LQ = psd_sqrt(prob.weights.Q()), LR = psd_sqrt(prob.weights.R());
    const Index stage_rows = nc + p + m, rows = (Np + 1) * stage_rows + (cfg.relax_terminal ? nc : 0);

    Vec z(nz);
    {
        Mat Ufull = v_warm ? v_to_u(prob, *v_warm) : v_to_u(prob, prob.v_bar.replicate(1, Np));
        for (Index b = 0; b < Nc; ++b) z.segment(b * m, m) = Ufull.col(b);
    }

    detail::SqpProblem P;
    P.nz = nz;
    P.nh = cfg.relax_terminal ? 0 : nc;
    P.block = m;
    P.box = prob.box;
    P.evaluate = [&](const Vec& zz, bool jac) {
        detail::SqpEval e;
        const auto ro = detail::rollout_u(prob, Eigen::Map<const Mat>(zz.data(), m, Nc), Nc, jac);
        e.r.resize(rows);
        if (jac) e.J.resize(rows, nz);
        for (Index i = 0; i <= Np; ++i) {
            const Index o = i * stage_rows;
            e.r.segment(o, nc) = LQ * (ro.chi[i] - prob.chi_bar);
            Vec zeta(p + m);
            zeta << C * L.x(ro.chi[i]), ro.u[i];
            e.r.segment(o + nc, p + m) = LR * (zeta - prob.zeta_bar);
            if (jac) {
                e.J.middleRows(o, nc) = LQ * ro.S[i];
                Mat dz(p + m, nz);
                dz << C * ro.S[i].topRows(n), ro.Su[i];
                e.J.middleRows(o + nc, p + m) = LR * dz;
            }
        }
        const Vec hN = ro.chi[Np] - prob.chi_bar;
        if (cfg.relax_terminal) {
            const double w = std::sqrt(cfg.terminal_weight);
            e.r.tail(nc) = w * hN;
            if (jac) e.J.bottomRows(nc) = w * ro.S[Np];
        } else {
            e.h = hN;
            if (jac) e.S = ro.S[Np];
        }
        return e;
    };
    const double relax_w = cfg.relax_terminal ? cfg.terminal_weight : 0.0;
    P.lagrangian_gradient = [&](const Vec& zz, const Vec& lam) {
        return detail::lagrangian_gradient(prob, zz, Nc, lam, relax_w);
    };

    const auto res = detail::sqp_solve(P, z, cfg, al_warm);
    OcpSolution sol;
    sol.multiplier = res.multiplier;
    sol.penalty = res.penalty;
    sol.optimality = res.optimality;
    sol.inner_iterations = res.inner_iterations;
    sol.outer_iterations = res.outer_iterations;
    sol.converged = res.converged;

    const auto ro = detail::rollout_u(prob, Eigen::Map<const Mat>(res.z.data(), m, Nc), Nc, false);
    sol.u.resize(m, Np);
    sol.v.resize(m, Np);
    sol.chi.resize(nc, Np + 1);
    sol.zeta.resize(p + m, Np + 1);
    sol.cost = 0.0;
    const Mat Q = prob.weights.Q(), R = prob.weights.R();
    for (Index i = 0; i <= Np; ++i) {
        sol.chi.col(i) = ro.chi[i];
        sol.zeta.col(i) << C * L.x(ro.chi[i]), ro.u[i];
        const Vec dc = ro.chi[i] - prob.chi_bar, dz = sol.zeta.col(i) - prob.zeta_bar;
        sol.cost += dc.dot(Q * dc) + dz.dot(R * dz);
        if (i < Np) {
            sol.u.col(i) = ro.u[i];
            sol.v.col(i) = ro.u[i] - L.xi(ro.chi[i]) + L.theta(ro.chi[i]);
        }
    }
    sol.terminal_residual = (ro.chi[Np] - prob.chi_bar).lpNorm<Eigen::Infinity>();
    return sol;
}

// ---------------------------------------------------------------------------
// Receding-horizon controller
// ---------------------------------------------------------------------------

struct StepDiagnostics {
    double cost = 0.0;
    double terminal_residual = 0.0;
    double warm_start_terminal_residual = 0.0;  // of the shifted warm start, before optimizing
    double optimality = 0.0;
    int inner_iterations = 0;
    int outer_iterations = 0;
    bool converged = false;
    double wall_time = 0.0;  // seconds
    std::string warning;
};

struct ControlMove {
    Vec u;  // applied input (model units), inside the box
    Vec v;
    Vec xi;     // integrator state used at this step
    Vec theta;  // derivator state used at this step
    StepDiagnostics diag;
};

/// Stateful receding-horizon controller on the augmented model. Holds xi, theta, the warm start
/// and the terminal multiplier between calls.
class MpcController {
   public:
    MpcController(const NnarxModel& model, MpcConfig cfg, MpcWeights weights, InputBox box)
        : model_(&model), cfg_(std::move(cfg)), weights_(std::move(weights)), box_(std::move(box)) {
        cfg_.validate();
        weights_.validate(model.state_dim(), model.input_dim(), model.output_dim());
    }

    /// New target. The integrator and derivator states are preserved; the warm start is reset.
    void set_target(const EquilibriumTriple& eq, const Mat& mu) {
        eq_ = eq;
        mu_ = mu;
        v_bar_ = eq.u;
        const AugmentedLayout L{model_->state_dim(), model_->input_dim()};
        chi_bar_ = L.pack(eq.x, eq.u, v_bar_);
        zeta_bar_.resize(eq.y.size() + eq.u.size());
        zeta_bar_ << eq.y, eq.u;
        warm_.reset();
        al_ = {};
        has_target_ = true;
    }

    void reset_states(const Vec& xi, const Vec& theta) {
        xi_ = xi;
        theta_ = theta;
    }

    const Vec& xi() const { return xi_; }
    const Vec& theta() const { return theta_; }
    const MpcConfig& config() const { return cfg_; }
    const EquilibriumTriple& target() const { return eq_; }
    const Mat& gain() const { return mu_; }

    OcpProblem problem(const Vec& x) const {
        OcpProblem prob;
        prob.model = model_;
        prob.horizon = cfg_.horizon;
        const AugmentedLayout L{model_->state_dim(), model_->input_dim()};
        prob.chi0 = L.pack(x, xi_, theta_);
        prob.chi_bar = chi_bar_;
        prob.zeta_bar = zeta_bar_;
        prob.v_bar = v_bar_;
        prob.mu = mu_;
        prob.weights = weights_;
        prob.box = box_;
        return prob;
    }

    /// One receding-horizon step from the measured regressor state x.
    ControlMove step(const Vec& x) {
        if (!has_target_) throw ValidationError("MpcController: no target set");
        if (xi_.size() == 0) throw ValidationError("MpcController: integrator state not initialized");
        const auto t0 = std::chrono::steady_clock::now();
        OcpProblem prob = problem(x);
        ControlMove mv;
        if (warm_) {
            Mat U = v_to_u(prob, *warm_);
            auto ro = detail::rollout_u(prob, U, U.cols(), false);
            mv.diag.warm_start_terminal_residual = (ro.chi.back() - chi_bar_).lpNorm<Eigen::Infinity>();
        } else {
            mv.diag.warm_start_terminal_residual = std::numeric_limits<double>::quiet_NaN();
        }
        auto sol = solve_ocp(prob, cfg_, warm_, al_.multiplier.size() ? &al_ : nullptr);
        mv.diag.cost = sol.cost;
        mv.diag.terminal_residual = sol.terminal_residual;
        mv.diag.optimality = sol.optimality;
        mv.diag.inner_iterations = sol.inner_iterations;
        mv.diag.outer_iterations = sol.outer_iterations;
        mv.diag.converged = sol.converged;
        if (!sol.converged)
            mv.diag.warning = "OCP not converged (terminal residual " + std::to_string(sol.terminal_residual) +
                              ", optimality " + std::to_string(sol.optimality) + "); applying best-effort move";

        mv.xi = xi_;
        mv.theta = theta_;
        mv.u = box_.clamp(sol.u.col(0));
        mv.v = mv.u - xi_ + theta_;
        // controller states advance with the measured output
        xi_ = xi_ + mu_ * (eq_.y - model_->output(x));
        theta_ = mv.v;
        // shifted warm start (v_1 .. v_{Np-1}, v_bar)
        Mat next(sol.v.rows(), sol.v.cols());
        next.leftCols(sol.v.cols() - 1) = sol.v.rightCols(sol.v.cols() - 1);
        next.col(sol.v.cols() - 1) = v_bar_;
        warm_ = next;
        al_ = sol.converged ? AlWarmStart{sol.multiplier, sol.penalty} : AlWarmStart{};
        mv.diag.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return mv;
    }

   private:
    const NnarxModel* model_;
    MpcConfig cfg_;
    MpcWeights weights_;
    InputBox box_;
    EquilibriumTriple eq_;
    Mat mu_;
    Vec v_bar_, chi_bar_, zeta_bar_;
    Vec xi_, theta_;
    std::optional<Mat> warm_;
    AlWarmStart al_;
    bool has_target_ = false;
};

inline json mpc_config_to_json(const MpcConfig& c) {
    return {{"horizon", c.horizon},
            {"control_horizon", c.control_horizon},
            {"terminal_tolerance", c.terminal_tolerance},
            {"optimality_tolerance", c.optimality_tolerance},
            {"max_inner_iterations", c.max_inner_iterations},
            {"max_outer_iterations", c.max_outer_iterations},
            {"initial_penalty", c.initial_penalty},
            {"penalty_growth", c.penalty_growth},
            {"armijo", c.armijo},
            {"backtrack", c.backtrack},
            {"relax_terminal", c.relax_terminal},
            {"terminal_weight", c.terminal_weight}};
}

inline MpcConfig mpc_config_from_json(const json& j) {
    MpcConfig c;
    c.horizon = j.value("horizon", c.horizon);
    c.control_horizon = j.value("control_horizon", c.control_horizon);
    c.terminal_tolerance = j.value("terminal_tolerance", c.terminal_tolerance);
    c.optimality_tolerance = j.value("optimality_tolerance", c.optimality_tolerance);
    c.max_inner_iterations = j.value("max_inner_iterations", c.max_inner_iterations);
    c.max_outer_iterations = j.value("max_outer_iterations", c.max_outer_iterations);
    c.initial_penalty = j.value("initial_penalty", c.initial_penalty);
    c.penalty_growth = j.value("penalty_growth", c.penalty_growth);
    c.armijo = j.value("armijo", c.armijo);
    c.backtrack = j.value("backtrack", c.backtrack);
    c.relax_terminal = j.value("relax_terminal", c.relax_terminal);
    c.terminal_weight = j.value("terminal_weight", c.terminal_weight);
    c.validate();
    return c;
}

}  // namespace nnmpc
