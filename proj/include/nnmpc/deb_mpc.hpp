#pragma once

#include <chrono>
#include <deque>
#include <optional>
#include <string>

#include "augmentation.hpp"
#include "errors.hpp"
#include "linalg.hpp"
#include "model_io.hpp"
#include "mpc.hpp"
#include "nnarx.hpp"

namespace nnmpc {

// Baseline offset-free scheme: a constant disturbance d on the input channel, estimated over a
// moving window and compensated through the steady-state target.

/// Model with d added to the current input and to every stored input the network reads:
///   x+ = shift(x, eta(x + S d, u + d), u).
/// The stored regressor keeps the applied inputs, so only the first-layer bias moves.
inline NnarxModel disturbed_model(const NnarxModel& model, const Vec& d) {
    detail::require_dims(d.size() == model.input_dim(), "disturbed_model: d must have m entries");
    FfnnParams p = model.params();
    auto& first = p.layers.front();
    first.b += (first.W + first.U * model.input_slot_selector()) * d;
    return model.with_params(std::move(p));
}

struct MheConfig {
    Index window = 20;
    Mat output_weight;          // p x p, identity when empty
    double prior_weight = 1.0;  // on d - d_prior
    int max_iterations = 50;
    double tolerance = 1e-12;  // on the step length

    void validate(Index p) const {
        if (window < 1) throw ValidationError("MheConfig: window must be >= 1");
        if (!(prior_weight >= 0)) throw ValidationError("MheConfig: prior weight must be >= 0");
        if (output_weight.size()) {
            detail::require_dims(output_weight.rows() == p && output_weight.cols() == p, "MheConfig: output weight");
            Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (output_weight + output_weight.transpose()));
            if ((output_weight - output_weight.transpose()).norm() > 1e-12 || es.eigenvalues().minCoeff() <= 0)
                throw ValidationError("MheConfig: output weight must be symmetric positive definite");
        }
        if (max_iterations < 1) throw ValidationError("MheConfig: iteration cap must be >= 1");
    }

    Mat weight(Index p) const { return output_weight.size() ? output_weight : Mat::Identity(p, p); }
};

/// Measured data over the estimation window: the regressor state at its start, the inputs applied
/// and the outputs measured after each of them.
struct MheWindow {
    Vec x_start;
    Mat u;  // m x L
    Mat y;  // p x L, y.col(j) follows u.col(j)

    Index length() const { return u.cols(); }
};

struct MheCost {
    double cost = 0.0;
    Vec residual;  // weighted, |residual|^2 = cost
    Mat jacobian;  // d residual / d d
    Vec gradient;
};

/// Shooting cost sum_j |y_j - y_pred_j(d)|_W^2 + prior_weight |d - d_prior|^2 with its Jacobian.
inline MheCost mhe_cost(const NnarxModel& model, const MheWindow& win, const Vec& d, const Vec& d_prior,
                        const MheConfig& cfg) {
    const Index m = model.input_dim(), p = model.output_dim(), n = model.state_dim(), L = win.length();
    detail::require_dims(win.x_start.size() == n && win.u.rows() == m && win.y.rows() == p && win.y.cols() == L &&
                             d.size() == m && d_prior.size() == m,
                         "mhe_cost: dimensions");
    const NnarxModel md = disturbed_model(model, d);
    const Mat LW = psd_sqrt(cfg.weight(p));
    const Mat Sel = model.input_slot_selector();
    const Index blk = model.block_dim();
    MheCost out;
    out.residual.resize(L * p + m);
    out.jacobian.resize(L * p + m, m);
    Vec x = win.x_start;
    Mat dx = Mat::Zero(n, m);
    for (Index j = 0; j < L; ++j) {
        const auto lin = md.jacobians(x, win.u.col(j));
        Mat dnext = lin.A_delta * dx;
        dnext.middleRows(n - blk, p) += lin.eta_x * Sel + lin.eta_u;
        x = md.step(x, win.u.col(j));
        dx = std::move(dnext);
        out.residual.segment(j * p, p) = LW * (win.y.col(j) - model.output(x));
        out.jacobian.middleRows(j * p, p) = -LW * dx.middleRows(n - blk, p);
    }
    const double sw = std::sqrt(cfg.prior_weight);
    out.residual.tail(m) = sw * (d - d_prior);
    out.jacobian.bottomRows(m) = sw * Mat::Identity(m, m);
    out.cost = out.residual.squaredNorm();
    out.gradient = 2.0 * out.jacobian.transpose() * out.residual;
    return out;
}

struct MheResult {
    Vec d;
    double cost = 0.0;
    int iterations = 0;
    bool converged = false;
    std::string warning;
};

/// Gauss-Newton with step halving, started at the prior. On failure the prior is returned.
inline MheResult mhe_estimate(const NnarxModel& model, const MheWindow& win, const Vec& d_prior,
                              const MheConfig& cfg) {
    cfg.validate(model.output_dim());
    if (win.length() < 1) throw ValidationError("mhe_estimate: empty window");
    MheResult res;
    Vec d = d_prior;
    MheCost c = mhe_cost(model, win, d, d_prior, cfg);
    for (; res.iterations < cfg.max_iterations; ++res.iterations) {
        Mat H = c.jacobian.transpose() * c.jacobian;
        H.diagonal().array() += 1e-14 * std::max(1.0, H.diagonal().maxCoeff());
        const Vec step = -H.ldlt().solve(c.jacobian.transpose() * c.residual);
        if (!step.allFinite()) break;
        if (step.lpNorm<Eigen::Infinity>() < cfg.tolerance * (1.0 + d.lpNorm<Eigen::Infinity>())) {
            res.converged = true;
            break;
        }
        double t = 1.0;
        bool accepted = false;
        for (int ls = 0; ls < 30; ++ls, t *= 0.5) {
            MheCost cn = mhe_cost(model, win, d + t * step, d_prior, cfg);
            if (std::isfinite(cn.cost) && cn.cost <= c.cost) {
                d += t * step;
                const bool flat = c.cost - cn.cost <= 1e-15 * std::max(1.0, c.cost);
                c = std::move(cn);
                accepted = true;
                if (flat) res.converged = true;
                break;
            }
        }
        if (!accepted) {
            // no descent left along the Gauss-Newton direction
            res.converged = c.gradient.lpNorm<Eigen::Infinity>() < 1e-8 * std::max(1.0, c.cost);
            break;
        }
        if (res.converged) break;
    }
    if (!res.converged || !d.allFinite()) {
        res.warning = "MHE did not converge; keeping the prior estimate";
        res.d = d_prior;
        res.cost = mhe_cost(model, win, d_prior, d_prior, cfg).cost;
        res.converged = false;
        return res;
    }
    res.d = d;
    res.cost = c.cost;
    return res;
}

/// Steady-state target under the estimated disturbance: ybar = C x, x = f(x, u + d).
inline EquilibriumTriple deb_target(const NnarxModel& model, const Vec& ybar, const Vec& d_hat, const Vec& u_guess,
                                    const InputBox& box, const EquilibriumOptions& opt = {}) {
    const NnarxModel md = disturbed_model(model, d_hat);
    auto eq = solve_equilibrium(md, ybar, u_guess, box, opt);
    const auto sc = check_schur(linearize(md, eq).A_delta);
    if (!sc.stable)
        throw ValidationError("deb_target: shifted equilibrium is not Schur stable (spectral radius " +
                              std::to_string(sc.spectral_radius) + ")");
    return eq;
}

// ---------------------------------------------------------------------------
// State-feedback MPC on the disturbed model
// ---------------------------------------------------------------------------

struct DebProblem {
    const NnarxModel* model = nullptr;  // already shifted by the disturbance estimate
    Index horizon = 50;
    Vec x0;
    EquilibriumTriple target;
    MpcWeights weights;
    InputBox box = InputBox::unbounded(1);
};

/// min sum_{i=0}^{Np} |x_i - xbar|_Qx^2 + |y_i - ybar|_Re^2 + |u_i - ubar|_Ru^2  (u_Np = ubar)
/// subject to the model, the box and x_Np = xbar. Shares the solver core of solve_ocp; the returned
/// OcpSolution carries the state trajectory in `chi` and v = u.
inline OcpSolution solve_deb_ocp(const DebProblem& prob, const MpcConfig& cfg, const std::optional<Mat>& u_warm = {},
                                 const AlWarmStart* al_warm = nullptr) {
    if (!prob.model) throw ValidationError("DebProblem: no model");
    cfg.validate();
    const NnarxModel& model = *prob.model;
    const Index Np = prob.horizon, n = model.state_dim(), m = model.input_dim(), p = model.output_dim();
    if (cfg.horizon != Np) throw ValidationError("solve_deb_ocp: config and problem horizons differ");
    detail::require_dims(prob.x0.size() == n && prob.target.x.size() == n && prob.box.lower.size() == m,
                         "DebProblem: dimensions");
    prob.weights.validate(n, m, p);
    const Index Nc = cfg.blocks(), nz = Nc * m;
    const Mat& C = model.shift().C;
    const Mat LQ = psd_sqrt(prob.weights.Q_x), LE = psd_sqrt(prob.weights.R_e), LU = psd_sqrt(prob.weights.R_u);
    const Index stage_rows = n + p + m, rows = (Np + 1) * stage_rows + (cfg.relax_terminal ? n : 0);
    const Vec& xbar = prob.target.x;
    const Vec& ybar = prob.target.y;
    const Vec& ubar = prob.target.u;

    struct Traj {
        std::vector<Vec> x, u;
        std::vector<Mat> S;
    };
    auto rollout = [&](const Vec& zz, bool sens) {
        Traj t;
        t.x.assign(Np + 1, Vec());
        t.u.assign(Np + 1, ubar);
        t.x[0] = prob.x0;
        if (sens) t.S.assign(Np + 1, Mat::Zero(n, nz));
        for (Index i = 0; i < Np; ++i) {
            const Index b = std::min(i, Nc - 1);
            t.u[i] = zz.segment(b * m, m);
            if (sens) {
                const auto lin = model.jacobians(t.x[i], t.u[i]);
                t.S[i + 1] = lin.A_delta * t.S[i];
                t.S[i + 1].middleCols(b * m, m) += lin.B_delta;
            }
            t.x[i + 1] = model.step(t.x[i], t.u[i]);
        }
        return t;
    };

    detail::SqpProblem P;
    P.nz = nz;
    P.nh = cfg.relax_terminal ? 0 : n;
    P.block = m;
    P.box = prob.box;
    P.evaluate = [&](const Vec& zz, bool jac) {
        const Traj t = rollout(zz, jac);
        detail::SqpEval e;
        e.r.resize(rows);
        if (jac) e.J = Mat::Zero(rows, nz);
        for (Index i = 0; i <= Np; ++i) {
            const Index o = i * stage_rows;
            e.r.segment(o, n) = LQ * (t.x[i] - xbar);
            e.r.segment(o + n, p) = LE * (C * t.x[i] - ybar);
            e.r.segment(o + n + p, m) = LU * (t.u[i] - ubar);
            if (jac) {
                e.J.middleRows(o, n) = LQ * t.S[i];
                e.J.middleRows(o + n, p) = LE * C * t.S[i];
                if (i < Np) e.J.block(o + n + p, std::min(i, Nc - 1) * m, m, m) = LU;
            }
        }
        if (cfg.relax_terminal) {
            const double w = std::sqrt(cfg.terminal_weight);
            e.r.tail(n) = w * (t.x[Np] - xbar);
            if (jac) e.J.bottomRows(n) = w * t.S[Np];
        } else {
            e.h = t.x[Np] - xbar;
            if (jac) e.S = t.S[Np];
        }
        return e;
    };

    Vec z(nz);
    for (Index b = 0; b < Nc; ++b) z.segment(b * m, m) = u_warm ? Vec(u_warm->col(b)) : ubar;
    const auto res = detail::sqp_solve(P, z, cfg, al_warm);

    OcpSolution sol;
    sol.multiplier = res.multiplier;
    sol.penalty = res.penalty;
    sol.optimality = res.optimality;
    sol.inner_iterations = res.inner_iterations;
    sol.outer_iterations = res.outer_iterations;
    sol.converged = res.converged;
    const Traj t = rollout(res.z, false);
    sol.u.resize(m, Np);
    sol.chi.resize(n, Np + 1);
    sol.zeta.resize(p + m, Np + 1);
    for (Index i = 0; i <= Np; ++i) {
        sol.chi.col(i) = t.x[i];
        sol.zeta.col(i) << C * t.x[i], t.u[i];
        if (i < Np) sol.u.col(i) = t.u[i];
    }
    sol.v = sol.u;
    sol.cost = res.eval.r.squaredNorm();
    if (cfg.relax_terminal) sol.cost -= res.eval.r.tail(n).squaredNorm();
    sol.terminal_residual = (t.x[Np] - xbar).lpNorm<Eigen::Infinity>();
    return sol;
}

struct DebMove {
    Vec u;
    Vec d_hat;
    Vec u_target;
    StepDiagnostics diag;
};

/// Stateful baseline controller: MHE on the last `window` samples, target recomputation and the
/// state-feedback MPC, applied from the measured regressor state.
class DebMpcController {
   public:
    DebMpcController(const NnarxModel& model, MpcConfig cfg, MpcWeights weights, InputBox box, MheConfig mhe = {})
        : model_(&model),
          cfg_(std::move(cfg)),
          weights_(std::move(weights)),
          box_(std::move(box)),
          mhe_(std::move(mhe)),
          d_hat_(Vec::Zero(model.input_dim())) {
        cfg_.validate();
        mhe_.validate(model.output_dim());
        weights_.validate(model.state_dim(), model.input_dim(), model.output_dim());
    }

    /// New setpoint; the target is solved at the current estimate.
    void set_setpoint(const Vec& ybar, const Vec& u_guess, const EquilibriumOptions& opt = {}) {
        ybar_ = ybar;
        eq_opt_ = opt;
        eq_ = deb_target(*model_, ybar_, d_hat_, u_guess, box_, eq_opt_);
        shifted_ = disturbed_model(*model_, d_hat_);
        target_d_ = d_hat_;
        warm_.reset();
        al_ = {};
        has_target_ = true;
    }

    void freeze_estimate(bool frozen) { frozen_ = frozen; }
    bool estimate_frozen() const { return frozen_; }
    void set_estimate(const Vec& d) {
        detail::require_dims(d.size() == model_->input_dim(), "DebMpcController: estimate dimension");
        d_hat_ = d;
    }
    const Vec& estimate() const { return d_hat_; }
    const EquilibriumTriple& target() const { return eq_; }
    const MpcConfig& config() const { return cfg_; }

    /// Forget the measurement history (the estimate is kept).
    void reset_history() {
        states_.clear();
        inputs_.clear();
    }

    DebMove step(const Vec& x) {
        if (!has_target_) throw ValidationError("DebMpcController: no setpoint set");
        const auto t0 = std::chrono::steady_clock::now();
        DebMove mv;
        std::string warn;
        states_.push_back(x);
        while (static_cast<Index>(inputs_.size()) > mhe_.window) {
            states_.pop_front();
            inputs_.pop_front();
        }
        if (!frozen_ && !inputs_.empty()) {
            MheWindow win;
            const Index L = static_cast<Index>(inputs_.size());
            win.x_start = states_.front();
            win.u.resize(model_->input_dim(), L);
            win.y.resize(model_->output_dim(), L);
            for (Index j = 0; j < L; ++j) {
                win.u.col(j) = inputs_[j];
                win.y.col(j) = model_->output(states_[j + 1]);
            }
            auto est = mhe_estimate(*model_, win, d_hat_, mhe_);
            d_hat_ = est.d;
            if (!est.warning.empty()) warn = est.warning;
        }
        if ((d_hat_ - target_d_).lpNorm<Eigen::Infinity>() > 0.0) {
            try {
                eq_ = deb_target(*model_, ybar_, d_hat_, eq_.u, box_, eq_opt_);
                shifted_ = disturbed_model(*model_, d_hat_);
                target_d_ = d_hat_;
            } catch (const Error& e) {
                warn += (warn.empty() ? "" : "; ") + std::string("target kept: ") + e.what();
            }
        }

        DebProblem prob;
        prob.model = &shifted_;
        prob.horizon = cfg_.horizon;
        prob.x0 = x;
        prob.target = eq_;
        prob.weights = weights_;
        prob.box = box_;
        auto sol = solve_deb_ocp(prob, cfg_, warm_, al_.multiplier.size() ? &al_ : nullptr);
        mv.diag.cost = sol.cost;
        mv.diag.terminal_residual = sol.terminal_residual;
        mv.diag.optimality = sol.optimality;
        mv.diag.inner_iterations = sol.inner_iterations;
        mv.diag.outer_iterations = sol.outer_iterations;
        mv.diag.converged = sol.converged;
        mv.diag.warm_start_terminal_residual = std::numeric_limits<double>::quiet_NaN();
        if (!sol.converged)
            warn += (warn.empty() ? "" : "; ") + std::string("OCP not converged (terminal residual ") +
                    std::to_string(sol.terminal_residual) + "); applying best-effort move";
        mv.diag.warning = warn;

        mv.u = box_.clamp(sol.u.col(0));
        mv.d_hat = d_hat_;
        mv.u_target = eq_.u;
        inputs_.push_back(mv.u);
        Mat next(sol.u.rows(), sol.u.cols());
        next.leftCols(sol.u.cols() - 1) = sol.u.rightCols(sol.u.cols() - 1);
        next.col(sol.u.cols() - 1) = eq_.u;
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
    MheConfig mhe_;
    Vec d_hat_, target_d_, ybar_;
    EquilibriumOptions eq_opt_;
    EquilibriumTriple eq_;
    NnarxModel shifted_;
    std::deque<Vec> states_, inputs_;
    std::optional<Mat> warm_;
    AlWarmStart al_;
    bool frozen_ = false;
    bool has_target_ = false;
};

inline json mhe_config_to_json(const MheConfig& c) {
    json j = {{"window", c.window},
              {"prior_weight", c.prior_weight},
              {"max_iterations", c.max_iterations},
              {"tolerance", c.tolerance}};
    if (c.output_weight.size()) j["output_weight"] = io::matrix_to_json(c.output_weight);
    return j;
}

inline MheConfig mhe_config_from_json(const json& j) {
    MheConfig c;
    c.window = j.value("window", c.window);
    c.prior_weight = j.value("prior_weight", c.prior_weight);
    c.max_iterations = j.value("max_iterations", c.max_iterations);
    c.tolerance = j.value("tolerance", c.tolerance);
    if (j.contains("output_weight")) c.output_weight = io::matrix_from_json(j.at("output_weight"));
    return c;
}

}  // namespace nnmpc
