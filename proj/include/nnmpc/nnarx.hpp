#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "errors.hpp"
#include "linalg.hpp"

namespace nnmpc {

enum class Activation { Tanh, Identity };

inline double activation_lipschitz(Activation) { return 1.0; }

inline std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "identity"; }

inline Activation activation_from_string(const std::string& s) {
    if (s == "tanh") return Activation::Tanh;
    if (s == "identity") return Activation::Identity;
    throw ValidationError("unknown activation '" + s + "'");
}

/// One hidden layer: h_l = psi(W u + U h_{l-1} + b).
struct Layer {
    Mat W;  // h_l x m
    Mat U;  // h_l x h_{l-1}, with h_0 = n (the NNARX state)
    Vec b;  // h_l
    Activation activation = Activation::Tanh;

    Index width() const { return b.size(); }
};

/// Weights of the feed-forward regression map eta(x, u) = U0 h_M + b0.
/// Also used as a same-shaped gradient accumulator.
struct FfnnParams {
    std::vector<Layer> layers;
    Mat U0;  // p x h_M
    Vec b0;  // p

    Index state_dim() const { return layers.empty() ? 0 : layers.front().U.cols(); }
    Index input_dim() const { return layers.empty() ? 0 : layers.front().W.cols(); }
    Index output_dim() const { return b0.size(); }

    /// Throws DimensionError unless every matrix chains with its neighbours.
    void validate() const {
        detail::require_dims(!layers.empty(), "FfnnParams: at least one layer required");
        const Index m = input_dim();
        Index prev = state_dim();
        for (const auto& l : layers) {
            detail::require_dims(l.W.rows() == l.width() && l.U.rows() == l.width(),
                                 "FfnnParams: layer row counts must equal bias length");
            detail::require_dims(l.W.cols() == m, "FfnnParams: every W_l must have m columns");
            detail::require_dims(l.U.cols() == prev, "FfnnParams: U_l columns must equal previous width");
            prev = l.width();
        }
        detail::require_dims(U0.cols() == prev, "FfnnParams: U0 columns must equal last hidden width");
        detail::require_dims(U0.rows() == b0.size(), "FfnnParams: U0 rows must equal b0 length");
    }

    Index parameter_count() const {
        Index c = U0.size() + b0.size();
        for (const auto& l : layers) c += l.W.size() + l.U.size() + l.b.size();
        return c;
    }

    /// All parameters in a fixed order: per layer (W, U, b) column-major, then U0, b0.
    Vec flatten() const {
        Vec out(parameter_count());
        Index k = 0;
        auto put = [&](const auto& m) {
            out.segment(k, m.size()) = Eigen::Map<const Vec>(m.data(), m.size());
            k += m.size();
        };
        for (const auto& l : layers) {
            put(l.W);
            put(l.U);
            put(l.b);
        }
        put(U0);
        put(b0);
        return out;
    }

    void unflatten(const Vec& theta) {
        detail::require_dims(theta.size() == parameter_count(), "FfnnParams::unflatten: size mismatch");
        Index k = 0;
        auto get = [&](auto& m) {
            Eigen::Map<Vec>(m.data(), m.size()) = theta.segment(k, m.size());
            k += m.size();
        };
        for (auto& l : layers) {
            get(l.W);
            get(l.U);
            get(l.b);
        }
        get(U0);
        get(b0);
    }

    void set_zero() {
        for (auto& l : layers) {
            l.W.setZero();
            l.U.setZero();
            l.b.setZero();
        }
        U0.setZero();
        b0.setZero();
    }

    FfnnParams& operator+=(const FfnnParams& o) {
        for (size_t i = 0; i < layers.size(); ++i) {
            layers[i].W += o.layers[i].W;
            layers[i].U += o.layers[i].U;
            layers[i].b += o.layers[i].b;
        }
        U0 += o.U0;
        b0 += o.b0;
        return *this;
    }

    /// Zero-valued parameters with the given layer widths.
    static FfnnParams zeros(Index n, Index m, Index p, const std::vector<Index>& widths,
                            Activation act = Activation::Tanh) {
        FfnnParams f;
        Index prev = n;
        for (Index w : widths) {
            f.layers.push_back({Mat::Zero(w, m), Mat::Zero(w, prev), Vec::Zero(w), act});
            prev = w;
        }
        f.U0 = Mat::Zero(p, prev);
        f.b0 = Vec::Zero(p);
        return f;
    }
};

/// Lipschitz bound of eta with respect to x: ||U0|| * prod_l L_psi_l ||U_l||.
/// A value below one is the contraction certificate used for training and acceptance.
inline double contraction_margin(const FfnnParams& f, double tol = 1e-9, int max_iter = 500) {
    double r = spectral_norm(f.U0, tol, max_iter).value;
    for (const auto& l : f.layers) r *= activation_lipschitz(l.activation) * spectral_norm(l.U, tol, max_iter).value;
    return r;
}

/// Adds scale * d(contraction_margin)/d(params) into `grad` and returns the margin.
inline double contraction_margin_gradient(const FfnnParams& f, double scale, FfnnParams& grad,
                                          double tol = 1e-9, int max_iter = 500) {
    std::vector<SpectralNorm> norms;
    norms.push_back(spectral_norm(f.U0, tol, max_iter));
    for (const auto& l : f.layers) norms.push_back(spectral_norm(l.U, tol, max_iter));
    double lip = 1.0;
    for (const auto& l : f.layers) lip *= activation_lipschitz(l.activation);
    double r = lip;
    for (const auto& s : norms) r *= s.value;
    if (r == 0.0) return 0.0;
    // d sigma / dM = left * right'
    grad.U0 += scale * (r / norms[0].value) * norms[0].left * norms[0].right.transpose();
    for (size_t i = 0; i < f.layers.size(); ++i) {
        const auto& s = norms[i + 1];
        grad.layers[i].U += scale * (r / s.value) * s.left * s.right.transpose();
    }
    return r;
}

/// The 0/1 matrices realising the regressor shift register.
struct ShiftMatrices {
    Mat A;   // n x n
    Mat Bu;  // n x m
    Mat Bx;  // n x p
    Mat C;   // p x n
};

/// State layout: blocks z_1 (oldest) .. z_N (newest), z_i = [y_{k-N+i}; u_{k-N-1+i}].
inline ShiftMatrices build_shift_matrices(Index N, Index m, Index p) {
    if (N < 1 || m < 1 || p != m) throw DimensionError("build_shift_matrices: need N >= 1, m >= 1, p == m");
    const Index blk = m + p;
    const Index n = N * blk;
    ShiftMatrices s{Mat::Zero(n, n), Mat::Zero(n, m), Mat::Zero(n, p), Mat::Zero(p, n)};
    for (Index i = 0; i + 1 < N; ++i) s.A.block(i * blk, (i + 1) * blk, blk, blk).setIdentity();
    const Index last = (N - 1) * blk;
    s.Bx.block(last, 0, p, p).setIdentity();
    s.Bu.block(last + p, 0, m, m).setIdentity();
    s.C.block(0, last, p, p).setIdentity();
    return s;
}

/// Affine map between physical signals and the coordinates the network works in:
/// normalized = (physical - offset) / scale.
struct Scaling {
    Vec u_offset, u_scale, y_offset, y_scale;

    static Scaling identity(Index m, Index p) {
        return {Vec::Zero(m), Vec::Ones(m), Vec::Zero(p), Vec::Ones(p)};
    }
    Vec normalize_u(const Vec& u) const { return (u - u_offset).cwiseQuotient(u_scale); }
    Vec normalize_y(const Vec& y) const { return (y - y_offset).cwiseQuotient(y_scale); }
    Vec denormalize_u(const Vec& u) const { return u.cwiseProduct(u_scale) + u_offset; }
    Vec denormalize_y(const Vec& y) const { return y.cwiseProduct(y_scale) + y_offset; }
};

/// Intermediate values of one eta evaluation, kept for reverse-mode sweeps.
struct EtaTape {
    Vec u;
    std::vector<Vec> h;     // h[0] = x, h[l] = output of layer l
    std::vector<Vec> dpsi;  // dpsi[l-1] = psi_l' at the pre-activation of layer l
};

struct Linearization {
    Mat A_delta;  // n x n
    Mat B_delta;  // n x m
    Mat eta_x;    // p x n
    Mat eta_u;    // p x m
};

/// Neural NARX model in shift-register state-space form:
///   x+ = A x + Bu u + Bx eta(x, u),  y = C x.
/// Immutable after construction.
class NnarxModel {
   public:
    NnarxModel() = default;

    NnarxModel(Index N, FfnnParams params, Scaling scaling = {})
        : N_(N), params_(std::move(params)), scaling_(std::move(scaling)) {
        params_.validate();
        m_ = params_.input_dim();
        p_ = params_.output_dim();
        shift_ = build_shift_matrices(N_, m_, p_);
        detail::require_dims(params_.state_dim() == state_dim(), "NnarxModel: U_1 columns must equal N*(m+p)");
        if (scaling_.u_scale.size() == 0) scaling_ = Scaling::identity(m_, p_);
        detail::require_dims(scaling_.u_scale.size() == m_ && scaling_.u_offset.size() == m_ &&
                                 scaling_.y_scale.size() == p_ && scaling_.y_offset.size() == p_,
                             "NnarxModel: scaling dimensions");
    }

    Index horizon() const { return N_; }
    Index input_dim() const { return m_; }
    Index output_dim() const { return p_; }
    Index block_dim() const { return m_ + p_; }
    Index state_dim() const { return N_ * (m_ + p_); }
    const FfnnParams& params() const { return params_; }
    const ShiftMatrices& shift() const { return shift_; }
    const Scaling& scaling() const { return scaling_; }

    NnarxModel with_params(FfnnParams p) const { return NnarxModel(N_, std::move(p), scaling_); }

    Vec eta(const Vec& x, const Vec& u, EtaTape* tape = nullptr) const {
        check_xu(x, u);
        Vec h = x;
        if (tape) {
            tape->u = u;
            tape->h.assign(1, x);
            tape->dpsi.clear();
        }
        for (const auto& l : params_.layers) {
            Vec a = l.W * u + l.U * h + l.b;
            if (l.activation == Activation::Tanh) {
                h = a.array().tanh().matrix();
                if (tape) tape->dpsi.push_back((1.0 - h.array().square()).matrix());
            } else {
                h = a;
                if (tape) tape->dpsi.push_back(Vec::Ones(a.size()));
            }
            if (tape) tape->h.push_back(h);
        }
        return params_.U0 * h + params_.b0;
    }

    /// Reverse sweep of eta: given lambda = dL/d eta, accumulate dL/dx, dL/du and dL/dparams.
    /// Any of the outputs may be null.
    void eta_vjp(const EtaTape& tape, const Vec& lambda, Vec* gx, Vec* gu, FfnnParams* gparams) const {
        const auto M = params_.layers.size();
        if (gparams) {
            gparams->U0.noalias() += lambda * tape.h[M].transpose();
            gparams->b0 += lambda;
        }
        Vec g = params_.U0.transpose() * lambda;  // dL/dh_M
        for (size_t li = M; li-- > 0;) {
            const auto& l = params_.layers[li];
            Vec ga = g.cwiseProduct(tape.dpsi[li]);  // dL/d pre-activation
            if (gparams) {
                auto& gl = gparams->layers[li];
                gl.W.noalias() += ga * tape.u.transpose();
                gl.U.noalias() += ga * tape.h[li].transpose();
                gl.b += ga;
            }
            if (gu) gu->noalias() += l.W.transpose() * ga;
            g = l.U.transpose() * ga;
        }
        if (gx) *gx += g;
    }

    /// x+ = A x + Bu u + Bx eta(x, u), evaluated through the block structure.
    Vec step(const Vec& x, const Vec& u, EtaTape* tape = nullptr) const {
        Vec y_next = eta(x, u, tape);
        return shift_in(x, y_next, u);
    }

    /// Same as step() but through the dense matrices of the state-space form.
    Vec step_dense(const Vec& x, const Vec& u) const {
        return shift_.A * x + shift_.Bu * u + shift_.Bx * eta(x, u);
    }

    Vec output(const Vec& x) const { return x.segment((N_ - 1) * block_dim(), p_); }

    /// Outputs y_0 .. y_T (p x (T+1)) for inputs u_0 .. u_{T-1} (m x T).
    Mat simulate(const Vec& x0, const Mat& u_seq) const {
        detail::require_dims(u_seq.rows() == m_ && u_seq.cols() >= 1, "simulate: u_seq must be m x T, T >= 1");
        Mat y(p_, u_seq.cols() + 1);
        Vec x = x0;
        y.col(0) = output(x);
        for (Index k = 0; k < u_seq.cols(); ++k) {
            x = step(x, u_seq.col(k));
            y.col(k + 1) = output(x);
        }
        return y;
    }

    Linearization jacobians(const Vec& x, const Vec& u) const {
        check_xu(x, u);
        Mat Jx = Mat::Identity(state_dim(), state_dim());  // dh/dx
        Mat Ju = Mat::Zero(state_dim(), m_);               // dh/du
        Vec h = x;
        for (const auto& l : params_.layers) {
            Vec a = l.W * u + l.U * h + l.b;
            Vec d;
            if (l.activation == Activation::Tanh) {
                h = a.array().tanh().matrix();
                d = (1.0 - h.array().square()).matrix();
            } else {
                h = a;
                d = Vec::Ones(a.size());
            }
            Mat nJx = d.asDiagonal() * (l.U * Jx);
            Mat nJu = d.asDiagonal() * (l.W + l.U * Ju);
            Jx = std::move(nJx);
            Ju = std::move(nJu);
        }
        Linearization lin;
        lin.eta_x = params_.U0 * Jx;
        lin.eta_u = params_.U0 * Ju;
        lin.A_delta = shift_.A + shift_.Bx * lin.eta_x;
        lin.B_delta = shift_.Bu + shift_.Bx * lin.eta_u;
        return lin;
    }

    /// x = [ybar; ubar] repeated over all N blocks.
    Vec equilibrium_state(const Vec& ybar, const Vec& ubar) const {
        detail::require_dims(ybar.size() == p_ && ubar.size() == m_, "equilibrium_state: dimensions");
        Vec x(state_dim());
        for (Index i = 0; i < N_; ++i) {
            x.segment(i * block_dim(), p_) = ybar;
            x.segment(i * block_dim() + p_, m_) = ubar;
        }
        return x;
    }

    /// n x m matrix summing the u-slots of every block (d x / d ubar of equilibrium_state).
    Mat input_slot_selector() const {
        Mat S = Mat::Zero(state_dim(), m_);
        for (Index i = 0; i < N_; ++i) S.block(i * block_dim() + p_, 0, m_, m_).setIdentity();
        return S;
    }

    /// State from histories: y_hist columns y_{k-N+1}..y_k and u_hist columns u_{k-N}..u_{k-1}.
    Vec state_from_history(const Mat& y_hist, const Mat& u_hist) const {
        detail::require_dims(y_hist.rows() == p_ && y_hist.cols() == N_ && u_hist.rows() == m_ && u_hist.cols() == N_,
                             "state_from_history: need N columns of y and u");
        Vec x(state_dim());
        for (Index i = 0; i < N_; ++i) {
            x.segment(i * block_dim(), p_) = y_hist.col(i);
            x.segment(i * block_dim() + p_, m_) = u_hist.col(i);
        }
        return x;
    }

    Vec shift_in(const Vec& x, const Vec& y_next, const Vec& u) const {
        const Index blk = block_dim();
        Vec xn(state_dim());
        xn.head(state_dim() - blk) = x.tail(state_dim() - blk);
        xn.segment(state_dim() - blk, p_) = y_next;
        xn.tail(m_) = u;
        return xn;
    }

   private:
    void check_xu(const Vec& x, const Vec& u) const {
        detail::require_dims(x.size() == state_dim() && u.size() == m_, "NnarxModel: state/input dimension mismatch");
    }

    Index N_ = 0, m_ = 0, p_ = 0;
    FfnnParams params_;
    Scaling scaling_;
    ShiftMatrices shift_;
};

/// Box U = {u : lower <= u <= upper}.
struct InputBox {
    Vec lower, upper;

    InputBox() = default;
    InputBox(Vec lo, Vec hi) : lower(std::move(lo)), upper(std::move(hi)) {
        detail::require_dims(lower.size() == upper.size(), "InputBox: bound sizes differ");
        if ((lower.array() >= upper.array()).any()) throw ValidationError("InputBox: lower must be < upper");
    }
    static InputBox scalar(double lo, double hi) { return InputBox(Vec::Constant(1, lo), Vec::Constant(1, hi)); }
    static InputBox unbounded(Index m) {
        return InputBox(Vec::Constant(m, -std::numeric_limits<double>::infinity()),
                        Vec::Constant(m, std::numeric_limits<double>::infinity()));
    }

    bool contains(const Vec& u, double tol = 0.0) const {
        return ((u.array() >= lower.array() - tol) && (u.array() <= upper.array() + tol)).all();
    }
    Vec clamp(const Vec& u) const { return u.cwiseMax(lower).cwiseMin(upper); }
    double violation(const Vec& u) const {
        return std::max({0.0, (lower - u).maxCoeff(), (u - upper).maxCoeff()});
    }
    InputBox normalized(const Scaling& s) const {
        return InputBox(s.normalize_u(lower), s.normalize_u(upper));
    }
};

}  // namespace nnmpc
