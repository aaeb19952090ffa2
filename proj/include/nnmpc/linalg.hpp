#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "errors.hpp"

namespace nnmpc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Dominant singular triplet of a matrix.
struct SpectralNorm {
    double value = 0.0;
    Vec left;   // unit, length rows
    Vec right;  // unit, length cols
    int iterations = 0;
};

/// Largest singular value by power iteration on M'M.
/// Stops when the relative change of the estimate drops below `tol` or after `max_iter` sweeps.
inline SpectralNorm spectral_norm(const Mat& M, double tol = 1e-9, int max_iter = 500) {
    SpectralNorm out;
    out.left = Vec::Zero(M.rows());
    out.right = Vec::Zero(M.cols());
    if (M.size() == 0 || M.cwiseAbs().maxCoeff() == 0.0) return out;

    // Deterministic start: the column with the largest norm, plus a small uniform component
    // so that it is never orthogonal to the dominant right singular vector.
    Index best = 0;
    M.colwise().squaredNorm().maxCoeff(&best);
    Vec v = Vec::Constant(M.cols(), 1e-3);
    v(best) += 1.0;
    v.normalize();

    double sigma = 0.0;
    for (int it = 1; it <= max_iter; ++it) {
        Vec mv = M * v;
        Vec w = M.transpose() * mv;
        double wn = w.norm();
        if (wn == 0.0) break;
        v = w / wn;
        double next = std::sqrt(wn);  // ||M'M v|| -> sigma^2 at convergence
        out.iterations = it;
        bool done = std::abs(next - sigma) <= tol * std::max(next, 1e-300);
        sigma = next;
        if (done) break;
    }
    Vec mv = M * v;
    out.value = mv.norm();
    out.right = v;
    out.left = out.value > 0 ? Vec(mv / out.value) : Vec(Vec::Zero(M.rows()));
    return out;
}

/// Largest eigenvalue modulus.
inline double spectral_radius(const Mat& A) {
    detail::require_dims(A.rows() == A.cols(), "spectral_radius: matrix must be square");
    if (A.size() == 0) return 0.0;
    Eigen::EigenSolver<Mat> es(A, /*computeEigenvectors=*/false);
    if (es.info() != Eigen::Success) throw Error("spectral_radius: eigenvalue computation failed");
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// Numerical rank: singular values below `rel_tol * sigma_max` count as zero.
inline Index numerical_rank(const Mat& M, double rel_tol = 1e-8) {
    if (M.size() == 0) return 0;
    Eigen::JacobiSVD<Mat> svd(M);
    const Vec& s = svd.singularValues();
    if (s.size() == 0 || s(0) == 0.0) return 0;
    Index r = 0;
    for (Index i = 0; i < s.size(); ++i)
        if (s(i) > rel_tol * s(0)) ++r;
    return r;
}

/// Symmetric PSD square root L with L'L = Q.
inline Mat psd_sqrt(const Mat& Q) {
    detail::require_dims(Q.rows() == Q.cols(), "psd_sqrt: matrix must be square");
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (Q + Q.transpose()));
    Vec d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

inline bool is_psd(const Mat& Q, double tol = 1e-12) {
    if (Q.rows() != Q.cols()) return false;
    if ((Q - Q.transpose()).cwiseAbs().maxCoeff() > tol * std::max(1.0, Q.cwiseAbs().maxCoeff())) return false;
    Eigen::SelfAdjointEigenSolver<Mat> es(Q);
    return es.eigenvalues().minCoeff() >= -tol * std::max(1.0, Q.cwiseAbs().maxCoeff());
}

inline Mat block_diag(std::initializer_list<Mat> blocks) {
    Index r = 0, c = 0;
    for (const auto& b : blocks) {
        r += b.rows();
        c += b.cols();
    }
    Mat out = Mat::Zero(r, c);
    Index i = 0, j = 0;
    for (const auto& b : blocks) {
        out.block(i, j, b.rows(), b.cols()) = b;
        i += b.rows();
        j += b.cols();
    }
    return out;
}

}  // namespace nnmpc
