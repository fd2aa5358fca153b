#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "model.hpp"

namespace smpc {

/// Steady-state Kalman filter in innovation form.
struct InnovationForm {
    Matrix L;       // n_x x n_y gain
    Matrix S;       // innovation covariance
    Matrix P_prior; // x_t | y_{1:t-1}
    Matrix P_post;  // x_t | y_{1:t}
    int iterations = 0;
};

// Relative Frobenius residual of the filtering Riccati map at P.
inline double riccati_residual(const StateSpaceModel& m, const Matrix& P) {
    const Matrix S    = m.C * P * m.C.transpose() + m.R;
    const Matrix K    = P * m.C.transpose() * S.inverse();
    const Matrix next = m.A * (P - K * m.C * P) * m.A.transpose() + m.E * m.E.transpose();
    return (next - P).norm() / std::max(1.0, P.norm());
}

/**
 * Fixed-point iteration on the prior covariance
 *
 *   P <- A (P - P C^T (C P C^T + R)^{-1} C P) A^T + E E^T
 *
 * symmetrized every step. Throws NumericalError when the change does not drop
 * below `tol` (relative Frobenius) within `max_iter` steps.
 */
inline InnovationForm dare_steady_state(const StateSpaceModel& m, double tol = 1e-13, int max_iter = 200000,
                                        const std::optional<Matrix>& P0 = std::nullopt) {
    require(min_eigenvalue(m.R) > 0.0, "dare_steady_state: R must be positive definite");
    const Index nx = m.nx();
    const Matrix Q = m.E * m.E.transpose();
    Matrix P       = P0 ? *P0 : Matrix(Q);
    require(P.rows() == nx && P.cols() == nx, "dare_steady_state: P0 has the wrong size");

    InnovationForm out;
    for (int it = 1; it <= max_iter; ++it) {
        const Matrix S = symmetrize(m.C * P * m.C.transpose() + m.R);
        const Matrix K = P * m.C.transpose() * S.llt().solve(Matrix::Identity(S.rows(), S.rows()));
        Matrix next    = symmetrize(m.A * (P - K * m.C * P) * m.A.transpose() + Q);
        if (!next.allFinite()) throw NumericalError("dare_steady_state: iteration diverged");
        const double change = (next - P).stableNorm() / std::max(1.0, next.stableNorm());
        P                   = std::move(next);
        if (change <= tol) {
            out.iterations = it;
            out.P_prior    = P;
            out.S          = symmetrize(m.C * P * m.C.transpose() + m.R);
            out.L          = P * m.C.transpose() * out.S.llt().solve(Matrix::Identity(out.S.rows(), out.S.rows()));
            out.P_post     = symmetrize((Matrix::Identity(nx, nx) - out.L * m.C) * P);
            return out;
        }
    }
    throw NumericalError("dare_steady_state: no convergence within max_iter (undetectable pair or tolerance too tight)");
}

inline double gaussian_logpdf(const Vector& e, const Eigen::LLT<Matrix>& Sllt) {
    const Index n      = e.size();
    const Matrix& Lf   = Sllt.matrixLLT();
    double logdet      = 0.0;
    for (Index i = 0; i < n; ++i) logdet += 2.0 * std::log(Lf(i, i));
    const Vector z = Sllt.matrixL().solve(e);
    return -0.5 * (static_cast<double>(n) * std::log(2.0 * std::numbers::pi) + logdet + z.squaredNorm());
}

struct FilterOutput {
    Matrix x_filt;      // column t = x_{t|t}, t = 0..T (column 0 is the prior mean)
    Matrix innovations; // column t-1 = e_t, t = 1..T
    double loglik = 0.0;
};

/**
 * Stationary filter with the gain of `inno`:
 *   e_{t+1}     = y_{t+1} - C (A x_{t|t} + B u_t)
 *   x_{t+1|t+1} = A x_{t|t} + B u_t + L e_{t+1}
 */
inline FilterOutput filter(const StateSpaceModel& m, const InnovationForm& inno, const Trajectory& traj,
                           const GaussianBelief& init) {
    const Index T = traj.length(), nx = m.nx(), ny = m.ny();
    require(init.mean.size() == nx, "filter: initial belief has the wrong dimension");
    require(traj.Y.rows() == ny && traj.U.rows() == m.nu() && traj.Y.cols() == T, "filter: trajectory mismatch");
    FilterOutput out{Matrix(nx, T + 1), Matrix(ny, T), 0.0};
    const Eigen::LLT<Matrix> Sllt(inno.S);
    Vector x = init.mean;
    out.x_filt.col(0) = x;
    for (Index t = 0; t < T; ++t) {
        const Vector pred = m.A * x + m.B * traj.u(t);
        const Vector e    = traj.y(t + 1) - m.C * pred;
        x                 = pred + inno.L * e;
        out.x_filt.col(t + 1)    = x;
        out.innovations.col(t)   = e;
        out.loglik              += gaussian_logpdf(e, Sllt);
    }
    return out;
}

/// Full time-varying Kalman recursion, kept for the smoother and as a reference.
struct TimeVaryingFilter {
    std::vector<Vector> x_pred, x_filt; // index t = 0..T (x_pred[0] = prior)
    std::vector<Matrix> P_pred, P_filt;
    Matrix innovations;
    std::vector<Matrix> S;
    double loglik = 0.0;
};

inline TimeVaryingFilter time_varying_filter(const StateSpaceModel& m, const Trajectory& traj,
                                             const GaussianBelief& init) {
    const Index T = traj.length(), nx = m.nx(), ny = m.ny();
    require(init.mean.size() == nx && init.cov.rows() == nx, "time_varying_filter: initial belief mismatch");
    TimeVaryingFilter f;
    f.x_pred.resize(T + 1);
    f.x_filt.resize(T + 1);
    f.P_pred.resize(T + 1);
    f.P_filt.resize(T + 1);
    f.S.resize(T + 1);
    f.innovations.resize(ny, T);
    f.x_pred[0] = f.x_filt[0] = init.mean;
    f.P_pred[0] = f.P_filt[0] = init.cov;
    const Matrix Q  = m.E * m.E.transpose();
    const Matrix In = Matrix::Identity(nx, nx);
    for (Index t = 0; t < T; ++t) {
        f.x_pred[t + 1] = m.A * f.x_filt[t] + m.B * traj.u(t);
        f.P_pred[t + 1] = symmetrize(m.A * f.P_filt[t] * m.A.transpose() + Q);
        const Matrix& P = f.P_pred[t + 1];
        Matrix S        = symmetrize(m.C * P * m.C.transpose() + m.R);
        const Eigen::LLT<Matrix> Sllt(S);
        if (Sllt.info() != Eigen::Success) throw NumericalError("time_varying_filter: innovation covariance not PD");
        const Matrix K = Sllt.solve(m.C * P).transpose();
        const Vector e = traj.y(t + 1) - m.C * f.x_pred[t + 1];
        f.x_filt[t + 1] = f.x_pred[t + 1] + K * e;
        // Joseph form keeps P_filt PSD
        const Matrix IKC = In - K * m.C;
        f.P_filt[t + 1]  = symmetrize(IKC * P * IKC.transpose() + K * m.R * K.transpose());
        f.innovations.col(t) = e;
        f.loglik += gaussian_logpdf(e, Sllt);
        f.S[t + 1] = std::move(S);
    }
    return f;
}

struct SmootherOutput {
    std::vector<Vector> mean;  // x_{t|T}, t = 0..T
    std::vector<Matrix> cov;   // P_{t|T}
    std::vector<Matrix> cross; // cross[t] = Cov(x_{t+1}, x_t | y_{1:T}), t = 0..T-1
    double loglik = 0.0;       // log p(y_{1:T}) under the model
};

/// Rauch-Tung-Striebel fixed-interval smoother on top of the time-varying filter.
inline SmootherOutput rts_smooth(const StateSpaceModel& m, const Trajectory& traj, const GaussianBelief& init) {
    const TimeVaryingFilter f = time_varying_filter(m, traj, init);
    const Index T             = traj.length();
    SmootherOutput s;
    s.mean.resize(T + 1);
    s.cov.resize(T + 1);
    s.cross.resize(T);
    s.loglik  = f.loglik;
    s.mean[T] = f.x_filt[T];
    s.cov[T]  = f.P_filt[T];
    for (Index t = T - 1; t >= 0; --t) {
        const Eigen::LDLT<Matrix> Pp(f.P_pred[t + 1]);
        // J = P_{t|t} A^T P_{t+1|t}^{-1}
        const Matrix J = Pp.solve(m.A * f.P_filt[t]).transpose();
        s.mean[t]      = f.x_filt[t] + J * (s.mean[t + 1] - f.x_pred[t + 1]);
        s.cov[t]       = symmetrize(f.P_filt[t] + J * (s.cov[t + 1] - f.P_pred[t + 1]) * J.transpose());
        s.cross[t]     = s.cov[t + 1] * J.transpose();
    }
    return s;
}

} // namespace smpc
