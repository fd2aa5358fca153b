#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kalman.hpp"
#include "rng.hpp"

namespace smpc {

/**
 * EM settings. When `E_pattern` / `R_pattern` are non-empty the noise
 * matrices are known up to a positive scale: E = sqrt(q) * E_pattern,
 * R = r * R_pattern (both expressed in the output normal form coordinates).
 * An empty pattern means an unstructured covariance.
 *
 * `q_floor` adds q_floor * trace(E_p E_p^T) / n_x * I to a rank-deficient
 * process-noise pattern. Without it the M-step cannot move the rows of A in
 * the pattern's null space and the complete-data likelihood is degenerate.
 */
struct EMConfig {
    int n_x           = 6;
    int max_iters     = 500;
    double loglik_tol = 1e-6; // relative improvement
    std::uint64_t seed = 0;
    Matrix E_pattern;
    Matrix R_pattern;
    double q_floor = 1e-2;
    bool update_C  = true;
    double prior_var = 1.0; // x_0 ~ N(mu_0, prior_var * I), mu_0 re-estimated

    void validate() const {
        require(n_x >= 1, "EMConfig: n_x must be >= 1");
        require(max_iters >= 1, "EMConfig: max_iters must be >= 1");
        require(loglik_tol > 0.0, "EMConfig: loglik_tol must be positive");
        require(q_floor >= 0.0 && prior_var > 0.0, "EMConfig: q_floor >= 0 and prior_var > 0 required");
        if (E_pattern.size() > 0) require(E_pattern.rows() == n_x, "EMConfig: E_pattern must have n_x rows");
    }
};

struct EMResult {
    StateSpaceModel model; // output normal form
    GaussianBelief init;
    std::vector<double> loglik_trace;
    int iterations = 0;
    bool converged = false;
    double q_scale = 1.0, r_scale = 1.0;
    std::vector<std::string> warnings;
};

namespace em_detail {

inline Matrix process_pattern(const EMConfig& cfg) {
    const Matrix Qp = cfg.E_pattern * cfg.E_pattern.transpose();
    const double lift = cfg.q_floor * Qp.trace() / static_cast<double>(cfg.n_x);
    return Qp + lift * Matrix::Identity(cfg.n_x, cfg.n_x);
}

// High-order ARX fit followed by a Ho-Kalman (balanced) realization of order n_x.
inline StateSpaceModel arx_realization(const Trajectory& traj, const EMConfig& cfg, std::vector<std::string>& warnings,
                                       Matrix& residual_cov) {
    const Index T = traj.length(), ny = traj.Y.rows(), nu = traj.U.rows(), nx = cfg.n_x;
    const Index p = 2 * nx;
    const Index rows = T - p;
    const Index cols = p * (ny + nu);
    if (rows <= 2 * cols) throw InsufficientDataError("em_identify: trajectory too short for the ARX initializer");

    // y_t = sum_i a_i y_{t-i} + sum_i b_i u_{t-i},  t = p+1..T
    Matrix Phi(rows, cols), Yt(rows, ny);
    for (Index r = 0; r < rows; ++r) {
        const Index t = p + 1 + r;
        for (Index i = 1; i <= p; ++i) {
            Phi.row(r).segment((i - 1) * ny, ny)          = traj.y(t - i).transpose();
            Phi.row(r).segment(p * ny + (i - 1) * nu, nu) = traj.u(t - i).transpose();
        }
        Yt.row(r) = traj.y(t).transpose();
    }
    Eigen::JacobiSVD<Matrix> svd(Phi, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& sv = svd.singularValues();
    if (sv(sv.size() - 1) <= 0.0 || sv(0) / sv(sv.size() - 1) > 1e8)
        warnings.emplace_back("regressor condition number above 1e8: input may not be persistently exciting");
    const Matrix Theta = svd.solve(Yt); // cols x ny
    const Matrix res   = Yt - Phi * Theta;
    residual_cov       = res.transpose() * res / static_cast<double>(rows);

    std::vector<Matrix> a(static_cast<std::size_t>(p + 1)), b(static_cast<std::size_t>(p + 1));
    for (Index i = 1; i <= p; ++i) {
        a[static_cast<std::size_t>(i)] = Theta.middleRows((i - 1) * ny, ny).transpose();
        b[static_cast<std::size_t>(i)] = Theta.middleRows(p * ny + (i - 1) * nu, nu).transpose();
    }
    // impulse response g_j = C A^{j-1} B
    const Index nh = 4 * nx + 2;
    std::vector<Matrix> gmk(static_cast<std::size_t>(nh + 1), Matrix::Zero(ny, nu));
    for (Index j = 1; j <= nh; ++j) {
        Matrix gj = j <= p ? b[static_cast<std::size_t>(j)] : Matrix::Zero(ny, nu);
        for (Index i = 1; i <= std::min(p, j - 1); ++i) gj += a[static_cast<std::size_t>(i)] * gmk[static_cast<std::size_t>(j - i)];
        gmk[static_cast<std::size_t>(j)] = gj;
    }
    const Index hr = 2 * nx, hc = 2 * nx;
    Matrix H(hr * ny, hc * nu), Hs(hr * ny, hc * nu);
    for (Index i = 0; i < hr; ++i)
        for (Index j = 0; j < hc; ++j) {
            H.block(i * ny, j * nu, ny, nu)  = gmk[static_cast<std::size_t>(i + j + 1)];
            Hs.block(i * ny, j * nu, ny, nu) = gmk[static_cast<std::size_t>(i + j + 2)];
        }
    Eigen::JacobiSVD<Matrix> hsvd(H, Eigen::ComputeThinU | Eigen::ComputeThinV);
    Vector s = hsvd.singularValues().head(nx);
    Matrix U = hsvd.matrixU().leftCols(nx), V = hsvd.matrixV().leftCols(nx);
    if (s(nx - 1) <= 1e-10 * s(0)) {
        // rank-deficient Hankel matrix: nudge the trailing directions so the
        // realization stays minimal
        warnings.emplace_back("ARX Hankel matrix rank-deficient; perturbing the initial realization");
        const CounterRng rng(cfg.seed, streams::perturbation);
        for (Index i = 0; i < nx; ++i) s(i) = std::max(s(i), 1e-6 * s(0) * (1.0 + 0.1 * rng.uniform(static_cast<std::uint64_t>(i))));
    }
    const Vector sh = s.cwiseSqrt(), shi = sh.cwiseInverse();
    Matrix A = shi.asDiagonal() * U.transpose() * Hs * V * shi.asDiagonal();
    const Matrix O = U * sh.asDiagonal();
    const Matrix Gm = sh.asDiagonal() * V.transpose();

    // keep the initial model strictly stable
    Eigen::EigenSolver<Matrix> es(A);
    const double rho = es.eigenvalues().cwiseAbs().maxCoeff();
    if (rho >= 0.999) A *= 0.995 / rho;

    StateSpaceModel m;
    m.A = A;
    m.B = Gm.leftCols(nu);
    m.C = O.topRows(ny);
    m.E = Matrix::Zero(nx, nx);
    m.R = Matrix::Identity(ny, ny);
    return m;
}

struct Stats {
    Matrix Psi, Gamma, S11, Syx, Sxx_out, Syy;
    Vector mu0;
};

inline Stats sufficient_stats(const SmootherOutput& sm, const Trajectory& traj) {
    const Index T = traj.length(), nx = sm.mean[0].size(), nu = traj.U.rows(), ny = traj.Y.rows();
    Stats st;
    st.Psi     = Matrix::Zero(nx + nu, nx + nu);
    st.Gamma   = Matrix::Zero(nx, nx + nu);
    st.S11     = Matrix::Zero(nx, nx);
    st.Syx     = Matrix::Zero(ny, nx);
    st.Sxx_out = Matrix::Zero(nx, nx);
    st.Syy     = Matrix::Zero(ny, ny);
    Vector xu(nx + nu);
    for (Index t = 0; t < T; ++t) {
        const auto& xt  = sm.mean[static_cast<std::size_t>(t)];
        const auto& xt1 = sm.mean[static_cast<std::size_t>(t + 1)];
        xu << xt, traj.u(t);
        st.Psi += xu * xu.transpose();
        st.Psi.topLeftCorner(nx, nx) += sm.cov[static_cast<std::size_t>(t)];
        st.Gamma += xt1 * xu.transpose();
        st.Gamma.leftCols(nx) += sm.cross[static_cast<std::size_t>(t)];
        const Matrix E11 = sm.cov[static_cast<std::size_t>(t + 1)] + xt1 * xt1.transpose();
        st.S11 += E11;
        st.Sxx_out += E11;
        st.Syx += traj.y(t + 1) * xt1.transpose();
        st.Syy += traj.y(t + 1) * traj.y(t + 1).transpose();
    }
    st.mu0 = sm.mean[0];
    return st;
}

} // namespace em_detail

/**
 * EM iterations from a given starting model. Each iteration runs the RTS
 * smoother (E-step) and the exact joint maximizer of the expected
 * complete-data log-likelihood over [A, B], the process-noise scale, C, and
 * the measurement-noise scale (M-step). The trace holds log p(Y) for every
 * evaluated model, so it is non-decreasing up to round-off; a drop of more
 * than 10 * tol (relative) throws.
 */
inline EMResult em_refine(const Trajectory& traj, StateSpaceModel start, const EMConfig& cfg,
                          GaussianBelief init = {}) {
    cfg.validate();
    const Index nx = start.nx(), ny = start.ny(), nu = start.nu();
    const auto T   = static_cast<double>(traj.length());
    if (init.mean.size() == 0) init = GaussianBelief(Vector::Zero(nx), cfg.prior_var * Matrix::Identity(nx, nx));
    const bool eq = cfg.E_pattern.size() > 0, rq = cfg.R_pattern.size() > 0;
    const Matrix Qp     = eq ? em_detail::process_pattern(cfg) : Matrix();
    const Matrix Qp_inv = eq ? Matrix(Qp.inverse()) : Matrix();
    const Matrix Qp_sq  = eq ? psd_sqrt(Qp) : Matrix();
    const Matrix Rp_inv = rq ? Matrix(cfg.R_pattern.inverse()) : Matrix();

    EMResult res;
    StateSpaceModel m = std::move(start);
    for (int it = 0; it < cfg.max_iters; ++it) {
        const SmootherOutput sm = rts_smooth(m, traj, init);
        const double ll         = sm.loglik;
        if (!std::isfinite(ll)) throw NumericalError("em_identify: non-finite log-likelihood");
        if (!res.loglik_trace.empty()) {
            const double prev = res.loglik_trace.back();
            if (ll < prev - 10.0 * cfg.loglik_tol * std::abs(prev))
                throw NumericalError("em_identify: log-likelihood decreased (EM invariant violated)");
            if (ll - prev < cfg.loglik_tol * std::abs(prev)) {
                res.loglik_trace.push_back(ll);
                res.converged = true;
                break;
            }
        }
        res.loglik_trace.push_back(ll);
        res.iterations = it + 1;

        const em_detail::Stats st = em_detail::sufficient_stats(sm, traj);
        const Eigen::LDLT<Matrix> psi(st.Psi);
        if (psi.info() != Eigen::Success || psi.rcond() < 1e-14)
            throw InsufficientDataError("em_identify: singular M-step normal equations");
        const Matrix Theta = psi.solve(st.Gamma.transpose()).transpose();
        const Matrix Wres  = symmetrize(st.S11 - Theta * st.Gamma.transpose());
        m.A = Theta.leftCols(nx);
        m.B = Theta.rightCols(nu);
        if (eq) {
            res.q_scale = (Qp_inv * Wres).trace() / (static_cast<double>(nx) * T);
            if (!(res.q_scale > 0.0)) throw NumericalError("em_identify: non-positive process-noise scale");
            m.E = std::sqrt(res.q_scale) * Qp_sq;
        } else {
            m.E = psd_sqrt(Wres / T);
        }

        if (cfg.update_C) {
            const Eigen::LDLT<Matrix> sxx(st.Sxx_out);
            m.C = sxx.solve(st.Syx.transpose()).transpose();
        }
        const Matrix Rres = symmetrize(st.Syy - m.C * st.Syx.transpose() - st.Syx * m.C.transpose() +
                                       m.C * st.Sxx_out * m.C.transpose());
        if (rq) {
            res.r_scale = (Rp_inv * Rres).trace() / (static_cast<double>(ny) * T);
            if (!(res.r_scale > 0.0)) throw NumericalError("em_identify: non-positive measurement-noise scale");
            m.R = res.r_scale * cfg.R_pattern;
        } else {
            m.R = Rres / T;
        }
        init.mean = st.mu0;
    }
    res.init  = init;
    res.model = m;
    return res;
}

/// Full identification: ARX/Ho-Kalman initializer, output normal form, EM.
inline EMResult em_identify(const Trajectory& traj, const EMConfig& cfg) {
    cfg.validate();
    require(traj.length() >= 10 * cfg.n_x, "em_identify: need T >= 10 n_x samples");
    std::vector<std::string> warnings;
    Matrix rcov;
    StateSpaceModel start = em_detail::arx_realization(traj, cfg, warnings, rcov);
    const Index ny = start.ny(), nx = start.nx();
    start = to_output_normal_form(start).model;

    // noise scales from the one-step ARX residual, split evenly
    const double s0 = 0.5 * rcov.trace() / static_cast<double>(ny);
    if (cfg.R_pattern.size() > 0) {
        start.R = s0 / (cfg.R_pattern.trace() / static_cast<double>(ny)) * cfg.R_pattern;
    } else {
        start.R = s0 * Matrix::Identity(ny, ny);
    }
    if (cfg.E_pattern.size() > 0) {
        const Matrix Qp = em_detail::process_pattern(cfg);
        start.E = std::sqrt(s0 / (Qp.trace() / static_cast<double>(nx))) * psd_sqrt(Qp);
    } else {
        start.E = std::sqrt(s0) * Matrix::Identity(nx, nx);
    }

    EMResult res = em_refine(traj, start, cfg);
    res.warnings.insert(res.warnings.begin(), warnings.begin(), warnings.end());
    if (cfg.update_C) {
        const NormalForm nf = to_output_normal_form(res.model);
        res.model           = nf.model;
        res.init.mean       = nf.T * res.init.mean;
        res.init.cov        = symmetrize(nf.T * res.init.cov * nf.T.transpose());
    }
    return res;
}

} // namespace smpc
