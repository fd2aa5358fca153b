#pragma once

#include <tuple>
#include <vector>

#include "kalman.hpp"

namespace smpc {

/**
 * Compact regression data for horizon k. Row t of Z is
 * z_t = [x_{t|t}; u_t; ...; u_{t+k-1}] and the full regressor is
 * Phi_t = z_t^T (x) I_{n_y}, never stored unless `expanded_phi` is called.
 * Y column r holds the target y_{t+k} of row r.
 */
struct RegressorSet {
    int k = 0;
    Index ny = 0, nx = 0, nu = 0;
    Index first_t = 0;
    Matrix Z; // rows x n_z
    Matrix Y; // n_y x rows

    [[nodiscard]] Index rows() const { return Z.rows(); }
    [[nodiscard]] Index n_theta() const { return ny * Z.cols(); }

    [[nodiscard]] Matrix expanded_phi() const {
        const Index n = rows() * ny, p = n_theta();
        Matrix Phi = Matrix::Zero(n, p);
        for (Index r = 0; r < rows(); ++r)
            for (Index c = 0; c < Z.cols(); ++c)
                for (Index i = 0; i < ny; ++i) Phi(r * ny + i, c * ny + i) = Z(r, c);
        return Phi;
    }

    [[nodiscard]] Vector stacked_targets() const { return Eigen::Map<const Vector>(Y.data(), Y.size()); }
};

inline RegressorSet build_regressors(const FilterOutput& fo, const Trajectory& traj, int k, Index burn_in) {
    require(k >= 1, "build_regressors: k must be >= 1");
    require(burn_in >= 0, "build_regressors: burn-in must be non-negative");
    const Index T = traj.length(), nx = fo.x_filt.rows(), nu = traj.U.rows(), ny = traj.Y.rows();
    const Index nz    = nx + k * nu;
    const Index first = burn_in, last = T - k; // t in [first, last]
    const Index rows  = last - first + 1;
    if (rows <= nz) throw InsufficientDataError("build_regressors: not enough data for horizon " + std::to_string(k));

    RegressorSet reg;
    reg.k       = k;
    reg.ny      = ny;
    reg.nx      = nx;
    reg.nu      = nu;
    reg.first_t = first;
    reg.Z.resize(rows, nz);
    reg.Y.resize(ny, rows);
    for (Index r = 0; r < rows; ++r) {
        const Index t = first + r;
        reg.Z.row(r).head(nx) = fo.x_filt.col(t).transpose();
        for (int i = 0; i < k; ++i) reg.Z.row(r).segment(nx + i * nu, nu) = traj.u(t + i).transpose();
        reg.Y.col(r) = traj.y(t + k);
    }
    return reg;
}

/**
 * Block-Toeplitz, block-banded covariance of the stacked residuals
 * e~_{t,k} = Ge e_{[t, t+k]}. lag[i] = E[e~_t e~_{t+i}^T]; lags >= k vanish.
 */
class BandedCovariance {
public:
    BandedCovariance(std::vector<Matrix> lags, Index n_blocks) : lags_(std::move(lags)), n_blocks_(n_blocks) {
        require(!lags_.empty(), "BandedCovariance: need at least the diagonal block");
        block_ = lags_[0].rows();
    }

    [[nodiscard]] Index block_size() const { return block_; }
    [[nodiscard]] Index n_blocks() const { return n_blocks_; }
    [[nodiscard]] Index size() const { return block_ * n_blocks_; }
    [[nodiscard]] Index bandwidth_blocks() const { return static_cast<Index>(lags_.size()) - 1; }
    [[nodiscard]] const Matrix& lag(Index i) const { return lags_[static_cast<std::size_t>(i)]; }

    // Scalar half-bandwidth of the lower triangle.
    [[nodiscard]] Index bandwidth() const { return block_ * (bandwidth_blocks() + 1) - 1; }

    // Entry (r, c); zero outside the band.
    [[nodiscard]] double operator()(Index r, Index c) const {
        const Index a = r / block_, b = c / block_;
        if (a >= b) {
            const Index d = a - b;
            return d <= bandwidth_blocks() ? lags_[static_cast<std::size_t>(d)](c % block_, r % block_) : 0.0;
        }
        const Index d = b - a;
        return d <= bandwidth_blocks() ? lags_[static_cast<std::size_t>(d)](r % block_, c % block_) : 0.0;
    }

    [[nodiscard]] Matrix dense() const {
        Matrix D(size(), size());
        for (Index c = 0; c < size(); ++c)
            for (Index r = 0; r < size(); ++r) D(r, c) = (*this)(r, c);
        return D;
    }

private:
    std::vector<Matrix> lags_;
    Index n_blocks_ = 0;
    Index block_    = 0;
};

inline BandedCovariance build_noise_covariance(const MultiStepMatrices& g, const Matrix& S, Index n_rows) {
    const Index ny = S.rows();
    const int k    = g.k;
    require(g.Ge.rows() == ny && g.Ge.cols() == (k + 1) * ny, "build_noise_covariance: Ge has the wrong shape");
    require(min_eigenvalue(S) > 0.0, "build_noise_covariance: S must be positive definite");
    auto Ge = [&](Index j) { return g.Ge.middleCols(j * ny, ny); };

    // lag i: sum_{j=i}^{k} Ge_j S Ge_{j-i}^T. Ge_0 == 0 so lag k is zero too.
    std::vector<Matrix> lags;
    for (Index i = 0; i < k; ++i) {
        Matrix acc = Matrix::Zero(ny, ny);
        for (Index j = i; j <= k; ++j) acc += Ge(j) * S * Ge(j - i).transpose();
        lags.push_back(i == 0 ? symmetrize(acc) : acc);
    }
    BandedCovariance cov(std::move(lags), n_rows);
    if (min_eigenvalue(cov.lag(0)) <= 0.0)
        throw NumericalError("build_noise_covariance: diagonal block not positive definite");
    return cov;
}

/// Lower Cholesky factor of a symmetric banded matrix, stored by diagonals.
class BandedCholesky {
public:
    explicit BandedCholesky(const BandedCovariance& A) : n_(A.size()), bw_(A.bandwidth()), L_(bw_ + 1, n_) {
        // L_(d, i) = L(i, i - d)
        L_.setZero();
        for (Index j = 0; j < n_; ++j) {
            double diag = A(j, j);
            for (Index p = std::max<Index>(0, j - bw_); p < j; ++p) diag -= sq(at(j, p));
            if (!(diag > 0.0)) throw NumericalError("BandedCholesky: matrix is not positive definite");
            const double ljj = std::sqrt(diag);
            L_(0, j)         = ljj;
            const Index iend = std::min(n_ - 1, j + bw_);
            for (Index i = j + 1; i <= iend; ++i) {
                double v = A(i, j);
                for (Index p = std::max<Index>(0, i - bw_); p < j; ++p) v -= at(i, p) * at(j, p);
                L_(i - j, i) = v / ljj;
            }
        }
    }

    // In-place forward substitution L X = B.
    void solve_lower_in_place(Matrix& B) const {
        require(B.rows() == n_, "BandedCholesky: right-hand side has the wrong size");
        for (Index i = 0; i < n_; ++i) {
            for (Index p = std::max<Index>(0, i - bw_); p < i; ++p) B.row(i) -= at(i, p) * B.row(p);
            B.row(i) /= L_(0, i);
        }
    }

    [[nodiscard]] double log_det() const { return 2.0 * L_.row(0).array().log().sum(); }

private:
    [[nodiscard]] double at(Index i, Index p) const { return L_(i - p, i); }
    static double sq(double x) { return x * x; }

    Index n_, bw_;
    Matrix L_;
};

/**
 * Per-horizon predictor: theta = vec([G0, Gu]) (column-major), its covariance,
 * and the over-approximated disturbance terms used by the tightening.
 */
struct MultiStepPredictor {
    int k = 0;
    Index nx = 0, nu = 0, ny = 0;
    Vector theta_hat;
    Matrix Sigma_theta;
    Matrix G0_hat, Gu_hat;
    Matrix Gw_hat, R_hat;

    [[nodiscard]] Index n_theta() const { return theta_hat.size(); }
};

inline Vector vec_blocks(const Matrix& G0, const Matrix& Gu) {
    Matrix G(G0.rows(), G0.cols() + Gu.cols());
    G << G0, Gu;
    return Eigen::Map<const Vector>(G.data(), G.size());
}

inline std::pair<Matrix, Matrix> extract_matrices(const Vector& theta, Index ny, Index nx) {
    require(theta.size() % ny == 0 && theta.size() / ny >= nx, "extract_matrices: size mismatch");
    const Eigen::Map<const Matrix> G(theta.data(), ny, theta.size() / ny);
    return {G.leftCols(nx), G.rightCols(G.cols() - nx)};
}

struct GlsResult {
    Vector theta_hat;
    Matrix Sigma_theta;
};

/// theta = (Phi^T Se^{-1} Phi)^{-1} Phi^T Se^{-1} y through the banded factor of Se.
inline GlsResult gls_identify(const RegressorSet& reg, const BandedCovariance& cov) {
    require(cov.size() == reg.rows() * reg.ny, "gls_identify: covariance size does not match the regressors");
    const Index p = reg.n_theta();
    Matrix W(cov.size(), p + 1);
    W.leftCols(p) = reg.expanded_phi();
    W.col(p)      = reg.stacked_targets();
    BandedCholesky(cov).solve_lower_in_place(W);

    const Matrix N = W.leftCols(p).transpose() * W.leftCols(p);
    const Eigen::LLT<Matrix> llt(N);
    if (llt.info() != Eigen::Success) throw InsufficientDataError("gls_identify: insufficient excitation");
    const Vector d = llt.matrixLLT().diagonal();
    if (d.minCoeff() <= 1e-7 * d.maxCoeff()) throw InsufficientDataError("gls_identify: insufficient excitation");

    GlsResult out;
    out.theta_hat   = llt.solve(W.leftCols(p).transpose() * W.col(p));
    out.Sigma_theta = symmetrize(llt.solve(Matrix::Identity(p, p)));
    return out;
}

// Dense reference path, O(n^3); only meant for cross-checks on short data.
inline GlsResult gls_identify_dense(const RegressorSet& reg, const BandedCovariance& cov) {
    const Matrix Phi = reg.expanded_phi();
    const Eigen::LLT<Matrix> Se(cov.dense());
    const Matrix SiPhi = Se.solve(Phi);
    const Matrix N     = Phi.transpose() * SiPhi;
    GlsResult out;
    out.Sigma_theta = symmetrize(N.inverse());
    out.theta_hat   = out.Sigma_theta * (SiPhi.transpose() * reg.stacked_targets());
    return out;
}

/// G_w and R of the estimated model, both scaled up by `inflation` >= 1.
inline std::pair<Matrix, Matrix> surrogate_disturbance_terms(const StateSpaceModel& est, int k, double inflation) {
    require(inflation >= 1.0, "surrogate_disturbance_terms: inflation must be >= 1");
    const MultiStepMatrices g = multi_step_from_model(est, Matrix(), k);
    return {std::sqrt(inflation) * g.Gw, inflation * est.R};
}

struct PredictorOptions {
    int horizon         = 20;
    Index burn_in       = 50;
    double inflation    = 1.2;
};

/**
 * Identifies predictors for k = 1..horizon given a surrogate model: steady
 * state filter, filter states over the trajectory, one GLS fit per k.
 */
inline std::vector<MultiStepPredictor> identify_predictors(const StateSpaceModel& est, const Trajectory& traj,
                                                           const GaussianBelief& init, const PredictorOptions& opt) {
    const InnovationForm inno = dare_steady_state(est);
    const FilterOutput fo     = filter(est, inno, traj, init);
    std::vector<MultiStepPredictor> out;
    out.reserve(static_cast<std::size_t>(opt.horizon));
    for (int k = 1; k <= opt.horizon; ++k) {
        const RegressorSet reg   = build_regressors(fo, traj, k, opt.burn_in);
        const MultiStepMatrices g = multi_step_from_model(est, inno.L, k);
        const GlsResult gls      = gls_identify(reg, build_noise_covariance(g, inno.S, reg.rows()));
        MultiStepPredictor msp;
        msp.k           = k;
        msp.nx          = est.nx();
        msp.nu          = est.nu();
        msp.ny          = est.ny();
        msp.theta_hat   = gls.theta_hat;
        msp.Sigma_theta = gls.Sigma_theta;
        std::tie(msp.G0_hat, msp.Gu_hat) = extract_matrices(gls.theta_hat, msp.ny, msp.nx);
        std::tie(msp.Gw_hat, msp.R_hat)  = surrogate_disturbance_terms(est, k, opt.inflation);
        out.push_back(std::move(msp));
    }
    return out;
}

/// Predictors equal to the model's exact G-matrices with zero parameter covariance.
inline std::vector<MultiStepPredictor> exact_predictors(const StateSpaceModel& m, int horizon) {
    std::vector<MultiStepPredictor> out;
    for (int k = 1; k <= horizon; ++k) {
        const MultiStepMatrices g = multi_step_from_model(m, Matrix(), k);
        MultiStepPredictor msp;
        msp.k           = k;
        msp.nx          = m.nx();
        msp.nu          = m.nu();
        msp.ny          = m.ny();
        msp.G0_hat      = g.G0;
        msp.Gu_hat      = g.Gu;
        msp.theta_hat   = vec_blocks(g.G0, g.Gu);
        msp.Sigma_theta = Matrix::Zero(msp.theta_hat.size(), msp.theta_hat.size());
        msp.Gw_hat      = g.Gw;
        msp.R_hat       = m.R;
        out.push_back(std::move(msp));
    }
    return out;
}

} // namespace smpc
