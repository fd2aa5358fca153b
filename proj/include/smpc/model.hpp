#pragma once

#include <unsupported/Eigen/MatrixFunctions>

#include <cstdint>
#include <vector>

#include "rng.hpp"
#include "types.hpp"

namespace smpc {

/**
 * Linear-Gaussian system
 *
 *   x_{t+1} = A x_t + B u_t + E w_t,   w_t ~ N(0, I)
 *   y_t     = C x_t + v_t,             v_t ~ N(0, R)
 *
 * Used both for the ground truth and for identified surrogates. Dimensions are
 * validated on construction; R must be symmetric positive definite unless
 * `allow_singular_noise` is set (noise-free simulations).
 */
struct StateSpaceModel {
    Matrix A, B, C, E, R;

    StateSpaceModel() = default;
    StateSpaceModel(Matrix A_, Matrix B_, Matrix C_, Matrix E_, Matrix R_, bool allow_singular_noise = false)
        : A(std::move(A_)), B(std::move(B_)), C(std::move(C_)), E(std::move(E_)), R(symmetrize(R_)) {
        validate(allow_singular_noise);
    }

    [[nodiscard]] Index nx() const { return A.rows(); }
    [[nodiscard]] Index nu() const { return B.cols(); }
    [[nodiscard]] Index ny() const { return C.rows(); }
    [[nodiscard]] Index nw() const { return E.cols(); }

    void validate(bool allow_singular_noise = false) const {
        require(A.rows() == A.cols() && A.rows() > 0, "StateSpaceModel: A must be square and non-empty");
        require(B.rows() == A.rows(), "StateSpaceModel: B row count must equal n_x");
        require(C.cols() == A.rows() && C.rows() > 0, "StateSpaceModel: C column count must equal n_x");
        require(E.rows() == A.rows(), "StateSpaceModel: E row count must equal n_x");
        require(R.rows() == C.rows() && R.cols() == C.rows(), "StateSpaceModel: R must be n_y x n_y");
        require(A.allFinite() && B.allFinite() && C.allFinite() && E.allFinite() && R.allFinite(),
                "StateSpaceModel: non-finite entries");
        if (!allow_singular_noise)
            require(min_eigenvalue(R) > 0.0, "StateSpaceModel: R must be positive definite");
    }

    // Rank of the n_x-step observability matrix; < n_x means (A, C) is not
    // observable (callers treat this as a warning, detectability is weaker).
    [[nodiscard]] Index observability_rank() const {
        const Index n = nx();
        Matrix O(ny() * n, n);
        Matrix CAi = C;
        for (Index i = 0; i < n; ++i) {
            O.middleRows(i * ny(), ny()) = CAi;
            CAi = CAi * A;
        }
        Eigen::JacobiSVD<Matrix> svd(O);
        const Vector& s = svd.singularValues();
        const double tol = std::max(1.0, s(0)) * 1e-10 * static_cast<double>(O.rows());
        return (s.array() > tol).count();
    }

    // C A^i B
    [[nodiscard]] Matrix markov(int i) const {
        Matrix M = B;
        for (int j = 0; j < i; ++j) M = A * M;
        return C * M;
    }
};

// Stacks the first `count` Markov parameters [CB, CAB, ...] side by side.
inline Matrix markov_sequence(const StateSpaceModel& m, int count) {
    Matrix out(m.ny(), m.nu() * count);
    Matrix AiB = m.B;
    for (int i = 0; i < count; ++i) {
        out.middleCols(i * m.nu(), m.nu()) = m.C * AiB;
        AiB = m.A * AiB;
    }
    return out;
}

/// Input-output record: U holds u_0..u_{T-1} as columns, Y holds y_1..y_T.
struct Trajectory {
    Matrix U;
    Matrix Y;

    [[nodiscard]] Index length() const { return U.cols(); }
    [[nodiscard]] auto u(Index t) const { return U.col(t); }
    // y_t for t in [1, T]
    [[nodiscard]] auto y(Index t) const { return Y.col(t - 1); }
};

struct GaussianBelief {
    Vector mean;
    Matrix cov;

    GaussianBelief() = default;
    GaussianBelief(Vector m, const Matrix& P) : mean(std::move(m)), cov(symmetrize(P)) {
        require(cov.rows() == mean.size() && cov.cols() == mean.size(), "GaussianBelief: dimension mismatch");
        require(cov.size() == 0 || min_eigenvalue(cov) >= -1e-10, "GaussianBelief: covariance is not PSD");
    }
};

/**
 * k-step output map
 *
 *   y_{t+k} = G0 x + Gu u_{[t, t+k-1]} + Gw w_{[t, t+k-1]} + v_{t+k}
 *
 * and its innovation-form counterpart, with Ge acting on the window
 * e_{[t, t+k]} (k + 1 blocks, the first one always zero because the filter
 * state x_{t|t} already absorbed e_t).
 */
struct MultiStepMatrices {
    int k = 0;
    Matrix G0, Gu, Gw, Ge;
};

/**
 * Builds the G-matrices for horizon k.
 *
 * Filter timing: x_{t+1|t+1} = A x_{t|t} + B u_t + L e_{t+1}, which gives
 * Ge = [0, C A^{k-1} L, ..., C A L, I].
 */
inline MultiStepMatrices multi_step_from_model(const StateSpaceModel& m, const Matrix& L, int k) {
    require(k >= 1, "multi_step_from_model: horizon k must be >= 1");
    const Index ny = m.ny(), nu = m.nu(), nw = m.nw();
    const bool have_gain = L.size() > 0;
    if (have_gain) require(L.rows() == m.nx() && L.cols() == ny, "multi_step_from_model: L must be n_x x n_y");

    MultiStepMatrices g;
    g.k = k;
    g.Gu.resize(ny, k * nu);
    g.Gw.resize(ny, k * nw);
    g.Ge = Matrix::Zero(ny, (k + 1) * ny);

    // CA^p for p = 0..k
    Matrix CAp = m.C;
    for (int p = 0; p < k; ++p) {
        // block index for u_{t+i} carries C A^{k-1-i}; p = k-1-i
        const int i = k - 1 - p;
        g.Gu.middleCols(i * nu, nu) = CAp * m.B;
        g.Gw.middleCols(i * nw, nw) = CAp * m.E;
        // e_{t+j} carries C A^{k-j} L for j = 1..k-1, i.e. p = k - j >= 1
        if (have_gain && p >= 1) g.Ge.middleCols((k - p) * ny, ny) = CAp * L;
        CAp = CAp * m.A;
    }
    g.G0 = CAp;
    g.Ge.rightCols(ny).setIdentity();
    return g;
}

/**
 * Three-mass (or n-mass) chain fixed to a wall at the first mass, actuated at
 * the last one. State ordering is positions then velocities, outputs are the
 * positions. Exact zero-order-hold discretization through the exponential of
 * the augmented [[Ac, Bc], [0, 0]] block.
 */
inline StateSpaceModel build_msd_chain(int n_masses, double mass, double spring, double damping, double dt,
                                       const Vector& dist_cov_diag, double meas_cov_scale) {
    require(n_masses >= 1, "build_msd_chain: need at least one mass");
    require(mass > 0 && spring > 0 && damping > 0 && dt > 0 && meas_cov_scale > 0,
            "build_msd_chain: physical parameters must be positive");
    const Index n = n_masses, nx = 2 * n;
    require(dist_cov_diag.size() == nx, "build_msd_chain: disturbance covariance diagonal must have 2n entries");
    require((dist_cov_diag.array() >= 0).all(), "build_msd_chain: disturbance variances must be non-negative");

    Matrix K = Matrix::Zero(n, n);
    for (Index i = 0; i < n; ++i) {
        K(i, i) += 1.0;  // link to the left neighbour (or wall)
        if (i + 1 < n) { // link to the right neighbour
            K(i, i) += 1.0;
            K(i, i + 1) -= 1.0;
            K(i + 1, i) -= 1.0;
        }
    }

    Matrix Ac = Matrix::Zero(nx, nx);
    Ac.topRightCorner(n, n).setIdentity();
    Ac.bottomLeftCorner(n, n)  = -(spring / mass) * K;
    Ac.bottomRightCorner(n, n) = -(damping / mass) * K;
    Matrix Bc = Matrix::Zero(nx, 1);
    Bc(nx - 1, 0) = 1.0 / mass;

    Matrix aug = Matrix::Zero(nx + 1, nx + 1);
    aug.topLeftCorner(nx, nx) = Ac * dt;
    aug.topRightCorner(nx, 1) = Bc * dt;
    const Matrix Phi = aug.exp();
    if (!Phi.allFinite()) throw NumericalError("build_msd_chain: matrix exponential is not finite");

    Matrix C = Matrix::Zero(n, nx);
    C.leftCols(n).setIdentity();
    Matrix E = dist_cov_diag.cwiseSqrt().asDiagonal();
    return {Phi.topLeftCorner(nx, nx), Phi.topRightCorner(nx, 1), C, E, meas_cov_scale * Matrix::Identity(n, n)};
}

// Continuous-time state matrix of the same chain, used by discretization checks.
inline Matrix msd_chain_continuous_A(int n_masses, double mass, double spring, double damping) {
    const Index n = n_masses;
    Matrix K = Matrix::Zero(n, n);
    for (Index i = 0; i < n; ++i) {
        K(i, i) += 1.0;
        if (i + 1 < n) {
            K(i, i) += 1.0;
            K(i, i + 1) -= 1.0;
            K(i + 1, i) -= 1.0;
        }
    }
    Matrix Ac = Matrix::Zero(2 * n, 2 * n);
    Ac.topRightCorner(n, n).setIdentity();
    Ac.bottomLeftCorner(n, n)  = -(spring / mass) * K;
    Ac.bottomRightCorner(n, n) = -(damping / mass) * K;
    return Ac;
}

struct NormalForm {
    StateSpaceModel model;
    Matrix T; // x_new = T x_old
};

inline StateSpaceModel transform_model(const StateSpaceModel& m, const Matrix& T) {
    const Matrix Tinv = T.inverse();
    StateSpaceModel out;
    out.A = T * m.A * Tinv;
    out.B = T * m.B;
    out.C = m.C * Tinv;
    out.E = T * m.E;
    out.R = m.R;
    return out;
}

/**
 * Similarity transform to C' = [I, 0]. The leading coordinates become the
 * noise-free outputs; the rest are an orthonormal basis of the complement of
 * the row space of C, picked by Gram-Schmidt over the projected unit vectors
 * so that a model already in this form maps to T = I.
 */
inline NormalForm to_output_normal_form(const StateSpaceModel& m) {
    const Index nx = m.nx(), ny = m.ny();
    Eigen::FullPivLU<Matrix> lu(m.C);
    if (lu.rank() < ny) throw std::invalid_argument("to_output_normal_form: C must have full row rank");

    const Matrix P = Matrix::Identity(nx, nx) - m.C.transpose() * (m.C * m.C.transpose()).ldlt().solve(m.C);
    Matrix N(nx - ny, nx);
    Index found = 0;
    for (Index i = 0; i < nx && found < nx - ny; ++i) {
        Vector v = P.col(i);
        for (Index j = 0; j < found; ++j) v -= N.row(j).dot(v) * N.row(j).transpose();
        const double nv = v.norm();
        if (nv > 1e-8) N.row(found++) = (v / nv).transpose();
    }
    if (found != nx - ny) throw NumericalError("to_output_normal_form: failed to complete the basis");

    Matrix T(nx, nx);
    T.topRows(ny)         = m.C;
    T.bottomRows(nx - ny) = N;
    StateSpaceModel out = transform_model(m, T);
    out.C.leftCols(ny).setIdentity(); // exact by construction, remove round-off
    out.C.rightCols(nx - ny).setZero();
    return {out, T};
}

/**
 * Iterates the system from x0. Noise draws are keyed by (seed, stream, t), so
 * the same seed always reproduces the same trajectory bit for bit.
 * `inputs` holds u_0..u_{T-1} as columns.
 */
inline Trajectory simulate(const StateSpaceModel& m, const Vector& x0, const Matrix& inputs, std::uint64_t seed) {
    require(inputs.cols() >= 1, "simulate: need at least one input");
    require(inputs.rows() == m.nu() && x0.size() == m.nx(), "simulate: dimension mismatch");
    const Index T = inputs.cols(), nw = m.nw(), ny = m.ny();
    const CounterRng wrng(seed, streams::process_noise), vrng(seed, streams::measurement_noise);
    const Matrix Rsqrt = psd_sqrt(m.R);

    Trajectory traj{inputs, Matrix(ny, T)};
    Vector x = x0, w(nw), v(ny);
    for (Index t = 0; t < T; ++t) {
        wrng.normals(static_cast<std::uint64_t>(t * nw), w);
        x = m.A * x + m.B * inputs.col(t) + m.E * w;
        vrng.normals(static_cast<std::uint64_t>(t * ny), v);
        traj.Y.col(t) = m.C * x + Rsqrt * v;
    }
    return traj;
}

// Gaussian excitation u_t ~ N(0, std^2 I).
inline Matrix excitation_inputs(Index nu, Index T, double stddev, std::uint64_t seed) {
    const CounterRng rng(seed, streams::excitation);
    Matrix U(nu, T);
    for (Index t = 0; t < T; ++t)
        for (Index i = 0; i < nu; ++i) U(i, t) = stddev * rng.normal(static_cast<std::uint64_t>(t * nu + i));
    return U;
}

} // namespace smpc
