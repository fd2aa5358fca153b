#pragma once

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "msp_ident.hpp"
#include "rng.hpp"

namespace smpc {

/// Chi-squared quantile: 2 * P^{-1}(dof / 2, prob), P the regularized lower incomplete gamma.
inline double chi2_quantile(int dof, double prob) {
    require(dof >= 1, "chi2_quantile: dof must be >= 1");
    require(prob >= 0.0 && prob < 1.0, "chi2_quantile: probability must lie in [0, 1)");
    if (prob == 0.0) return 0.0;
    return 2.0 * boost::math::gamma_p_inv(0.5 * dof, prob);
}

/// One-sided Gaussian constant sqrt(chi2_1(2p - 1)) = Phi^{-1}(p), p in [0.5, 1).
inline double gaussian_constant(double p) {
    require(p >= 0.5 && p < 1.0, "gaussian_constant: p must lie in [0.5, 1)");
    return std::sqrt(chi2_quantile(1, 2.0 * p - 1.0));
}

/**
 * Risk split between the parameter set (delta) and the per-parameter chance
 * constraint (p_tilde = p / delta), plus the level epsilon that trades the
 * cone scale against the generalized chi-squared quantile.
 */
struct ChanceSpec {
    double p       = 0.9;
    double delta   = 0.95;
    double epsilon = 0.975;

    void validate() const {
        require(p > 0.0 && p < delta && delta < 1.0, "ChanceSpec: need 0 < p < delta < 1");
        require(epsilon > p_tilde() && epsilon < 1.0, "ChanceSpec: epsilon must lie in (p / delta, 1)");
        require(1.0 + delta - epsilon > 0.0 && 1.0 + delta - epsilon < 1.0, "ChanceSpec: 1 + delta - epsilon must lie in (0, 1)");
    }
    [[nodiscard]] double p_tilde() const { return p / delta; }
    [[nodiscard]] double quantile_level() const { return 1.0 + delta - epsilon; }
    [[nodiscard]] double c_p() const { return gaussian_constant(p); }
    [[nodiscard]] double c_epsilon() const { return gaussian_constant(epsilon); }
    [[nodiscard]] double c_p_tilde() const { return gaussian_constant(p_tilde()); }
    [[nodiscard]] double d_delta(Index n_theta) const { return std::sqrt(chi2_quantile(static_cast<int>(n_theta), delta)); }
};

/**
 * max theta^T M theta  s.t.  (theta - c)^T Sigma^{-1} (theta - c) <= radius^2.
 *
 * With theta = c + Sigma^{1/2} z the problem becomes a trust-region
 * maximization of z^T A z + 2 b^T z + const over the ball. A convex objective
 * attains its maximum on the boundary, where (mu I - A) z = b for a
 * multiplier mu >= lambda_max(A). mu is found from the secular equation
 * 1/||z(mu)|| = 1/radius; the hard case (b orthogonal to the top eigenspace)
 * sits at mu = lambda_max and is completed along the top eigenvector.
 */
inline double trust_region_max(const Matrix& M, const Vector& center, const Matrix& Sigma, double radius) {
    const Index n = center.size();
    require(M.rows() == n && M.cols() == n && Sigma.rows() == n && Sigma.cols() == n, "trust_region_max: size mismatch");
    require(radius >= 0.0, "trust_region_max: radius must be non-negative");
    const double mscale = std::max(1.0, M.cwiseAbs().maxCoeff());
    if (min_eigenvalue(M) < -1e-10 * mscale) throw std::invalid_argument("trust_region_max: M is not PSD");
    if (min_eigenvalue(Sigma) <= 0.0) throw std::invalid_argument("trust_region_max: Sigma is not PD");

    const Matrix S    = psd_sqrt(Sigma);
    const Matrix At   = symmetrize(S * M * S);
    const Vector b    = S * (M * center);
    const double base = center.dot(M * center);
    if (radius == 0.0) return base;

    Eigen::SelfAdjointEigenSolver<Matrix> es(At);
    const Vector& lam = es.eigenvalues(); // ascending
    const Vector beta = es.eigenvectors().transpose() * b;
    const double lmax = lam(n - 1);
    const double lam_tol = 1e-12 * std::max(1.0, std::abs(lmax));

    auto value_at = [&](const Vector& z) { return base + (lam.array() * z.array().square()).sum() + 2.0 * beta.dot(z); };

    // hard case check: no weight on the top eigenspace
    double top_weight = 0.0, rest_norm2_at_lmax = 0.0;
    for (Index i = 0; i < n; ++i) {
        if (lmax - lam(i) <= lam_tol) top_weight += beta(i) * beta(i);
        else rest_norm2_at_lmax += beta(i) * beta(i) / ((lmax - lam(i)) * (lmax - lam(i)));
    }
    const double bnorm = beta.norm();
    if (top_weight <= 1e-28 * std::max(1.0, bnorm * bnorm) && rest_norm2_at_lmax <= radius * radius) {
        Vector z = Vector::Zero(n);
        for (Index i = 0; i < n; ++i)
            if (lmax - lam(i) > lam_tol) z(i) = beta(i) / (lmax - lam(i));
        z(n - 1) = std::sqrt(std::max(0.0, radius * radius - rest_norm2_at_lmax));
        return value_at(z);
    }

    auto znorm = [&](double mu) {
        double s = 0.0;
        for (Index i = 0; i < n; ++i) s += beta(i) * beta(i) / ((mu - lam(i)) * (mu - lam(i)));
        return std::sqrt(s);
    };
    // ||z(mu)|| decreases on (lmax, inf); bracket the root of ||z|| = radius.
    double lo = lmax, hi = lmax + bnorm / radius;
    double mu = hi;
    for (int it = 0; it < 200; ++it) {
        // Newton on phi(mu) = 1/||z|| - 1/radius (nearly linear in mu)
        const double nz = znorm(mu);
        double d = 0.0;
        for (Index i = 0; i < n; ++i) d += beta(i) * beta(i) / std::pow(mu - lam(i), 3);
        const double phi  = 1.0 / nz - 1.0 / radius;
        const double dphi = d / (nz * nz * nz);
        if (phi > 0.0) hi = mu; else lo = mu;
        double next = mu - phi / dphi;
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        if (std::abs(next - mu) <= 1e-15 * std::max(1.0, std::abs(mu)) || hi - lo <= 1e-15 * std::max(1.0, std::abs(hi))) {
            mu = next;
            break;
        }
        mu = next;
    }
    Vector z(n);
    for (Index i = 0; i < n; ++i) z(i) = beta(i) / (mu - lam(i));
    z *= radius / z.norm(); // land exactly on the boundary
    return value_at(z);
}

/**
 * Empirical quantile of theta^T M theta for theta ~ N(mean, Sigma).
 * Samples are drawn in the range of M only (w = F^T theta with M = F F^T),
 * and the upper order statistic ceil(level * n) is returned.
 */
inline double quad_form_quantile(const Matrix& M, const Vector& mean, const Matrix& Sigma, double level,
                                 Index n_samples = 100000, std::uint64_t seed = 0) {
    require(level > 0.0 && level < 1.0, "quad_form_quantile: level must lie in (0, 1)");
    require(n_samples >= 1, "quad_form_quantile: need at least one sample");
    const Matrix F = psd_factor(M);
    const Index r  = F.cols();
    if (r == 0) return 0.0;
    const Vector wm = F.transpose() * mean;
    const Matrix Lw = psd_factor(F.transpose() * Sigma * F, 1e-15);
    const Index q   = Lw.cols();

    const CounterRng rng(seed, streams::quantile);
    std::vector<double> vals(static_cast<std::size_t>(n_samples));
    Vector xi(q), w(r);
    for (Index s = 0; s < n_samples; ++s) {
        w = wm;
        if (q > 0) {
            rng.normals(static_cast<std::uint64_t>(s * q), xi);
            w.noalias() += Lw * xi;
        }
        vals[static_cast<std::size_t>(s)] = w.squaredNorm();
    }
    const auto idx = static_cast<std::size_t>(
        std::clamp<Index>(static_cast<Index>(std::ceil(level * static_cast<double>(n_samples))) - 1, 0, n_samples - 1));
    std::nth_element(vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(idx), vals.end());
    return vals[idx];
}

/// Half-space h^T y <= 1 on the outputs.
struct HalfspaceConstraint {
    Vector h;

    HalfspaceConstraint() = default;
    explicit HalfspaceConstraint(Vector h_) : h(std::move(h_)) {
        require(h.size() > 0 && h.allFinite() && h.norm() > 0.0, "HalfspaceConstraint: h must be finite and nonzero");
    }
};

/**
 * offset + linear^T u + scale * ||cone_matrix u + cone_offset|| <= rhs,
 * with u the full stacked input sequence.
 */
struct SocRow {
    int k = 0;
    int j = 0;
    Vector linear;
    double offset = 0.0;
    double scale  = 0.0;
    Matrix cone_matrix; // zero rows for a purely linear row
    Vector cone_offset;
    double rhs = 0.0;

    bool rhs_nonpositive      = false;
    bool trivially_infeasible = false;

    // audit constants
    double d_kj = 0.0;
    double f    = 0.0;

    [[nodiscard]] double lhs(const Vector& u) const {
        double v = offset + linear.dot(u);
        if (cone_matrix.rows() > 0) v += scale * (cone_matrix * u + cone_offset).norm();
        return v;
    }
    [[nodiscard]] double violation(const Vector& u) const { return std::max(0.0, lhs(u) - rhs); }

    void finalize_flags() {
        rhs_nonpositive = !(rhs > 0.0);
        const bool depends_on_u = linear.cwiseAbs().maxCoeff() > 0.0 ||
                                  (cone_matrix.size() > 0 && cone_matrix.cwiseAbs().maxCoeff() > 0.0);
        const double fixed = offset + (cone_offset.size() > 0 ? scale * cone_offset.norm() : 0.0);
        trivially_infeasible = !std::isfinite(rhs) || (!depends_on_u && fixed > rhs);
    }
};

/// M_{k,j} = blkdiag(Sigma_x0, 0) (x) h h^T, sized for theta = vec([G0, Gu]).
inline Matrix initial_uncertainty_form(const Matrix& Sigma_x0, const Vector& h, Index n_theta) {
    const Index ny = h.size(), nx = Sigma_x0.rows();
    Matrix M = Matrix::Zero(n_theta, n_theta);
    const Matrix hh = h * h.transpose();
    for (Index a = 0; a < nx; ++a)
        for (Index b = 0; b < nx; ++b) M.block(a * ny, b * ny, ny, ny) = Sigma_x0(a, b) * hh;
    return M;
}

/// Sigma_h = K_h^T Sigma_theta K_h with K_h = I (x) h, so that
/// ||Sigma_theta^{1/2} (z (x) h)|| = ||Sigma_h^{1/2} z||.
inline Matrix projected_parameter_cov(const Matrix& Sigma_theta, const Vector& h) {
    const Index ny = h.size(), nz = Sigma_theta.rows() / ny;
    Matrix out(nz, nz);
    for (Index a = 0; a < nz; ++a)
        for (Index b = 0; b < nz; ++b) out(a, b) = h.dot(Sigma_theta.block(a * ny, b * ny, ny, ny) * h);
    return symmetrize(out);
}

inline Matrix kronecker_selector(Index nz, const Vector& h) {
    const Index ny = h.size();
    Matrix K = Matrix::Zero(nz * ny, nz);
    for (Index a = 0; a < nz; ++a) K.block(a * ny, a, ny, 1) = h;
    return K;
}

struct RowOptions {
    Index n_vars = 0;          // total decision length N * n_u
    Index n_samples = 100000;  // generalized chi-squared sampling
    std::uint64_t seed = 0;
};

namespace detail {

// Shared linear part and cone geometry; scale/rhs are filled by the caller.
inline SocRow skeleton_row(const MultiStepPredictor& msp, const HalfspaceConstraint& hc, const GaussianBelief& init,
                           Index n_vars) {
    const Index nx = msp.nx, nu = msp.nu, k = msp.k;
    require(init.mean.size() == nx, "build_rows: initial belief dimension mismatch");
    require(hc.h.size() == msp.ny, "build_rows: constraint dimension mismatch");
    require(n_vars >= k * nu, "build_rows: decision vector shorter than the horizon");
    const Vector& h = hc.h;
    SocRow row;
    row.k      = static_cast<int>(k);
    row.offset = h.dot(msp.G0_hat * init.mean);
    row.linear = Vector::Zero(n_vars);
    row.linear.head(k * nu) = msp.Gu_hat.transpose() * h;

    const Matrix Sh = projected_parameter_cov(msp.Sigma_theta, h);
    const Matrix Ft = psd_factor(Sh).transpose(); // r x n_z
    row.cone_matrix = Matrix::Zero(Ft.rows(), n_vars);
    row.cone_matrix.leftCols(k * nu) = Ft.rightCols(k * nu);
    row.cone_offset = Ft.leftCols(nx) * init.mean;
    row.d_kj = h.dot((msp.Gw_hat * msp.Gw_hat.transpose() + msp.R_hat) * h);
    return row;
}

} // namespace detail

/// Proposed tightening: cone scale c_eps, generalized chi-squared quantile f_eps.
inline SocRow build_rows_proposed(const MultiStepPredictor& msp, const HalfspaceConstraint& hc,
                                  const GaussianBelief& init, const ChanceSpec& spec, const RowOptions& opt) {
    spec.validate();
    SocRow row = detail::skeleton_row(msp, hc, init, opt.n_vars);
    const Matrix M = initial_uncertainty_form(init.cov, hc.h, msp.n_theta());
    row.f     = quad_form_quantile(M, msp.theta_hat, msp.Sigma_theta, spec.quantile_level(), opt.n_samples, opt.seed);
    row.scale = spec.c_epsilon();
    row.rhs   = 1.0 - spec.c_p_tilde() * std::sqrt(row.f + row.d_kj);
    row.finalize_flags();
    return row;
}

/// Confidence-ellipsoid tightening: cone scale d_delta, trust-region maximum f.
inline SocRow build_rows_ellipsoidal(const MultiStepPredictor& msp, const HalfspaceConstraint& hc,
                                     const GaussianBelief& init, const ChanceSpec& spec, const RowOptions& opt) {
    spec.validate();
    SocRow row = detail::skeleton_row(msp, hc, init, opt.n_vars);
    const double radius = spec.d_delta(msp.n_theta());
    const Matrix M      = initial_uncertainty_form(init.cov, hc.h, msp.n_theta());
    if (min_eigenvalue(msp.Sigma_theta) > 0.0) {
        row.f = trust_region_max(M, msp.theta_hat, msp.Sigma_theta, radius);
    } else {
        // degenerate (known) parameters: the ellipsoid collapses to its center
        row.f = msp.theta_hat.dot(M * msp.theta_hat);
    }
    row.scale = radius;
    row.rhs   = 1.0 - spec.c_p_tilde() * std::sqrt(row.f + row.d_kj);
    row.finalize_flags();
    return row;
}

/**
 * Nominal tightening with known G-matrices: h^T y_bar_k <= 1 - c_p ||h||_{Sigma_y,k},
 * Sigma_y,k = G0 Sigma_x0 G0^T + Gw Gw^T + R.
 */
inline SocRow build_rows_nominal(const MultiStepPredictor& exact, const HalfspaceConstraint& hc,
                                 const GaussianBelief& init, const ChanceSpec& spec, Index n_vars) {
    SocRow row = detail::skeleton_row(exact, hc, init, n_vars);
    row.cone_matrix.resize(0, n_vars);
    row.cone_offset.resize(0);
    const Vector& h = hc.h;
    row.f     = h.dot(exact.G0_hat * init.cov * exact.G0_hat.transpose() * h);
    row.scale = 0.0;
    row.rhs   = 1.0 - spec.c_p() * std::sqrt(row.f + row.d_kj);
    row.finalize_flags();
    return row;
}

} // namespace smpc
