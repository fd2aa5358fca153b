#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace smpc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index  = Eigen::Index;

// Thrown for hard numerical failures (non-convergence, loss of definiteness,
// non-finite results). The CLI maps it to exit code 2.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Not enough (or not exciting enough) data to identify the requested quantity.
class InsufficientDataError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw std::invalid_argument(what);
}

inline Matrix symmetrize(const Matrix& M) { return 0.5 * (M + M.transpose()); }

inline bool all_finite(const Matrix& M) { return M.allFinite(); }

// Symmetric PSD square root via eigendecomposition; negative eigenvalues from
// round-off are clipped to zero.
inline Matrix psd_sqrt(const Matrix& M) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(M));
    Vector ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// Returns F with F * F^T == M for PSD M (F has as many columns as M has
// eigenvalues above `rel_tol * max eigenvalue`).
inline Matrix psd_factor(const Matrix& M, double rel_tol = 1e-14) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(M));
    const Vector& ev = es.eigenvalues();
    const double top = ev.size() > 0 ? ev.maxCoeff() : 0.0;
    if (top <= 0.0) return Matrix::Zero(M.rows(), 0);
    Index keep = 0;
    for (Index i = 0; i < ev.size(); ++i)
        if (ev(i) > rel_tol * top) ++keep;
    Matrix F(M.rows(), keep);
    Index c = 0;
    for (Index i = 0; i < ev.size(); ++i)
        if (ev(i) > rel_tol * top) F.col(c++) = es.eigenvectors().col(i) * std::sqrt(ev(i));
    return F;
}

inline double min_eigenvalue(const Matrix& M) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(M), Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

} // namespace smpc
