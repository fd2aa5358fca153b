#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "tightening.hpp"

namespace smpc {

struct LinearRow {
    Vector a;
    double b = 0.0; // a^T u <= b
};

/**
 * min 1/2 u^T H u + g^T u + c0
 * s.t. linear rows a^T u <= b and second-order-cone rows (see SocRow).
 */
struct ConicProgram {
    Index n_vars = 0;
    Matrix H;
    Vector g;
    double c0 = 0.0;
    std::vector<LinearRow> lin_rows;
    std::vector<SocRow> soc_rows;

    [[nodiscard]] double objective(const Vector& u) const { return 0.5 * u.dot(H * u) + g.dot(u) + c0; }

    // Largest violation of any row at u (0 when feasible).
    [[nodiscard]] double max_violation(const Vector& u) const {
        double v = 0.0;
        for (const auto& r : lin_rows) v = std::max(v, r.a.dot(u) - r.b);
        for (const auto& r : soc_rows) v = std::max(v, r.violation(u));
        return v;
    }

    void validate() const {
        require(H.rows() == n_vars && H.cols() == n_vars && g.size() == n_vars, "ConicProgram: objective size mismatch");
        require(min_eigenvalue(H) >= -1e-9 * std::max(1.0, H.cwiseAbs().maxCoeff()), "ConicProgram: H must be PSD");
        for (const auto& r : lin_rows) require(r.a.size() == n_vars, "ConicProgram: linear row size mismatch");
        for (const auto& r : soc_rows)
            require(r.linear.size() == n_vars && r.cone_matrix.cols() == n_vars &&
                        r.cone_offset.size() == r.cone_matrix.rows(),
                    "ConicProgram: cone row size mismatch");
    }
};

enum class SolveStatus { Optimal, PrimalInfeasible, DualInfeasible, MaxIterations, NumericalFailure };

inline std::string to_string(SolveStatus s) {
    switch (s) {
    case SolveStatus::Optimal: return "optimal";
    case SolveStatus::PrimalInfeasible: return "primal_infeasible";
    case SolveStatus::DualInfeasible: return "dual_infeasible";
    case SolveStatus::MaxIterations: return "max_iterations";
    case SolveStatus::NumericalFailure: return "numerical_failure";
    }
    return "unknown";
}

struct KktResiduals {
    double primal = 0.0;
    double dual   = 0.0;
    double gap    = 0.0;
};

struct Solution {
    SolveStatus status = SolveStatus::NumericalFailure;
    Vector u_star;
    double objective      = std::numeric_limits<double>::quiet_NaN();
    double dual_objective = std::numeric_limits<double>::quiet_NaN();
    KktResiduals kkt;
    double certificate_residual = std::numeric_limits<double>::quiet_NaN(); // infeasibility certificates only
    int iterations   = 0;
    double wall_time = 0.0;
};

struct SolverOptions {
    double tol   = 1e-8;
    int max_iter = 100;
    bool verbose = false; // per-iteration trace on stderr
};

namespace conic {

// Standard form: min c^T x  s.t.  G x + s = h,  s in K = R_+^l x Q^{q_1} x ... x Q^{q_m}.
struct StandardForm {
    Matrix G;
    Vector h, c;
    Index l = 0;
    std::vector<Index> soc_dims;
};

inline StandardForm to_standard_form(const ConicProgram& p) {
    const Index n = p.n_vars;
    const Matrix Wt = psd_factor(p.H).transpose(); // H = Wt^T Wt
    const bool quadratic = Wt.rows() > 0;
    const Index nxs = n + (quadratic ? 1 : 0);

    std::vector<LinearRow> lin = p.lin_rows;
    std::vector<const SocRow*> cones;
    for (const auto& r : p.soc_rows) {
        if (r.cone_matrix.rows() == 0 || r.scale == 0.0) {
            // the norm term is a constant; fold it into the bound
            const double fixed = r.cone_offset.size() > 0 ? r.scale * r.cone_offset.norm() : 0.0;
            lin.push_back({r.linear, r.rhs - r.offset - fixed});
        } else {
            cones.push_back(&r);
        }
    }

    StandardForm sf;
    sf.l = static_cast<Index>(lin.size());
    Index m = sf.l;
    if (quadratic) {
        sf.soc_dims.push_back(Wt.rows() + 2);
        m += Wt.rows() + 2;
    }
    for (const auto* r : cones) {
        sf.soc_dims.push_back(r->cone_matrix.rows() + 1);
        m += r->cone_matrix.rows() + 1;
    }
    sf.G = Matrix::Zero(m, nxs);
    sf.h = Vector::Zero(m);
    sf.c = Vector::Zero(nxs);
    sf.c.head(n) = p.g;

    Index row = 0;
    for (const auto& r : lin) {
        sf.G.row(row).head(n) = r.a.transpose();
        sf.h(row++)           = r.b;
    }
    if (quadratic) {
        // 1/2 ||Wt u||^2 <= t  <=>  ||(Wt u, (t - 1)/sqrt2)|| <= (t + 1)/sqrt2
        const double s2 = std::sqrt(0.5);
        sf.c(n)          = 1.0;
        sf.G(row, n)     = -s2;
        sf.h(row++)      = s2;
        sf.G(row, n)     = -s2;
        sf.h(row++)      = -s2;
        sf.G.block(row, 0, Wt.rows(), n) = -Wt;
        row += Wt.rows();
    }
    for (const auto* r : cones) {
        sf.G.row(row).head(n) = r->linear.transpose();
        sf.h(row++)           = r->rhs - r->offset;
        const Index d         = r->cone_matrix.rows();
        sf.G.block(row, 0, d, n) = -r->scale * r->cone_matrix;
        sf.h.segment(row, d)     = r->scale * r->cone_offset;
        row += d;
    }
    return sf;
}

// Cone algebra over the product cone. Blocks are addressed by offset.
struct ConeLayout {
    Index l = 0;
    std::vector<Index> dims, offsets;
    Index m = 0;

    explicit ConeLayout(const StandardForm& sf) : l(sf.l), dims(sf.soc_dims) {
        Index off = l;
        for (Index d : dims) {
            offsets.push_back(off);
            off += d;
        }
        m = off;
    }
    [[nodiscard]] Index degree() const { return l + static_cast<Index>(dims.size()); }

    [[nodiscard]] Vector identity() const {
        Vector e = Vector::Zero(m);
        e.head(l).setOnes();
        for (Index off : offsets) e(off) = 1.0;
        return e;
    }

    // Jordan product
    [[nodiscard]] Vector prod(const Vector& a, const Vector& b) const {
        Vector r(m);
        r.head(l) = a.head(l).cwiseProduct(b.head(l));
        for (std::size_t i = 0; i < dims.size(); ++i) {
            const Index o = offsets[i], d = dims[i];
            r(o) = a.segment(o, d).dot(b.segment(o, d));
            r.segment(o + 1, d - 1) = a(o) * b.segment(o + 1, d - 1) + b(o) * a.segment(o + 1, d - 1);
        }
        return r;
    }

    // Solves lam o u = v for u.
    [[nodiscard]] Vector div(const Vector& lam, const Vector& v) const {
        Vector u(m);
        u.head(l) = v.head(l).cwiseQuotient(lam.head(l));
        for (std::size_t i = 0; i < dims.size(); ++i) {
            const Index o = offsets[i], d = dims[i];
            const auto l1   = lam.segment(o + 1, d - 1);
            const auto v1   = v.segment(o + 1, d - 1);
            const double det = lam(o) * lam(o) - l1.squaredNorm();
            u(o) = (lam(o) * v(o) - l1.dot(v1)) / det;
            u.segment(o + 1, d - 1) = (v1 - u(o) * l1) / lam(o);
        }
        return u;
    }

    // inf { t : x + t e in K }; negative when x is interior.
    [[nodiscard]] double max_shift(const Vector& x) const {
        double t = -std::numeric_limits<double>::infinity();
        if (l > 0) t = std::max(t, -x.head(l).minCoeff());
        for (std::size_t i = 0; i < dims.size(); ++i) {
            const Index o = offsets[i], d = dims[i];
            t = std::max(t, x.segment(o + 1, d - 1).norm() - x(o));
        }
        return t;
    }

    // sup { a >= 0 : x + a d in K } for interior x.
    [[nodiscard]] double max_step(const Vector& x, const Vector& dx) const {
        double a = std::numeric_limits<double>::infinity();
        for (Index i = 0; i < l; ++i)
            if (dx(i) < 0.0) a = std::min(a, -x(i) / dx(i));
        for (std::size_t i = 0; i < dims.size(); ++i) {
            const Index o = offsets[i], d = dims[i];
            const auto x1 = x.segment(o + 1, d - 1);
            const auto d1 = dx.segment(o + 1, d - 1);
            const double qa = dx(o) * dx(o) - d1.squaredNorm();
            const double qb = x(o) * dx(o) - x1.dot(d1);
            const double qc = std::max(x(o) * x(o) - x1.squaredNorm(), 0.0);
            // first positive root of qa a^2 + 2 qb a + qc
            double root = std::numeric_limits<double>::infinity();
            if (std::abs(qa) <= 1e-300) {
                if (qb < 0.0) root = -qc / (2.0 * qb);
            } else {
                const double disc = qb * qb - qa * qc;
                if (disc >= 0.0) {
                    const double sq = std::sqrt(disc);
                    const double q  = -(qb + std::copysign(sq, qb));
                    for (double r : {q / qa, q != 0.0 ? qc / q : std::numeric_limits<double>::infinity()})
                        if (r > 0.0) root = std::min(root, r);
                }
            }
            // with dx(o) < 0 and no root the ray still leaves through x0 = 0
            if (!std::isfinite(root) && dx(o) < 0.0) root = -x(o) / dx(o);
            a = std::min(a, root);
        }
        return a;
    }
};

// Nesterov-Todd scaling: W z = W^{-1} s = lambda, W symmetric.
struct NtScaling {
    const ConeLayout* cones = nullptr;
    Vector w_lp;               // sqrt(s / z)
    std::vector<double> beta;  // per cone
    std::vector<Vector> v;     // W_bar = 2 v v^T - J, v^T J v = 1

    NtScaling(const ConeLayout& K, const Vector& s, const Vector& z) : cones(&K) {
        w_lp = (s.head(K.l).array() / z.head(K.l).array()).sqrt();
        for (std::size_t i = 0; i < K.dims.size(); ++i) {
            const Index o = K.offsets[i], d = K.dims[i];
            const Vector si = s.segment(o, d), zi = z.segment(o, d);
            const double s1 = si.tail(d - 1).norm(), z1 = zi.tail(d - 1).norm();
            const double sn = std::sqrt(std::max((si(0) - s1) * (si(0) + s1), 1e-300));
            const double zn = std::sqrt(std::max((zi(0) - z1) * (zi(0) + z1), 1e-300));
            const Vector sb = si / sn, zb = zi / zn;
            const double gamma = std::sqrt(std::max((1.0 + sb.dot(zb)) / 2.0, 1e-300));
            Vector wb(d);
            wb(0)            = (sb(0) + zb(0)) / (2.0 * gamma);
            wb.tail(d - 1)   = (sb.tail(d - 1) - zb.tail(d - 1)) / (2.0 * gamma);
            Vector vi(d);
            const double den = std::sqrt(2.0 * (wb(0) + 1.0));
            vi(0)            = (wb(0) + 1.0) / den;
            vi.tail(d - 1)   = wb.tail(d - 1) / den;
            beta.push_back(std::sqrt(sn / zn));
            v.push_back(std::move(vi));
        }
    }

    // W x
    [[nodiscard]] Vector apply(const Vector& x) const {
        const ConeLayout& K = *cones;
        Vector r(K.m);
        r.head(K.l) = w_lp.cwiseProduct(x.head(K.l));
        for (std::size_t i = 0; i < K.dims.size(); ++i) {
            const Index o = K.offsets[i], d = K.dims[i];
            const auto xi = x.segment(o, d);
            const double vx = v[i].dot(xi);
            r.segment(o, d) = beta[i] * (2.0 * vx * v[i] - jmul(xi));
        }
        return r;
    }

    // W^{-1} X, column-wise
    [[nodiscard]] Matrix apply_inv(const Matrix& X) const {
        const ConeLayout& K = *cones;
        Matrix R(X.rows(), X.cols());
        R.topRows(K.l) = w_lp.cwiseInverse().asDiagonal() * X.topRows(K.l);
        for (std::size_t i = 0; i < K.dims.size(); ++i) {
            const Index o = K.offsets[i], d = K.dims[i];
            Vector jv = v[i];
            jv.tail(d - 1) *= -1.0;
            const auto Xi = X.middleRows(o, d);
            Matrix JX     = Xi;
            JX.bottomRows(d - 1) *= -1.0;
            R.middleRows(o, d) = (2.0 * jv * (jv.transpose() * Xi) - JX) / beta[i];
        }
        return R;
    }

private:
    template <class V>
    static Vector jmul(const V& x) {
        Vector r = x;
        r.tail(r.size() - 1) *= -1.0;
        return r;
    }
};

} // namespace conic

/**
 * Primal-dual interior-point method on the homogeneous self-dual embedding
 *
 *   G^T z + c tau = 0,   G x + s = h tau,   c^T x + h^T z + kappa = 0,
 *
 * with Nesterov-Todd scaling and Mehrotra predictor-corrector steps. The
 * quadratic objective enters through an epigraph variable and a rotated
 * cone. Infeasibility is read off the embedding: tau -> 0 with h^T z < 0.
 */
inline Solution solve(const ConicProgram& prog, const SolverOptions& opt = {}) {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    prog.validate();

    if (prog.lin_rows.empty() && prog.soc_rows.empty()) {
        // no rows: one Newton step, unbounded when g is outside range(H)
        Solution sol;
        const Vector u = prog.H.completeOrthogonalDecomposition().solve(-prog.g);
        const bool ok  = (prog.H * u + prog.g).norm() <= 1e-10 * std::max(1.0, prog.g.norm()) && u.allFinite();
        sol.status     = ok ? SolveStatus::Optimal : SolveStatus::DualInfeasible;
        sol.u_star     = ok ? u : Vector(Vector::Zero(prog.n_vars));
        sol.objective  = prog.objective(sol.u_star);
        if (ok) sol.dual_objective = sol.objective;
        sol.kkt       = {0.0, ok ? 0.0 : (prog.H * sol.u_star + prog.g).norm(), 0.0};
        sol.wall_time = std::chrono::duration<double>(clock::now() - t0).count();
        return sol;
    }

    const conic::StandardForm sf = conic::to_standard_form(prog);
    const conic::ConeLayout K(sf);
    const Matrix& G = sf.G;
    const Vector& h = sf.h;
    const Vector& c = sf.c;
    const Index nx = G.cols(), m = K.m;
    const double deg = static_cast<double>(K.degree());
    const double resx0 = std::max(1.0, c.norm()), resz0 = std::max(1.0, h.norm());

    Solution sol;
    Vector best_u = Vector::Zero(prog.n_vars);
    auto finish = [&](SolveStatus st) {
        sol.status    = st;
        if (sol.u_star.size() != prog.n_vars) {
            sol.u_star    = best_u;
            sol.objective = prog.objective(best_u);
        }
        sol.wall_time = std::chrono::duration<double>(clock::now() - t0).count();
        return sol;
    };

    // reduced KKT solve through a QR factor of G_s = W^-1 G, so the normal
    // matrix G_s^T G_s = R^T R is never formed explicitly
    struct Factor {
        Eigen::HouseholderQR<Matrix> qr;
        Matrix R;
        bool ok = false;
        [[nodiscard]] Vector normal_solve(const Vector& r) const {
            const Vector y = R.transpose().triangularView<Eigen::Lower>().solve(r);
            return R.triangularView<Eigen::Upper>().solve(y);
        }
    };
    auto factor = [&](const Matrix& Gs) {
        Factor f;
        f.qr = Eigen::HouseholderQR<Matrix>(Gs);
        f.R  = f.qr.matrixQR().topRows(Gs.cols()).triangularView<Eigen::Upper>();
        const Vector d = f.R.diagonal().cwiseAbs();
        f.ok = Gs.allFinite() && d.size() > 0 && d.minCoeff() > 1e-14 * std::max(1.0, d.maxCoeff());
        return f;
    };
    if (m == 0) {
        // unconstrained linear objective
        if (c.norm() > 0.0) return finish(SolveStatus::DualInfeasible);
        sol.u_star   = Vector::Zero(prog.n_vars);
        sol.objective = sol.dual_objective = prog.objective(sol.u_star);
        return finish(SolveStatus::Optimal);
    }

    // initial point: x = argmin ||G x - h||, s = h - G x; z = argmin ||z|| s.t. G^T z + c = 0
    Vector x, s, z;
    {
        const Factor f0 = factor(G);
        if (!f0.ok) return finish(SolveStatus::NumericalFailure);
        x = f0.normal_solve(G.transpose() * h);
        s = h - G * x;
        z = -G * f0.normal_solve(c);
        const Vector e = K.identity();
        const double ts = K.max_shift(s), tz = K.max_shift(z);
        if (ts >= -1e-8 * std::max(1.0, s.norm())) s += (1.0 + ts) * e;
        if (tz >= -1e-8 * std::max(1.0, z.norm())) z += (1.0 + tz) * e;
    }
    double tau = 1.0, kappa = 1.0;

    for (int iter = 0; iter <= opt.max_iter; ++iter) {
        sol.iterations = iter;
        const Vector rx = G.transpose() * z + c * tau;
        const Vector rz = G * x + s - h * tau;
        const double cx = c.dot(x), hz = h.dot(z);
        const double rt = kappa + cx + hz;
        const double gap = s.dot(z);
        const double mu  = (gap + tau * kappa) / (deg + 1.0);

        const double pcost = cx / tau, dcost = -hz / tau;
        const double pres  = rz.norm() / tau / resz0;
        const double dres  = rx.norm() / tau / resx0;
        const double gres  = gap / (tau * tau) / std::max(1.0, std::min(std::abs(pcost), std::abs(dcost)));
        sol.kkt    = {pres, dres, gres};
        if (opt.verbose)
            std::fprintf(stderr, "%3d pcost % .9e dcost % .9e pres %.2e dres %.2e gap %.2e tau %.2e kappa %.2e\n", iter,
                         pcost, dcost, pres, dres, gres, tau, kappa);
        best_u     = x.head(prog.n_vars) / tau;

        if (pres <= opt.tol && dres <= opt.tol && gres <= opt.tol) {
            sol.u_star         = best_u;
            sol.objective      = prog.objective(sol.u_star);
            sol.dual_objective = dcost + prog.c0;
            return finish(SolveStatus::Optimal);
        }
        if (hz < 0.0) {
            const double pinf = (G.transpose() * z).norm() / resx0 / (-hz);
            if (pinf <= opt.tol) {
                sol.certificate_residual = pinf;
                return finish(SolveStatus::PrimalInfeasible);
            }
        }
        if (cx < 0.0) {
            const double dinf = (G * x + s).norm() / resz0 / (-cx);
            if (dinf <= opt.tol) {
                sol.certificate_residual = dinf;
                return finish(SolveStatus::DualInfeasible);
            }
        }
        if (iter == opt.max_iter) break;

        const conic::NtScaling W(K, s, z);
        const Vector lam = W.apply(z);
        const Matrix Gs  = W.apply_inv(G);
        const Factor fac = factor(Gs);
        if (!fac.ok) return finish(SolveStatus::NumericalFailure);

        // [0 G^T; G -W^2] [dx; dz] = [bx; bz], two rounds of iterative refinement
        auto kkt_solve = [&](const Vector& bx, const Vector& bz, Vector& dx, Vector& dz) {
            auto base = [&](const Vector& rx_, const Vector& rz_, Vector& ox, Vector& oz) {
                const Vector wbz = W.apply_inv(rz_);
                ox = fac.normal_solve(rx_ + Gs.transpose() * wbz);
                oz = W.apply_inv(Gs * ox - wbz);
            };
            base(bx, bz, dx, dz);
            for (int r = 0; r < 2; ++r) {
                const Vector ex = bx - G.transpose() * dz;
                const Vector ez = bz - (G * dx - W.apply(W.apply(dz)));
                Vector cx_, cz_;
                base(ex, ez, cx_, cz_);
                dx += cx_;
                dz += cz_;
            }
        };

        Vector x1, z1;
        kkt_solve(-c, h, x1, z1);
        const double denom = c.dot(x1) + h.dot(z1) - kappa / tau;

        // returns (dx, ds, dz, dtau, dkappa) for complementarity targets
        struct Dir {
            Vector dx, ds, dz;
            double dtau = 0.0, dkappa = 0.0;
        };
        auto direction = [&](double eta, const Vector& rhs_s, double rhs_k) {
            Dir d;
            const Vector lds = K.div(lam, rhs_s);
            Vector x2, z2;
            kkt_solve(-eta * rx, -eta * rz - W.apply(lds), x2, z2);
            d.dtau   = (-eta * rt - rhs_k / tau - c.dot(x2) - h.dot(z2)) / denom;
            d.dx     = x2 + d.dtau * x1;
            d.dz     = z2 + d.dtau * z1;
            d.dkappa = (rhs_k - kappa * d.dtau) / tau;
            d.ds     = W.apply(lds - W.apply(d.dz));
            return d;
        };
        auto step_len = [&](const Dir& d) {
            double a = std::min(K.max_step(s, d.ds), K.max_step(z, d.dz));
            if (d.dtau < 0.0) a = std::min(a, -tau / d.dtau);
            if (d.dkappa < 0.0) a = std::min(a, -kappa / d.dkappa);
            return a;
        };

        // predictor
        const Vector ll  = K.prod(lam, lam);
        const Dir aff    = direction(1.0, -ll, -tau * kappa);
        const double aa  = std::min(1.0, step_len(aff));
        const double sigma = std::pow(1.0 - aa, 3);

        // corrector
        const Vector corr = K.prod(W.apply_inv(aff.ds), W.apply(aff.dz));
        const Vector e    = K.identity();
        const Dir d = direction(1.0 - sigma, -ll + sigma * mu * e - corr, -tau * kappa + sigma * mu - aff.dtau * aff.dkappa);
        const double a = std::min(1.0, 0.99 * step_len(d));
        if (!(a > 0.0) || !d.dx.allFinite()) return finish(SolveStatus::NumericalFailure);

        x += a * d.dx;
        s += a * d.ds;
        z += a * d.dz;
        tau += a * d.dtau;
        kappa += a * d.dkappa;
    }
    sol.u_star    = best_u;
    sol.objective = prog.objective(best_u);
    return finish(SolveStatus::MaxIterations);
}

enum class Method { Nominal, Ellipsoidal, Proposed };

inline std::string to_string(Method m) {
    switch (m) {
    case Method::Nominal: return "nominal";
    case Method::Ellipsoidal: return "ellipsoidal";
    case Method::Proposed: return "proposed";
    }
    return "unknown";
}

struct CostWeights {
    Matrix Qc; // n_y x n_y
    Matrix Rc; // n_u x n_u
};

struct AssembleOptions {
    double input_bound   = std::numeric_limits<double>::infinity(); // |u_t| <= bound
    Index n_samples      = 100000;
    std::uint64_t seed   = 0;
};

/**
 * Builds the finite-horizon program over u = [u_0; ...; u_{N-1}] from one
 * predictor per horizon k = 1..N. The cost always uses the predicted mean
 * y_hat_k = G0_k x0_bar + Gu_k u_{[0, k-1]}. Row (k, j) gets its own derived
 * seed so the Monte Carlo quantiles do not depend on evaluation order.
 */
inline ConicProgram assemble(const std::vector<MultiStepPredictor>& msps,
                             const std::vector<HalfspaceConstraint>& constraints, const GaussianBelief& init,
                             const ChanceSpec& spec, const CostWeights& cost, Method method,
                             const AssembleOptions& opt = {}) {
    if (msps.empty()) throw std::invalid_argument("assemble: no predictors");
    const Index N = static_cast<Index>(msps.size());
    for (Index k = 1; k <= N; ++k)
        if (msps[static_cast<std::size_t>(k - 1)].k != k)
            throw std::invalid_argument("assemble: missing predictor for k = " + std::to_string(k));
    const Index nu = msps.front().nu, ny = msps.front().ny, n = N * nu;
    require(cost.Qc.rows() == ny && cost.Rc.rows() == nu, "assemble: cost weight size mismatch");

    ConicProgram prog;
    prog.n_vars = n;
    prog.H      = Matrix::Zero(n, n);
    prog.g      = Vector::Zero(n);
    for (const auto& msp : msps) {
        const Index w    = msp.k * nu;
        const Vector y0  = msp.G0_hat * init.mean;
        prog.H.topLeftCorner(w, w) += 2.0 * msp.Gu_hat.transpose() * cost.Qc * msp.Gu_hat;
        prog.g.head(w)             += 2.0 * msp.Gu_hat.transpose() * cost.Qc * y0;
        prog.c0                    += y0.dot(cost.Qc * y0);
    }
    for (Index t = 0; t < N; ++t) prog.H.block(t * nu, t * nu, nu, nu) += 2.0 * cost.Rc;
    prog.H = symmetrize(prog.H);

    if (std::isfinite(opt.input_bound)) {
        for (Index i = 0; i < n; ++i) {
            LinearRow up{Vector::Zero(n), opt.input_bound}, lo{Vector::Zero(n), opt.input_bound};
            up.a(i) = 1.0;
            lo.a(i) = -1.0;
            prog.lin_rows.push_back(std::move(up));
            prog.lin_rows.push_back(std::move(lo));
        }
    }

    for (const auto& msp : msps) {
        for (std::size_t j = 0; j < constraints.size(); ++j) {
            RowOptions ro{n, opt.n_samples, CounterRng::derive(opt.seed, static_cast<std::uint64_t>(msp.k), j)};
            SocRow row;
            switch (method) {
            case Method::Nominal: row = build_rows_nominal(msp, constraints[j], init, spec, n); break;
            case Method::Ellipsoidal: row = build_rows_ellipsoidal(msp, constraints[j], init, spec, ro); break;
            case Method::Proposed: row = build_rows_proposed(msp, constraints[j], init, spec, ro); break;
            }
            row.j = static_cast<int>(j);
            prog.soc_rows.push_back(std::move(row));
        }
    }
    return prog;
}

} // namespace smpc
