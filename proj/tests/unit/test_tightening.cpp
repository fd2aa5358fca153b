#include <gtest/gtest.h>

#include <smpc/tightening.hpp>

#include "../support/oracles.hpp"

using namespace smpc;
using smpc::oracle::random_matrix;
using smpc::oracle::random_spd;
using smpc::oracle::random_vector;

namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

template <class F>
double bisect(F f, double lo, double hi) {
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (f(mid) ? hi : lo) = mid;
    }
    return 0.5 * (lo + hi);
}

double normal_quantile(double p) {
    return bisect([&](double x) { return normal_cdf(x) >= p; }, -40.0, 40.0);
}

// quantile of (m + s Z)^2
double shifted_square_quantile(double m, double s, double level) {
    auto cdf = [&](double q) { return normal_cdf((std::sqrt(q) - m) / s) - normal_cdf((-std::sqrt(q) - m) / s); };
    return bisect([&](double q) { return cdf(q) >= level; }, 0.0, 1e4 * (m * m + s * s));
}

StateSpaceModel truth() {
    Vector d(6);
    d << 0, 0, 0, 1e-3, 1e-3, 1e-3;
    return to_output_normal_form(build_msd_chain(3, 1.0, 10.0, 2.0, 0.5, d, 1e-3)).model;
}

// Predictors identified with the true model as the surrogate, T = 1000.
struct Bench {
    std::vector<MultiStepPredictor> msps;
    GaussianBelief init;
    std::vector<HalfspaceConstraint> cons;
};

const Bench& bench() {
    static const Bench b = [] {
        Bench out;
        const auto m    = truth();
        const auto tr   = simulate(m, Vector::Zero(6), excitation_inputs(1, 1000, 2.0, 42), 42);
        const auto inno = dare_steady_state(m);
        out.msps = identify_predictors(m, tr, GaussianBelief(Vector::Zero(6), inno.P_post), {20, 50, 1.2});
        out.init = GaussianBelief(Vector::Constant(6, -0.2), inno.P_post);
        for (Index j = 0; j < 3; ++j) out.cons.emplace_back(Vector::Unit(3, j) / 0.05);
        return out;
    }();
    return b;
}

const ChanceSpec kBench{0.9, 0.95, 0.975};

} // namespace

// ---------------------------------------------------------------- constants

TEST(Chi2, KnownValues) {
    EXPECT_EQ(chi2_quantile(3, 0.0), 0.0);
    const double z = 1.2815515655446004; // Phi^{-1}(0.9)
    EXPECT_NEAR(chi2_quantile(1, 0.8), z * z, 1e-12);
    for (double p : {0.1, 0.5, 0.95, 0.999}) EXPECT_NEAR(chi2_quantile(2, p), -2.0 * std::log(1.0 - p), 1e-10);
    EXPECT_NEAR(chi2_quantile(1, 0.975), 5.023886187314888, 1e-10);
    EXPECT_THROW(chi2_quantile(0, 0.5), std::invalid_argument);
    EXPECT_THROW(chi2_quantile(2, 1.0), std::invalid_argument);
}

TEST(Chi2, MonteCarloCoverage) {
    std::mt19937_64 g(1);
    std::chi_squared_distribution<double> chi(5.0);
    const double q = chi2_quantile(5, 0.95);
    int below      = 0;
    for (int i = 0; i < 1000000; ++i) below += chi(g) <= q ? 1 : 0;
    const double frac = below / 1e6;
    EXPECT_GE(frac, 0.949);
    EXPECT_LE(frac, 0.951);
}

TEST(ChanceSpec, BenchmarkConstants) {
    kBench.validate();
    EXPECT_NEAR(kBench.quantile_level(), 0.975, 1e-15);
    EXPECT_NEAR(kBench.p_tilde(), 0.9 / 0.95, 1e-15);
    EXPECT_NEAR(kBench.c_epsilon(), std::sqrt(chi2_quantile(1, 0.95)), 1e-12);
    EXPECT_NEAR(kBench.c_epsilon(), 1.959963984540054, 1e-9);
    EXPECT_NEAR(kBench.c_p(), normal_quantile(0.9), 1e-9);
    EXPECT_NEAR(kBench.c_p_tilde(), normal_quantile(0.9 / 0.95), 1e-9);
}

TEST(ChanceSpec, RejectsInconsistentLevels) {
    EXPECT_THROW((ChanceSpec{0.95, 0.9, 0.99}.validate()), std::invalid_argument);
    EXPECT_THROW((ChanceSpec{0.9, 0.95, 0.94}.validate()), std::invalid_argument);
    EXPECT_THROW((ChanceSpec{0.9, 0.95, 1.0}.validate()), std::invalid_argument);
    EXPECT_THROW((ChanceSpec{0.0, 0.95, 0.975}.validate()), std::invalid_argument);
}

TEST(ChanceSpec, EllipsoidRadiusGrowsWithDimension) {
    EXPECT_NEAR(kBench.d_delta(1), kBench.c_epsilon(), 1e-12);
    double prev = kBench.d_delta(1);
    for (Index n = 2; n <= 80; ++n) {
        const double d = kBench.d_delta(n);
        EXPECT_GT(d, prev);
        EXPECT_GT(d, kBench.c_epsilon());
        prev = d;
    }
}

// ---------------------------------------------------------------- trust region

TEST(TrustRegion, ZeroFormIsZero) {
    std::mt19937_64 g(2);
    EXPECT_EQ(trust_region_max(Matrix::Zero(4, 4), random_vector(g, 4), random_spd(g, 4), 2.0), 0.0);
}

TEST(TrustRegion, CenteredIsScaledTopEigenvalue) {
    std::mt19937_64 g(3);
    const Matrix B = random_matrix(g, 5, 5), M = B * B.transpose();
    const double r = 1.7;
    Eigen::SelfAdjointEigenSolver<Matrix> es(M);
    EXPECT_NEAR(trust_region_max(M, Vector::Zero(5), Matrix::Identity(5, 5), r), r * r * es.eigenvalues().maxCoeff(),
                1e-10 * es.eigenvalues().maxCoeff());
}

TEST(TrustRegion, MatchesBruteForceOnRandomInstances) {
    std::mt19937_64 g(4);
    std::uniform_int_distribution<int> dim(2, 8);
    for (int inst = 0; inst < 50; ++inst) {
        const Index n    = dim(g);
        const Index rank = 1 + inst % n;
        const Matrix B   = random_matrix(g, n, rank);
        const Matrix M   = B * B.transpose();
        const Matrix Sig = random_spd(g, n, 0.05);
        const Vector c   = inst % 10 == 0 ? Vector(Vector::Zero(n)) : random_vector(g, n);
        const double r   = 0.5 + 2.0 * (inst % 5);
        const double got = trust_region_max(M, c, Sig, r);
        const auto ref   = oracle::trust_region_bruteforce(M, c, Sig, r, 1000 + inst);
        EXPECT_LE(ref.best, got * (1.0 + 1e-9) + 1e-12) << "instance " << inst;
        EXPECT_LE(got, ref.best * (1.0 + 1e-6) + 1e-12) << "instance " << inst;
    }
}

TEST(TrustRegion, HardCaseDegenerateTopEigenspace) {
    // whitened linear term orthogonal to a repeated top eigenspace
    Matrix M = Matrix::Zero(4, 4);
    M.diagonal() << 3.0, 3.0, 1.0, 0.5;
    Vector c = Vector::Zero(4);
    c(3)     = 0.2;
    for (double r : {0.1, 1.0, 3.0}) {
        const double got = trust_region_max(M, c, Matrix::Identity(4, 4), r);
        const auto ref   = oracle::trust_region_bruteforce(M, c, Matrix::Identity(4, 4), r, 9);
        EXPECT_NEAR(got, ref.best, 1e-6 * ref.best) << "radius " << r;
    }
}

// ---------------------------------------------------------------- generalized chi-squared quantile

TEST(QuadFormQuantile, DegenerateCovarianceIsPointValue) {
    std::mt19937_64 g(5);
    const Matrix M  = random_spd(g, 4);
    const Vector th = random_vector(g, 4);
    EXPECT_NEAR(quad_form_quantile(M, th, Matrix::Zero(4, 4), 0.975, 1000, 1), th.dot(M * th), 1e-12);
}

TEST(QuadFormQuantile, ScalarChiSquare) {
    const double q = quad_form_quantile(Matrix::Identity(1, 1), Vector::Zero(1), Matrix::Identity(1, 1), 0.975, 100000, 3);
    EXPECT_NEAR(q, 5.0239, 0.02 * 5.0239);
}

TEST(QuadFormQuantile, RankOneReducesToShiftedSquare) {
    std::mt19937_64 g(6);
    for (int inst = 0; inst < 5; ++inst) {
        const Vector v   = random_vector(g, 5);
        const Vector th  = 0.5 * random_vector(g, 5);
        const Matrix Sig = random_spd(g, 5);
        const double m = v.dot(th), s = std::sqrt(v.dot(Sig * v));
        const double ref = shifted_square_quantile(m, s, 0.975);
        const double got = quad_form_quantile(v * v.transpose(), th, Sig, 0.975, 100000, 10 + inst);
        EXPECT_NEAR(got, ref, 0.02 * ref) << "instance " << inst;
    }
}

TEST(QuadFormQuantile, DeterministicAndMonotoneInLevel) {
    std::mt19937_64 g(7);
    const Matrix M = random_spd(g, 6), Sig = random_spd(g, 6);
    const Vector th = random_vector(g, 6);
    const double a = quad_form_quantile(M, th, Sig, 0.9, 20000, 4), b = quad_form_quantile(M, th, Sig, 0.9, 20000, 4);
    EXPECT_EQ(a, b);
    EXPECT_LT(quad_form_quantile(M, th, Sig, 0.5, 20000, 4), a);
    EXPECT_LT(a, quad_form_quantile(M, th, Sig, 0.99, 20000, 4));
}

// ---------------------------------------------------------------- rows

TEST(Rows, ConeMatchesKroneckerProjection) {
    const auto& b = bench();
    std::mt19937_64 g(8);
    for (const auto& msp : b.msps) {
        const Index nz = msp.nx + msp.k * msp.nu;
        const Vector h = b.cons[2].h;
        const Matrix Sh = projected_parameter_cov(msp.Sigma_theta, h);
        EXPECT_LE((Sh - kronecker_selector(nz, h).transpose() * msp.Sigma_theta * kronecker_selector(nz, h)).norm(),
                  1e-10 * Sh.norm());
        const RowOptions ro{20, 2000, 1};
        const SocRow row = build_rows_proposed(msp, b.cons[2], b.init, kBench, ro);
        for (int rep = 0; rep < 5; ++rep) {
            const Vector u = random_vector(g, 20);
            Vector z(nz);
            z << b.init.mean, u.head(msp.k);
            Vector zh(nz * 3);
            for (Index a = 0; a < nz; ++a) zh.segment(3 * a, 3) = z(a) * h;
            const double direct = std::sqrt(zh.dot(msp.Sigma_theta * zh));
            EXPECT_NEAR((row.cone_matrix * u + row.cone_offset).norm(), direct, 1e-10 * (1.0 + direct));
            EXPECT_NEAR(row.offset + row.linear.dot(u), h.dot(msp.G0_hat * b.init.mean + msp.Gu_hat * u.head(msp.k)),
                        1e-10);
        }
    }
}

TEST(Rows, KnownParametersAndStateGiveGaussianTightening) {
    const auto exact = exact_predictors(truth(), 5);
    const GaussianBelief point(Vector::Constant(6, -0.2), Matrix::Zero(6, 6));
    const HalfspaceConstraint hc(Vector::Unit(3, 1) / 0.05);
    for (const auto& msp : exact) {
        const SocRow row = build_rows_proposed(msp, hc, point, kBench, {5, 1000, 1});
        EXPECT_LE((row.cone_matrix * Vector::Ones(5) + row.cone_offset).norm(), 1e-14);
        EXPECT_NEAR(row.rhs, 1.0 - kBench.c_p_tilde() * std::sqrt(row.d_kj), 1e-12);
        const Vector h = hc.h;
        EXPECT_NEAR(row.d_kj, h.dot((msp.Gw_hat * msp.Gw_hat.transpose() + msp.R_hat) * h), 1e-12);
    }
}

TEST(Rows, KnownParametersMakeProposedAndEllipsoidalAgreeOnF) {
    const auto exact = exact_predictors(truth(), 6);
    const auto& b    = bench();
    for (const auto& msp : exact) {
        const auto p = build_rows_proposed(msp, b.cons[0], b.init, kBench, {6, 5000, 2});
        const auto e = build_rows_ellipsoidal(msp, b.cons[0], b.init, kBench, {6, 5000, 2});
        const Matrix M = initial_uncertainty_form(b.init.cov, b.cons[0].h, msp.n_theta());
        EXPECT_NEAR(p.f, msp.theta_hat.dot(M * msp.theta_hat), 1e-12);
        EXPECT_NEAR(e.f, p.f, 1e-12);
        EXPECT_EQ(p.linear, e.linear);
        EXPECT_EQ(p.offset, e.offset);
    }
}

TEST(Rows, InitialUncertaintyFormIsQuadraticInG0) {
    std::mt19937_64 g(9);
    const Matrix P  = random_spd(g, 6);
    const Vector h  = random_vector(g, 3);
    const Vector th = random_vector(g, 3 * 10);
    const Matrix G0 = extract_matrices(th, 3, 6).first;
    EXPECT_NEAR(th.dot(initial_uncertainty_form(P, h, 30) * th), h.dot(G0 * P * G0.transpose() * h), 1e-10);
}

TEST(Rows, ProposedContainsEllipsoidalAndHasSmallerF) {
    const auto& b = bench();
    std::mt19937_64 g(10);
    std::uniform_real_distribution<double> ud(-2.5, 2.5);
    std::vector<Vector> us(10000, Vector(20));
    for (auto& u : us)
        for (Index i = 0; i < 20; ++i) u(i) = ud(g);
    for (const auto& msp : b.msps) {
        for (std::size_t j = 0; j < b.cons.size(); ++j) {
            const RowOptions ro{20, 10000, CounterRng::derive(3, static_cast<std::uint64_t>(msp.k), j)};
            const auto p = build_rows_proposed(msp, b.cons[j], b.init, kBench, ro);
            const auto e = build_rows_ellipsoidal(msp, b.cons[j], b.init, kBench, ro);
            EXPECT_LE(p.f, e.f) << "k " << msp.k << " j " << j;
            int bad = 0;
            for (const auto& u : us)
                if (e.lhs(u) <= e.rhs && p.lhs(u) > p.rhs) ++bad;
            EXPECT_EQ(bad, 0) << "k " << msp.k << " j " << j;
        }
    }
}

TEST(Rows, LargerParameterCovarianceNeverLoosens) {
    const auto& b = bench();
    std::mt19937_64 g(11);
    for (int k : {1, 10, 20}) {
        MultiStepPredictor wide = b.msps[static_cast<std::size_t>(k - 1)];
        const auto& base        = b.msps[static_cast<std::size_t>(k - 1)];
        wide.Sigma_theta *= 2.0;
        const RowOptions ro{20, 20000, 5};
        for (int method = 0; method < 2; ++method) {
            const auto build = [&](const MultiStepPredictor& m) {
                return method == 0 ? build_rows_proposed(m, b.cons[2], b.init, kBench, ro)
                                   : build_rows_ellipsoidal(m, b.cons[2], b.init, kBench, ro);
            };
            const SocRow a = build(base), w = build(wide);
            EXPECT_LE(w.rhs, a.rhs);
            for (int rep = 0; rep < 200; ++rep) {
                const Vector u = 2.5 * random_vector(g, 20);
                EXPECT_GE(w.lhs(u) - w.rhs, a.lhs(u) - a.rhs - 1e-12);
            }
        }
    }
}

TEST(Rows, ActiveProposedRowKeepsJointViolationBelowRisk) {
    const auto& b = bench();
    for (int k : {1, 5, 20}) {
        const auto& msp = b.msps[static_cast<std::size_t>(k - 1)];
        const auto& hc  = b.cons[2];
        const SocRow row = build_rows_proposed(msp, hc, b.init, kBench, {20, 100000, 77});
        // constant input on the boundary of the row
        auto gap = [&](double a) { return row.lhs(Vector::Constant(20, a)) - row.rhs; };
        double lo = -50.0, hi = 50.0;
        ASSERT_LT(gap(lo) * gap(hi), 0.0) << "k " << k;
        const bool up = gap(hi) > 0.0;
        const double alpha = bisect([&](double a) { return (gap(a) > 0.0) == up; }, lo, hi);
        const Vector u = Vector::Constant(20, alpha);
        ASSERT_LE(row.violation(u), 1e-9);

        const Matrix Lt = psd_factor(msp.Sigma_theta), Lx = psd_factor(b.init.cov);
        const double sd = std::sqrt(row.d_kj);
        std::mt19937_64 g(100 + k);
        std::normal_distribution<double> nd;
        int viol = 0;
        const int n = 100000;
        for (int s = 0; s < n; ++s) {
            Vector a(Lt.cols()), c(Lx.cols());
            for (Index i = 0; i < a.size(); ++i) a(i) = nd(g);
            for (Index i = 0; i < c.size(); ++i) c(i) = nd(g);
            const Vector th = msp.theta_hat + Lt * a;
            const auto [G0, Gu] = extract_matrices(th, 3, 6);
            const Vector x0 = b.init.mean + Lx * c;
            const double y  = hc.h.dot(G0 * x0 + Gu * u.head(k)) + sd * nd(g);
            viol += y > 1.0 ? 1 : 0;
        }
        EXPECT_LE(static_cast<double>(viol) / n, 1.0 - kBench.p + 0.01) << "k " << k;
    }
}

TEST(Rows, FlagsNonPositiveAndTriviallyInfeasibleRows) {
    SocRow r;
    r.linear      = Vector::Zero(3);
    r.cone_matrix = Matrix::Zero(1, 3);
    r.cone_offset = Vector::Ones(1);
    r.scale       = 2.0;
    r.offset      = 0.5;
    r.rhs         = 1.0;
    r.finalize_flags();
    EXPECT_TRUE(r.trivially_infeasible);
    EXPECT_FALSE(r.rhs_nonpositive);
    r.linear(0) = 1.0;
    r.rhs       = -0.1;
    r.finalize_flags();
    EXPECT_FALSE(r.trivially_infeasible);
    EXPECT_TRUE(r.rhs_nonpositive);
}

TEST(Rows, DimensionMismatchThrows) {
    const auto& b = bench();
    EXPECT_THROW(build_rows_proposed(b.msps[0], HalfspaceConstraint(Vector::Ones(2)), b.init, kBench, {20, 100, 1}),
                 std::invalid_argument);
    EXPECT_THROW(build_rows_proposed(b.msps[4], b.cons[0], b.init, kBench, {3, 100, 1}), std::invalid_argument);
    EXPECT_THROW(HalfspaceConstraint(Vector::Zero(3)), std::invalid_argument);
}
