#include <gtest/gtest.h>

#include <filesystem>

#include <smpc/harness.hpp>

#include "../support/oracles.hpp"

using namespace smpc;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config(int trials) {
    ExperimentConfig c;
    c.n_trials         = trials;
    c.mc_samples       = 2000;
    c.quantile_samples = 2000;
    c.reach_samples    = 5000;
    return c;
}

// Identified bundles for the benchmark plant, computed once per process.
const std::vector<TrialBundle>& bundles10() {
    static const std::vector<TrialBundle> b = run_pipeline(small_config(10));
    return b;
}

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("smpc_test_" + name);
    fs::remove_all(p);
    return p;
}

} // namespace

// ---------------------------------------------------------------- config

TEST(Config, JsonRoundTrip) {
    ExperimentConfig c = small_config(7);
    c.input_bound      = std::numeric_limits<double>::infinity();
    c.spec             = {0.8, 0.9, 0.95};
    c.methods          = {"proposed", "sampling_oracle"};
    const auto j       = to_json(c);
    EXPECT_EQ(j.at("input_bound"), "inf");
    EXPECT_EQ(to_json(config_from_json(j)).dump(), j.dump());
}

TEST(Config, MissingKeysKeepDefaults) {
    const auto c = config_from_json(nlohmann::json::parse(R"({"n_trials": 3})"));
    EXPECT_EQ(c.n_trials, 3);
    EXPECT_EQ(c.N, 20);
    EXPECT_EQ(c.T, 1000);
    EXPECT_DOUBLE_EQ(c.spec.p, 0.9);
    EXPECT_DOUBLE_EQ(c.spec.delta, 0.95);
    EXPECT_DOUBLE_EQ(c.spec.epsilon, 0.975);
}

TEST(Config, RejectsUnknownKeysAndMethods) {
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"n_trails": 3})")), std::invalid_argument);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"methods": ["proposed", "magic"]})")), std::invalid_argument);
    try {
        config_from_json(nlohmann::json::parse(R"({"methods": ["sequential"]})"));
        FAIL() << "sequential accepted";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find(kSequentialNote), std::string::npos);
    }
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"p": 0.96})")), std::invalid_argument);
}

TEST(Config, ShippedConfigsParse) {
    const fs::path root = SMPC_SOURCE_DIR;
    const auto bench    = config_from_json(nlohmann::json::parse(io::read_file((root / "configs/benchmark.json").string())));
    EXPECT_EQ(to_json(bench).dump(), to_json(ExperimentConfig{}).dump());
    const auto smoke = config_from_json(nlohmann::json::parse(io::read_file((root / "configs/smoke.json").string())));
    EXPECT_EQ(smoke.n_trials, 2);
}

// ---------------------------------------------------------------- io

TEST(Io, ModelRoundTrip) {
    const auto m = true_system(ExperimentConfig{});
    const auto r = io::model_from_json(nlohmann::json::parse(io::to_json(m).dump()));
    EXPECT_EQ(r.A, m.A);
    EXPECT_EQ(r.B, m.B);
    EXPECT_EQ(r.C, m.C);
    EXPECT_EQ(r.E, m.E);
    EXPECT_EQ(r.R, m.R);
}

TEST(Io, TrajectoryCsvRoundTripIsExact) {
    const auto m  = true_system(ExperimentConfig{});
    const auto tr = simulate(m, Vector::Zero(6), excitation_inputs(1, 50, 2.0, 3), 3);
    const auto r  = io::trajectory_from_csv(io::trajectory_csv(tr));
    EXPECT_EQ(r.U, tr.U);
    EXPECT_EQ(r.Y, tr.Y);
}

TEST(Io, PredictorsRoundTrip) {
    const auto& b = bundles10().front();
    ASSERT_TRUE(b.ok) << b.failure;
    const auto r = io::predictors_from_json(nlohmann::json::parse(io::to_json(b.predictors).dump()));
    ASSERT_EQ(r.size(), b.predictors.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
        EXPECT_EQ(r[i].k, b.predictors[i].k);
        EXPECT_EQ(r[i].theta_hat, b.predictors[i].theta_hat);
        EXPECT_LE((r[i].Sigma_theta - b.predictors[i].Sigma_theta).norm(), 1e-12 * b.predictors[i].Sigma_theta.norm());
        EXPECT_EQ(r[i].Gw_hat, b.predictors[i].Gw_hat);
        EXPECT_EQ(r[i].R_hat, b.predictors[i].R_hat);
    }
}

TEST(Io, ProgramRoundTripSolvesIdentically) {
    const auto rp = oracle::random_feasible_socp(3, 6, 3, 2);
    const auto r  = io::program_from_json(nlohmann::json::parse(io::to_json(rp.prog).dump()));
    const auto a = solve(rp.prog), b = solve(r);
    EXPECT_EQ(a.status, b.status);
    EXPECT_EQ(a.u_star, b.u_star);
    const auto js = io::to_json(a);
    EXPECT_EQ(js.at("status"), "optimal");
}

// ---------------------------------------------------------------- pipeline

TEST(Pipeline, BenchmarkConfigYieldsPredictorsForEveryHorizon) {
    for (const auto& b : bundles10()) {
        ASSERT_TRUE(b.ok) << b.failure;
        ASSERT_EQ(b.predictors.size(), 20u);
        for (int k = 1; k <= 20; ++k) {
            const auto& p = b.predictors[static_cast<std::size_t>(k - 1)];
            EXPECT_EQ(p.k, k);
            EXPECT_EQ(p.n_theta(), 3 * (6 + k));
            EXPECT_GT(min_eigenvalue(p.Sigma_theta), 0.0);
        }
        EXPECT_GE(b.t_identify, 0.0);
        EXPECT_GE(b.t_predictors, 0.0);
        EXPECT_GT(b.em.iterations, 0);
    }
}

TEST(Pipeline, DeterministicAndIndependentOfThreadCount) {
    ExperimentConfig c = small_config(3);
    const auto a = run_pipeline(c);
    c.jobs       = 2;
    const auto b = run_pipeline(c);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].seed, b[i].seed);
        EXPECT_EQ(a[i].data.Y, b[i].data.Y);
        EXPECT_EQ(a[i].em.model.A, b[i].em.model.A);
        for (std::size_t k = 0; k < a[i].predictors.size(); ++k)
            EXPECT_EQ(a[i].predictors[k].theta_hat, b[i].predictors[k].theta_hat);
        // the first trials of a larger study are the same trials
        EXPECT_EQ(a[i].em.model.A, bundles10()[i].em.model.A);
    }
}

TEST(Pipeline, FailuresAreRecordedNotThrown) {
    ExperimentConfig c = small_config(1);
    c.T                = 30;
    const auto b       = run_trial(c, true_system(c), 0);
    EXPECT_FALSE(b.ok);
    EXPECT_FALSE(b.failure.empty());
}

TEST(Alignment, RecoversSimilarityTransform) {
    const auto m = true_system(ExperimentConfig{});
    std::mt19937_64 g(4);
    const Matrix T = oracle::random_matrix(g, 6, 6) + 4.0 * Matrix::Identity(6, 6);
    EXPECT_LE((coordinate_alignment(m, transform_model(m, T), 12) - T).norm(), 1e-8 * T.norm());
}

TEST(Alignment, PhysicalFrameBeliefs) {
    const ExperimentConfig c;
    std::mt19937_64 g(5);
    const Matrix T = oracle::random_matrix(g, 6, 6) + 4.0 * Matrix::Identity(6, 6);
    const Matrix P = oracle::random_spd(g, 6);
    const auto b   = control_beliefs(c, P, T);
    EXPECT_EQ(b.truth.mean, Vector::Constant(6, -0.2));
    EXPECT_LE((b.est.mean - T * b.truth.mean).norm(), 1e-12);
    EXPECT_LE((b.est.cov - T * P * T.transpose()).norm(), 1e-10);
    ExperimentConfig e;
    e.x0_frame   = "estimated";
    const auto be = control_beliefs(e, P, T);
    EXPECT_EQ(be.est.mean, Vector::Constant(6, -0.2));
    EXPECT_LE((T * be.truth.mean - be.est.mean).norm(), 1e-10);
}

// ---------------------------------------------------------------- reachability

TEST(Reach, KnownParametersMakeAllMethodsAgree) {
    const auto m     = true_system(ExperimentConfig{});
    const auto exact = exact_predictors(m, 20);
    const auto init  = steady_state_posterior(m, Vector::Constant(6, -0.2));
    const ChanceSpec spec{0.9, 1.0 - 1e-9, 1.0 - 1e-10};
    const Vector h   = Vector::Unit(3, 2);
    const auto oracle_rows = reachable_bounds(exact, init, spec, 5.0, h, "sampling_oracle", 100000, 11);
    const auto prop        = reachable_bounds(exact, init, spec, 5.0, h, "proposed", 2000, 11);
    const auto ell         = reachable_bounds(exact, init, spec, 5.0, h, "ellipsoidal", 2000, 11);
    for (std::size_t i = 0; i < exact.size(); ++i) {
        const auto& p  = exact[i];
        const Vector u = Vector::Constant(p.k, 5.0);
        const double mean = h.dot(p.G0_hat * init.mean + p.Gu_hat * u);
        const double sd   = std::sqrt(h.dot((p.G0_hat * init.cov * p.G0_hat.transpose() + p.Gw_hat * p.Gw_hat.transpose() + p.R_hat) * h));
        const double zq   = spec.c_p();
        // quantile standard error of the empirical p-quantile
        const double se = sd * std::sqrt(0.9 * 0.1 / 1e5) / (std::exp(-0.5 * zq * zq) / std::sqrt(2.0 * M_PI));
        EXPECT_NEAR(prop[i].upper, mean + zq * sd, 1e-6 * sd) << "k " << p.k;
        EXPECT_NEAR(prop[i].lower, mean - zq * sd, 1e-6 * sd) << "k " << p.k;
        EXPECT_NEAR(ell[i].upper, prop[i].upper, 1e-9 * sd);
        EXPECT_NEAR(ell[i].lower, prop[i].lower, 1e-9 * sd);
        EXPECT_NEAR(oracle_rows[i].upper, prop[i].upper, 4.0 * se) << "k " << p.k;
        EXPECT_NEAR(oracle_rows[i].lower, prop[i].lower, 4.0 * se) << "k " << p.k;
    }
}

// ---------------------------------------------------------------- control

TEST(Control, NoOutputConstraintsAndNoInputBoundsAlwaysFeasible) {
    ExperimentConfig c       = small_config(10);
    c.output_constraints     = false;
    c.input_bound            = std::numeric_limits<double>::infinity();
    const auto truth         = true_system(c);
    const Matrix P           = dare_steady_state(truth).P_post;
    for (const auto& b : bundles10()) {
        for (Method m : {Method::Ellipsoidal, Method::Proposed}) {
            const auto r = control_trial(c, truth, P, b, m);
            EXPECT_TRUE(r.feasible()) << to_string(m) << " trial " << b.index;
        }
    }
}

TEST(Control, FeasibleSolutionsVerifyAgainstEveryRow) {
    const ExperimentConfig c = small_config(10);
    const auto truth         = true_system(c);
    const Matrix P           = dare_steady_state(truth).P_post;
    for (const auto& b : bundles10()) {
        for (Method m : {Method::Ellipsoidal, Method::Proposed}) {
            ConicProgram prog;
            const auto r = control_trial(c, truth, P, b, m, &prog);
            if (r.status != SolveStatus::Optimal) continue;
            EXPECT_TRUE(r.verified);
            EXPECT_LE(prog.max_violation(r.u), 1e-7);
            EXPECT_LE(r.u.cwiseAbs().maxCoeff(), c.input_bound + 1e-7);
            EXPECT_EQ(r.counts.rows(), 20);
            EXPECT_EQ(r.counts.cols(), 3);
        }
    }
}

TEST(Control, InflatedParameterCovarianceReducesFeasibility) {
    const ExperimentConfig c = small_config(10);
    const auto truth         = true_system(c);
    const Matrix P           = dare_steady_state(truth).P_post;
    std::vector<int> feasible;
    for (double scale : {1.0, 10.0, 100.0}) {
        int n = 0;
        for (auto b : bundles10()) {
            for (auto& p : b.predictors) p.Sigma_theta *= scale;
            n += control_trial(c, truth, P, b, Method::Proposed).feasible() ? 1 : 0;
        }
        feasible.push_back(n);
    }
    EXPECT_GE(feasible[0], feasible[1]);
    EXPECT_GE(feasible[1], feasible[2]);
    EXPECT_LT(feasible[2], feasible[0]);
}

TEST(Violation, MedianTighteningOnActiveRowViolatesHalfTheTime) {
    const auto truth = true_system(ExperimentConfig{});
    const auto init  = steady_state_posterior(truth, Vector::Constant(6, -0.2));
    const auto exact = exact_predictors(truth, 20);
    const HalfspaceConstraint hc(Vector::Unit(3, 2) / 0.05);
    const SocRow row = build_rows_nominal(exact.back(), hc, init, ChanceSpec{0.5, 0.75, 0.9}, 20);
    EXPECT_NEAR(row.rhs, 1.0, 1e-12);
    // constant input that puts the mean of h^T y_20 exactly on the bound
    const double slope = row.linear.sum();
    ASSERT_GT(std::abs(slope), 1e-6);
    const double alpha = (row.rhs - row.offset) / slope;
    const Vector u     = Vector::Constant(20, alpha);
    const Index n      = 100000;
    const Matrix counts = violation_counts(truth, init, u, 20, {hc}, n, 9);
    const double frac   = counts(19, 0) / static_cast<double>(n);
    EXPECT_NEAR(frac, 0.5, 4.0 * std::sqrt(0.25 / n));
}

TEST(Violation, NoiseFreeRolloutsAreAllOrNothing) {
    const auto base = true_system(ExperimentConfig{});
    const StateSpaceModel quiet(base.A, base.B, base.C, Matrix::Zero(6, 6), Matrix::Zero(3, 3), true);
    const GaussianBelief x0(Vector::Constant(6, 0.5), Matrix::Zero(6, 6));
    const Vector u = Vector::Zero(20);
    const HalfspaceConstraint hc(Vector::Unit(3, 0) / 0.05);
    const Matrix counts = violation_counts(quiet, x0, u, 20, {hc}, 50, 1);
    Vector x = x0.mean;
    for (int k = 1; k <= 20; ++k) {
        x = quiet.A * x;
        EXPECT_EQ(counts(k - 1, 0), hc.h.dot(quiet.C * x) > 1.0 ? 50.0 : 0.0) << "k " << k;
    }
}

TEST(Violation, SummaryPoolsCountsAcrossTrials) {
    SolveRecord a, b, infeasible;
    a.status = b.status = SolveStatus::Optimal;
    a.verified = b.verified = true;
    a.rollouts = b.rollouts = 100;
    a.counts = Matrix::Zero(3, 2);
    b.counts = Matrix::Zero(3, 2);
    a.counts(1, 1) = 20;
    b.counts(1, 1) = 10;
    b.counts(2, 0) = 25;
    infeasible.status = SolveStatus::PrimalInfeasible;
    const auto s = summarize_violation({&a, &b, &infeasible}, 3);
    EXPECT_EQ(s.trials, 2);
    EXPECT_DOUBLE_EQ(s.max_pct, 15.0);
    EXPECT_EQ(s.worst_k, 2);
    EXPECT_EQ(s.worst_j, 1);
    EXPECT_DOUBLE_EQ(s.mean_trial_max_pct, 22.5);
    EXPECT_DOUBLE_EQ(s.per_step_pct[2], 12.5);
}

// ---------------------------------------------------------------- report

TEST(Report, TablesAreDeterministic) {
    ExperimentConfig c = small_config(2);
    const auto d1 = temp_dir("report1"), d2 = temp_dir("report2");
    write_report(run_study(c, {}), d1.string());
    c.jobs = 2;
    write_report(run_study(c, {}), d2.string());
    for (const char* f : {"reach.csv", "feasibility.csv", "violation.csv", "violation_steps.csv", "constants.csv"}) {
        ASSERT_TRUE(fs::exists(d1 / f)) << f;
        EXPECT_EQ(io::read_file((d1 / f).string()), io::read_file((d2 / f).string())) << f;
    }
    EXPECT_TRUE(fs::exists(d1 / "timings.csv"));
    const auto summary = nlohmann::json::parse(io::read_file((d1 / "summary.json").string()));
    EXPECT_TRUE(summary.contains("config"));
    const std::string reach = io::read_file((d1 / "reach.csv").string());
    EXPECT_NE(reach.find("sequential"), std::string::npos);
    EXPECT_NE(reach.find("sampling_oracle"), std::string::npos);
    fs::remove_all(d1);
    fs::remove_all(d2);
}
