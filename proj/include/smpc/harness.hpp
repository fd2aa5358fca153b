#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "io.hpp"
#include "socp.hpp"
#include "sysid_em.hpp"

namespace smpc {

inline constexpr const char* kVersion = "0.1.0";

// How the scalar initial mean is turned into a belief for an identified model.
inline std::string initial_mean_convention(const std::string& frame) {
    if (frame == "estimated")
        return "initial mean set to x0_mean in every coordinate of the identified model's output normal form; "
               "covariance is the true steady-state posterior mapped into those coordinates";
    return "initial mean set to x0_mean in every coordinate of the true system (positions and velocities) and mapped "
           "into the identified coordinates by the observability alignment, together with the true steady-state "
           "posterior covariance";
}

inline constexpr const char* kSequentialNote = "not implemented (external method)";

/// All knobs of one study. Defaults are the benchmark settings at desk scale.
struct ExperimentConfig {
    // plant
    int n_masses = 3;
    double mass = 1.0, spring = 10.0, damping = 2.0, dt = 0.5;
    std::vector<double> dist_var{0.0, 0.0, 0.0, 1e-3, 1e-3, 1e-3};
    double meas_var = 1e-3;

    // data and identification
    Index T = 1000;
    double excitation_std = 2.0;
    int em_max_iters = 500;
    double em_tol = 1e-6;
    double em_q_floor = 1e-2;
    bool em_structured_noise = true;
    Index burn_in = 50;
    double inflation = 1.2;
    double sigma_theta_scale = 1.0;

    // control problem
    int N = 20;
    ChanceSpec spec;
    double qc = 1.0, rc = 0.1;
    double input_bound = 2.5;
    double output_bound = 0.05;
    bool output_constraints = true;
    double x0_mean = -0.2;
    std::string x0_frame = "physical"; // or "estimated"
    double reach_input = 5.0;

    // study
    int n_trials = 100;
    std::uint64_t base_seed = 1;
    Index mc_samples = 10000;       // rollouts per trial
    Index quantile_samples = 10000; // generalized chi-squared sampling per row
    Index reach_samples = 100000;
    std::vector<std::string> methods{"nominal", "ellipsoidal", "proposed", "sampling_oracle"};
    SolverOptions solver;
    int jobs = 1;

    void validate() const {
        require(n_trials >= 1, "config: n_trials must be >= 1");
        require(N >= 1, "config: N must be >= 1");
        require(T >= 1 && excitation_std > 0.0, "config: need T >= 1 and a positive excitation std");
        require(mc_samples >= 1 && quantile_samples >= 1 && reach_samples >= 1, "config: sample counts must be >= 1");
        require(output_bound > 0.0, "config: output_bound must be positive");
        require(input_bound > 0.0, "config: input_bound must be positive");
        require(static_cast<int>(dist_var.size()) == 2 * n_masses, "config: dist_var needs 2 * n_masses entries");
        require(jobs >= 1, "config: jobs must be >= 1");
        require(x0_frame == "physical" || x0_frame == "estimated", "config: x0_frame must be physical or estimated");
        spec.validate();
        static const std::set<std::string> known{"nominal", "ellipsoidal", "proposed", "sampling_oracle"};
        for (const auto& m : methods) {
            if (m == "sequential") throw std::invalid_argument("config: method 'sequential' is " + std::string(kSequentialNote));
            require(known.count(m) == 1, "config: unknown method '" + m + "'");
        }
    }
    [[nodiscard]] bool uses(const std::string& m) const {
        return std::find(methods.begin(), methods.end(), m) != methods.end();
    }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
    return {{"n_masses", c.n_masses},
            {"mass", c.mass},
            {"spring", c.spring},
            {"damping", c.damping},
            {"dt", c.dt},
            {"dist_var", c.dist_var},
            {"meas_var", c.meas_var},
            {"T", c.T},
            {"excitation_std", c.excitation_std},
            {"em_max_iters", c.em_max_iters},
            {"em_tol", c.em_tol},
            {"em_q_floor", c.em_q_floor},
            {"em_structured_noise", c.em_structured_noise},
            {"burn_in", c.burn_in},
            {"inflation", c.inflation},
            {"sigma_theta_scale", c.sigma_theta_scale},
            {"N", c.N},
            {"p", c.spec.p},
            {"delta", c.spec.delta},
            {"epsilon", c.spec.epsilon},
            {"qc", c.qc},
            {"rc", c.rc},
            {"input_bound", std::isfinite(c.input_bound) ? nlohmann::json(c.input_bound) : nlohmann::json("inf")},
            {"output_bound", c.output_bound},
            {"output_constraints", c.output_constraints},
            {"x0_mean", c.x0_mean},
            {"x0_frame", c.x0_frame},
            {"reach_input", c.reach_input},
            {"n_trials", c.n_trials},
            {"base_seed", c.base_seed},
            {"mc_samples", c.mc_samples},
            {"quantile_samples", c.quantile_samples},
            {"reach_samples", c.reach_samples},
            {"methods", c.methods},
            {"solver_tol", c.solver.tol},
            {"solver_max_iter", c.solver.max_iter},
            {"jobs", c.jobs}};
}

/// Missing keys keep their defaults; unknown keys are rejected. "inf" is accepted for input_bound.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    const auto known = to_json(c);
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.contains(it.key())) throw std::invalid_argument("config: unknown key '" + it.key() + "'");
    auto get = [&](const char* key, auto& dst) {
        if (j.contains(key)) j.at(key).get_to(dst);
    };
    get("n_masses", c.n_masses);
    get("mass", c.mass);
    get("spring", c.spring);
    get("damping", c.damping);
    get("dt", c.dt);
    get("dist_var", c.dist_var);
    get("meas_var", c.meas_var);
    get("T", c.T);
    get("excitation_std", c.excitation_std);
    get("em_max_iters", c.em_max_iters);
    get("em_tol", c.em_tol);
    get("em_q_floor", c.em_q_floor);
    get("em_structured_noise", c.em_structured_noise);
    get("burn_in", c.burn_in);
    get("inflation", c.inflation);
    get("sigma_theta_scale", c.sigma_theta_scale);
    get("N", c.N);
    get("p", c.spec.p);
    get("delta", c.spec.delta);
    get("epsilon", c.spec.epsilon);
    get("qc", c.qc);
    get("rc", c.rc);
    if (j.contains("input_bound") && j.at("input_bound").is_string()) {
        require(j.at("input_bound").get<std::string>() == "inf", "config: input_bound must be a number or \"inf\"");
        c.input_bound = std::numeric_limits<double>::infinity();
    } else {
        get("input_bound", c.input_bound);
    }
    get("output_bound", c.output_bound);
    get("output_constraints", c.output_constraints);
    get("x0_mean", c.x0_mean);
    get("x0_frame", c.x0_frame);
    get("reach_input", c.reach_input);
    get("n_trials", c.n_trials);
    get("base_seed", c.base_seed);
    get("mc_samples", c.mc_samples);
    get("quantile_samples", c.quantile_samples);
    get("reach_samples", c.reach_samples);
    get("methods", c.methods);
    get("solver_tol", c.solver.tol);
    get("solver_max_iter", c.solver.max_iter);
    get("jobs", c.jobs);
    c.validate();
    return c;
}

/// The benchmark plant in output normal form.
inline StateSpaceModel true_system(const ExperimentConfig& c) {
    const Vector d = Eigen::Map<const Vector>(c.dist_var.data(), static_cast<Index>(c.dist_var.size()));
    return to_output_normal_form(build_msd_chain(c.n_masses, c.mass, c.spring, c.damping, c.dt, d, c.meas_var)).model;
}

/// T with x_to ~= T x_from, from matching observability matrices over `blocks` steps.
inline Matrix coordinate_alignment(const StateSpaceModel& from, const StateSpaceModel& to, int blocks) {
    require(from.nx() == to.nx() && from.ny() == to.ny(), "coordinate_alignment: dimension mismatch");
    const Index ny = from.ny(), nx = from.nx();
    Matrix Of(ny * blocks, nx), Ot(ny * blocks, nx);
    Matrix Pf = from.C, Pt = to.C;
    for (int i = 0; i < blocks; ++i) {
        Of.middleRows(i * ny, ny) = Pf;
        Ot.middleRows(i * ny, ny) = Pt;
        Pf = Pf * from.A;
        Pt = Pt * to.A;
    }
    return Ot.completeOrthogonalDecomposition().solve(Of);
}

inline std::vector<HalfspaceConstraint> output_constraints(const ExperimentConfig& c, Index ny) {
    std::vector<HalfspaceConstraint> out;
    if (!c.output_constraints) return out;
    for (Index i = 0; i < ny; ++i) out.emplace_back(Vector::Unit(ny, i) / c.output_bound);
    return out;
}

inline CostWeights cost_weights(const ExperimentConfig& c, Index ny, Index nu) {
    return {c.qc * Matrix::Identity(ny, ny), c.rc * Matrix::Identity(nu, nu)};
}

inline std::uint64_t trial_seed(std::uint64_t base, int index) {
    return CounterRng::derive(base, streams::trial, static_cast<std::uint64_t>(index));
}

/// Identification output of one trial.
struct TrialBundle {
    int index = 0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string failure;
    Trajectory data;
    EMResult em;
    std::vector<MultiStepPredictor> predictors;
    Matrix align; // x_est = align * x_true
    double t_identify = 0.0, t_predictors = 0.0;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/**
 * Excitation data -> EM state-space estimate -> filter -> per-k GLS
 * predictors. Failures are recorded on the bundle instead of thrown.
 */
inline TrialBundle run_trial(const ExperimentConfig& c, const StateSpaceModel& truth, int index) {
    TrialBundle b;
    b.index = index;
    b.seed  = trial_seed(c.base_seed, index);
    try {
        const Matrix U = excitation_inputs(truth.nu(), c.T, c.excitation_std, b.seed);
        b.data         = simulate(truth, Vector::Zero(truth.nx()), U, b.seed);

        EMConfig ec;
        ec.n_x        = static_cast<int>(truth.nx());
        ec.max_iters  = c.em_max_iters;
        ec.loglik_tol = c.em_tol;
        ec.q_floor    = c.em_q_floor;
        ec.seed       = b.seed;
        if (c.em_structured_noise) {
            ec.E_pattern = truth.E;
            ec.R_pattern = truth.R;
        }
        auto t0      = std::chrono::steady_clock::now();
        b.em         = em_identify(b.data, ec);
        b.t_identify = seconds_since(t0);

        t0 = std::chrono::steady_clock::now();
        b.predictors = identify_predictors(b.em.model, b.data, b.em.init, {c.N, c.burn_in, c.inflation});
        b.t_predictors = seconds_since(t0);
        if (c.sigma_theta_scale != 1.0)
            for (auto& p : b.predictors) p.Sigma_theta *= c.sigma_theta_scale;
        b.align = coordinate_alignment(truth, b.em.model, static_cast<int>(2 * truth.nx()));
        b.ok    = true;
    } catch (const std::exception& e) {
        b.ok      = false;
        b.failure = e.what();
    }
    return b;
}

/// Runs `work(i)` for i in [0, n) on `jobs` threads; results are indexed, so order never matters.
inline void parallel_for(int n, int jobs, const std::function<void(int)>& work) {
    if (jobs <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) work(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::mutex err_mutex;
    std::exception_ptr err;
    for (int t = 0; t < std::min(jobs, n); ++t)
        pool.emplace_back([&] {
            for (int i = next++; i < n; i = next++) {
                try {
                    work(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!err) err = std::current_exception();
                }
            }
        });
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

inline std::vector<TrialBundle> run_pipeline(const ExperimentConfig& c) {
    c.validate();
    const StateSpaceModel truth = true_system(c);
    std::vector<TrialBundle> out(static_cast<std::size_t>(c.n_trials));
    parallel_for(c.n_trials, c.jobs, [&](int i) { out[static_cast<std::size_t>(i)] = run_trial(c, truth, i); });
    return out;
}

/// Initial beliefs for the control problem in estimated and true coordinates.
struct ControlBeliefs {
    GaussianBelief est;
    GaussianBelief truth;
};

inline ControlBeliefs control_beliefs(const ExperimentConfig& c, const Matrix& P_true, const Matrix& align) {
    const Index nx = P_true.rows();
    const Matrix cov_est = align * P_true * align.transpose();
    if (c.x0_frame == "estimated") {
        const Vector mean_est = Vector::Constant(nx, c.x0_mean);
        return {GaussianBelief(mean_est, cov_est), GaussianBelief(align.fullPivLu().solve(mean_est), P_true)};
    }
    const Vector mean_true = Vector::Constant(nx, c.x0_mean);
    return {GaussianBelief(align * mean_true, cov_est), GaussianBelief(mean_true, P_true)};
}

/**
 * Counts h_j^T y_k > 1 over rollouts of `m` from x0 ~ init under the fixed
 * input sequence u. Returns an N x J matrix of counts.
 */
inline Matrix violation_counts(const StateSpaceModel& m, const GaussianBelief& init, const Vector& u, int N,
                               const std::vector<HalfspaceConstraint>& cons, Index n_rollouts, std::uint64_t seed) {
    const Index nx = m.nx(), nw = m.nw(), ny = m.ny(), nu = m.nu();
    require(u.size() >= N * nu, "violation_counts: input sequence shorter than the horizon");
    const Matrix Lx = psd_factor(init.cov);
    const Matrix Rs = psd_sqrt(m.R);
    const CounterRng rng(seed, streams::rollout);
    const auto per = static_cast<std::uint64_t>(Lx.cols() + N * (nw + ny));
    Matrix counts = Matrix::Zero(N, static_cast<Index>(cons.size()));
    Vector x(nx), y(ny), w(nw), v(ny), z(Lx.cols());
    for (Index r = 0; r < n_rollouts; ++r) {
        std::uint64_t ctr = static_cast<std::uint64_t>(r) * per;
        rng.normals(ctr, z);
        ctr += static_cast<std::uint64_t>(z.size());
        x = init.mean + Lx * z;
        for (int k = 1; k <= N; ++k) {
            rng.normals(ctr, w);
            ctr += static_cast<std::uint64_t>(nw);
            rng.normals(ctr, v);
            ctr += static_cast<std::uint64_t>(ny);
            x = m.A * x + m.B * u.segment((k - 1) * nu, nu) + m.E * w;
            y = m.C * x + Rs * v;
            for (std::size_t j = 0; j < cons.size(); ++j)
                if (cons[j].h.dot(y) > 1.0) counts(k - 1, static_cast<Index>(j)) += 1.0;
        }
    }
    return counts;
}

/// One solved control problem.
struct SolveRecord {
    bool attempted = false;
    SolveStatus status = SolveStatus::NumericalFailure;
    bool verified = false; // u* satisfies every row to 1e-7
    double objective = 0.0;
    double wall_time = 0.0;
    int iterations = 0;
    Vector u;
    Matrix counts; // violation counts, N x J
    Index rollouts = 0;
    [[nodiscard]] bool feasible() const { return status == SolveStatus::Optimal && verified; }
};

inline SolveRecord solve_and_check(const ConicProgram& prog, const SolverOptions& opt) {
    SolveRecord r;
    r.attempted         = true;
    const Solution s    = solve(prog, opt);
    r.status            = s.status;
    r.objective         = s.objective;
    r.wall_time         = s.wall_time;
    r.iterations        = s.iterations;
    r.u                 = s.u_star;
    r.verified          = s.status == SolveStatus::Optimal && prog.max_violation(s.u_star) <= 1e-7;
    return r;
}

struct TrialOutcome {
    int index = 0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string failure;
    int em_iterations = 0;
    bool em_converged = false;
    double t_identify = 0.0, t_predictors = 0.0;
    SolveRecord ellipsoidal, proposed;
};

/// Audit constants of one program row.
struct ConstantRow {
    std::string method;
    int k = 0, j = 0;
    double c_p = 0, c_eps = 0, c_p_tilde = 0, scale = 0, d_kj = 0, f = 0, rhs = 0;
};

struct ReachRow {
    int k = 0;
    std::string method;
    double lower = 0.0, upper = 0.0;
};

struct StudyReport {
    ExperimentConfig cfg;
    bool has_reach = false, has_control = false;
    std::vector<ReachRow> reach;
    std::vector<TrialOutcome> trials;
    SolveRecord nominal; // true model, true coordinates
    std::vector<ConstantRow> constants;
    std::vector<std::string> log;
};

inline GaussianBelief steady_state_posterior(const StateSpaceModel& truth, const Vector& mean) {
    return GaussianBelief(mean, dare_steady_state(truth).P_post);
}

/**
 * Reachable-set bounds on h^T y_k under the constant input u_fixed: for the
 * tightened methods the value b where the row for h (resp. -h) becomes
 * active, for the sampling oracle the empirical p / 1-p quantiles over joint
 * draws of theta, x0 and the output noise.
 */
inline std::vector<ReachRow> reachable_bounds(const std::vector<MultiStepPredictor>& msps, const GaussianBelief& init,
                                              const ChanceSpec& spec, double u_fixed, const Vector& h,
                                              const std::string& method, Index n_samples, std::uint64_t seed) {
    std::vector<ReachRow> out;
    const Index N = static_cast<Index>(msps.size()), nu = msps.front().nu;
    const Vector u = Vector::Constant(N * nu, u_fixed);
    for (const auto& msp : msps) {
        ReachRow row;
        row.k      = msp.k;
        row.method = method;
        const Index nx = msp.nx, nz = nx + msp.k * nu;
        if (method == "sampling_oracle") {
            const Matrix Sh = projected_parameter_cov(msp.Sigma_theta, h);
            const Vector gm = kronecker_selector(nz, h).transpose() * msp.theta_hat;
            const Matrix Lg = psd_factor(Sh, 1e-15), Lx = psd_factor(init.cov, 1e-15);
            const double sd = std::sqrt(h.dot((msp.Gw_hat * msp.Gw_hat.transpose() + msp.R_hat) * h));
            const CounterRng rng(CounterRng::derive(seed, static_cast<std::uint64_t>(msp.k)), streams::parameters);
            const auto per = static_cast<std::uint64_t>(Lg.cols() + Lx.cols() + 1);
            std::vector<double> vals(static_cast<std::size_t>(n_samples));
            Vector z(nz), a(Lg.cols()), b(Lx.cols());
            z.tail(msp.k * nu) = u.head(msp.k * nu);
            for (Index s = 0; s < n_samples; ++s) {
                const std::uint64_t base = static_cast<std::uint64_t>(s) * per;
                rng.normals(base, a);
                rng.normals(base + static_cast<std::uint64_t>(a.size()), b);
                z.head(nx) = init.mean + Lx * b;
                const Vector g = gm + Lg * a;
                vals[static_cast<std::size_t>(s)] =
                    g.dot(z) + sd * rng.normal(base + static_cast<std::uint64_t>(a.size() + b.size()));
            }
            std::sort(vals.begin(), vals.end());
            auto at = [&](double q) {
                const auto idx = std::clamp<Index>(static_cast<Index>(std::ceil(q * static_cast<double>(n_samples))) - 1,
                                                   0, n_samples - 1);
                return vals[static_cast<std::size_t>(idx)];
            };
            row.upper = at(spec.p);
            row.lower = at(1.0 - spec.p);
        } else {
            const RowOptions ro{N * nu, n_samples, CounterRng::derive(seed, static_cast<std::uint64_t>(msp.k))};
            auto bound = [&](const Vector& dir) {
                const HalfspaceConstraint hc(dir);
                SocRow r;
                if (method == "proposed") r = build_rows_proposed(msp, hc, init, spec, ro);
                else if (method == "ellipsoidal") r = build_rows_ellipsoidal(msp, hc, init, spec, ro);
                else if (method == "nominal") r = build_rows_nominal(msp, hc, init, spec, N * nu);
                else throw std::invalid_argument("reachable_bounds: unknown method '" + method + "'");
                return r.lhs(u) + (1.0 - r.rhs);
            };
            row.upper = bound(h);
            row.lower = -bound(-h);
        }
        out.push_back(row);
    }
    return out;
}

namespace harness_detail {

inline std::vector<ConstantRow> constants_of(const ConicProgram& prog, const std::string& method, const ChanceSpec& spec) {
    std::vector<ConstantRow> out;
    for (const auto& r : prog.soc_rows)
        out.push_back({method, r.k, r.j, spec.c_p(), spec.c_epsilon(), spec.c_p_tilde(), r.scale, r.d_kj, r.f, r.rhs});
    return out;
}

inline std::uint64_t method_tag(Method m) { return static_cast<std::uint64_t>(m) + 1; }

} // namespace harness_detail

/// Solves one tightened method for a trial and runs its rollouts on the true system.
inline SolveRecord control_trial(const ExperimentConfig& c, const StateSpaceModel& truth, const Matrix& P_true,
                                 const TrialBundle& b, Method method, ConicProgram* program_out = nullptr) {
    const ControlBeliefs beliefs = control_beliefs(c, P_true, b.align);
    const auto cons = output_constraints(c, truth.ny());
    const AssembleOptions ao{c.input_bound, c.quantile_samples,
                             CounterRng::derive(b.seed, streams::quantile, harness_detail::method_tag(method))};
    ConicProgram prog = assemble(b.predictors, cons, beliefs.est, c.spec, cost_weights(c, truth.ny(), truth.nu()),
                                 method, ao);
    SolveRecord r = solve_and_check(prog, c.solver);
    if (r.feasible() && !cons.empty()) {
        r.rollouts = c.mc_samples;
        r.counts   = violation_counts(truth, beliefs.truth, r.u, c.N, cons, c.mc_samples,
                                      CounterRng::derive(b.seed, streams::rollout, harness_detail::method_tag(method)));
    }
    if (program_out) *program_out = std::move(prog);
    return r;
}

/// Idealized baseline: nominal tightening with the true matrices, solved once,
/// rolled out with the same per-trial seeds as the other methods.
inline SolveRecord nominal_baseline(const ExperimentConfig& c, const StateSpaceModel& truth, ConicProgram* program_out = nullptr) {
    const GaussianBelief init = steady_state_posterior(truth, Vector::Constant(truth.nx(), c.x0_mean));
    const auto cons = output_constraints(c, truth.ny());
    ConicProgram prog = assemble(exact_predictors(truth, c.N), cons, init, c.spec,
                                 cost_weights(c, truth.ny(), truth.nu()), Method::Nominal,
                                 {c.input_bound, c.quantile_samples, c.base_seed});
    SolveRecord r = solve_and_check(prog, c.solver);
    if (r.feasible() && !cons.empty()) {
        r.counts = Matrix::Zero(c.N, static_cast<Index>(cons.size()));
        std::vector<Matrix> per(static_cast<std::size_t>(c.n_trials));
        parallel_for(c.n_trials, c.jobs, [&](int i) {
            per[static_cast<std::size_t>(i)] =
                violation_counts(truth, init, r.u, c.N, cons, c.mc_samples,
                                 CounterRng::derive(trial_seed(c.base_seed, i), streams::rollout,
                                                    harness_detail::method_tag(Method::Nominal)));
        });
        for (const auto& m : per) r.counts += m;
        r.rollouts = c.mc_samples * c.n_trials;
    }
    if (program_out) *program_out = std::move(prog);
    return r;
}

struct StudySelection {
    bool reach = true;
    bool control = true;
    std::set<Method> methods{Method::Nominal, Method::Ellipsoidal, Method::Proposed};
};

/**
 * Reachability (on trial 0's predictors), feasibility and violation studies.
 * Trials run in parallel; everything else is a deterministic reduce.
 */
inline StudyReport run_study(const ExperimentConfig& c, const StudySelection& sel) {
    c.validate();
    StudyReport rep;
    rep.cfg = c;
    const StateSpaceModel truth = true_system(c);
    const Matrix P_true         = dare_steady_state(truth).P_post;

    const bool tightened = sel.methods.count(Method::Ellipsoidal) || sel.methods.count(Method::Proposed);
    const int n_run      = sel.control && tightened ? c.n_trials : (sel.reach ? 1 : 0);
    std::vector<TrialBundle> bundles(static_cast<std::size_t>(n_run));
    rep.trials.resize(static_cast<std::size_t>(n_run));
    std::vector<std::vector<ConstantRow>> consts(static_cast<std::size_t>(std::max(n_run, 1)));
    parallel_for(n_run, c.jobs, [&](int i) {
        auto& b = bundles[static_cast<std::size_t>(i)];
        b       = run_trial(c, truth, i);
        auto& o = rep.trials[static_cast<std::size_t>(i)];
        o.index = i;
        o.seed  = b.seed;
        o.ok    = b.ok;
        o.failure = b.failure;
        if (!b.ok) return;
        o.em_iterations = b.em.iterations;
        o.em_converged  = b.em.converged;
        o.t_identify    = b.t_identify;
        o.t_predictors  = b.t_predictors;
        if (!sel.control) return;
        for (Method m : {Method::Ellipsoidal, Method::Proposed}) {
            if (!sel.methods.count(m)) continue;
            ConicProgram prog;
            try {
                SolveRecord r = control_trial(c, truth, P_true, b, m, &prog);
                if (i == 0) {
                    auto rows = harness_detail::constants_of(prog, to_string(m), c.spec);
                    consts[0].insert(consts[0].end(), rows.begin(), rows.end());
                }
                (m == Method::Ellipsoidal ? o.ellipsoidal : o.proposed) = std::move(r);
            } catch (const NumericalError& e) {
                SolveRecord r;
                r.attempted = true;
                r.status    = SolveStatus::NumericalFailure;
                (m == Method::Ellipsoidal ? o.ellipsoidal : o.proposed) = std::move(r);
            }
        }
    });
    for (const auto& o : rep.trials)
        if (!o.ok) rep.log.push_back("trial " + std::to_string(o.index) + " excluded: " + o.failure);
    rep.constants = consts[0];

    if (sel.control) {
        rep.has_control = true;
        if (sel.methods.count(Method::Nominal)) {
            ConicProgram prog;
            rep.nominal = nominal_baseline(c, truth, &prog);
            auto rows   = harness_detail::constants_of(prog, to_string(Method::Nominal), c.spec);
            rep.constants.insert(rep.constants.begin(), rows.begin(), rows.end());
        }
    }

    if (sel.reach) {
        const TrialBundle* b = nullptr;
        for (const auto& x : bundles)
            if (x.ok) {
                b = &x;
                break;
            }
        if (!b) throw NumericalError("reachability study: no trial identified successfully");
        rep.has_reach = true;
        const ControlBeliefs beliefs = control_beliefs(c, P_true, b->align);
        const Vector h               = Vector::Unit(truth.ny(), truth.ny() - 1);
        const std::uint64_t seed     = CounterRng::derive(c.base_seed, streams::parameters);
        for (const std::string m : {"sampling_oracle", "proposed", "ellipsoidal"}) {
            if (!c.uses(m)) continue;
            const Index samples = m == std::string("sampling_oracle") ? c.reach_samples : c.quantile_samples;
            auto rows = reachable_bounds(b->predictors, beliefs.est, c.spec, c.reach_input, h, m, samples, seed);
            rep.reach.insert(rep.reach.end(), rows.begin(), rows.end());
        }
    }
    return rep;
}

/// Pooled violation summary of one method across trials.
struct ViolationSummary {
    int trials = 0;
    Index rollouts_per_trial = 0;
    double max_pct = 0.0;  // pooled over trials, max over (k, j)
    int worst_k = 0, worst_j = 0;
    double mean_trial_max_pct = 0.0;
    std::vector<double> per_step_pct; // pooled, max over j, per k
};

inline ViolationSummary summarize_violation(const std::vector<const SolveRecord*>& recs, int N) {
    ViolationSummary s;
    Matrix pooled;
    Index total = 0;
    double trial_max_sum = 0.0;
    for (const auto* r : recs) {
        if (!r->feasible() || r->counts.size() == 0) continue;
        if (pooled.size() == 0) pooled = Matrix::Zero(r->counts.rows(), r->counts.cols());
        pooled += r->counts;
        total += r->rollouts;
        s.rollouts_per_trial = r->rollouts;
        trial_max_sum += 100.0 * r->counts.maxCoeff() / static_cast<double>(r->rollouts);
        ++s.trials;
    }
    s.per_step_pct.assign(static_cast<std::size_t>(N), 0.0);
    if (s.trials == 0) return s;
    Index rk = 0, rj = 0;
    s.max_pct = 100.0 * pooled.maxCoeff(&rk, &rj) / static_cast<double>(total);
    s.worst_k = static_cast<int>(rk) + 1;
    s.worst_j = static_cast<int>(rj);
    s.mean_trial_max_pct = trial_max_sum / s.trials;
    for (Index k = 0; k < pooled.rows(); ++k)
        s.per_step_pct[static_cast<std::size_t>(k)] = 100.0 * pooled.row(k).maxCoeff() / static_cast<double>(total);
    return s;
}

struct FeasibilitySummary {
    int trials = 0, excluded = 0, feasible = 0, infeasible = 0, max_iterations = 0, numerical = 0, unverified = 0;
    double pct = 0.0, mean_solve_s = 0.0, max_solve_s = 0.0;
};

inline FeasibilitySummary summarize_feasibility(const StudyReport& rep, Method m) {
    FeasibilitySummary s;
    double t = 0.0;
    int solved = 0;
    for (const auto& o : rep.trials) {
        if (!o.ok) {
            ++s.excluded;
            continue;
        }
        const SolveRecord& r = m == Method::Ellipsoidal ? o.ellipsoidal : o.proposed;
        if (!r.attempted) continue;
        ++s.trials;
        ++solved;
        t += r.wall_time;
        s.max_solve_s = std::max(s.max_solve_s, r.wall_time);
        if (r.feasible()) ++s.feasible;
        else if (r.status == SolveStatus::Optimal) ++s.unverified;
        else if (r.status == SolveStatus::PrimalInfeasible) ++s.infeasible;
        else if (r.status == SolveStatus::MaxIterations) ++s.max_iterations;
        else ++s.numerical;
    }
    if (s.trials > 0) s.pct = 100.0 * s.feasible / s.trials;
    if (solved > 0) s.mean_solve_s = t / solved;
    return s;
}

inline std::vector<const SolveRecord*> records_of(const StudyReport& rep, Method m) {
    std::vector<const SolveRecord*> out;
    for (const auto& o : rep.trials)
        if (o.ok) out.push_back(m == Method::Ellipsoidal ? &o.ellipsoidal : &o.proposed);
    return out;
}

inline std::string run_metadata_revision() {
    std::string rev = "unknown";
    if (FILE* p = popen("git describe --always --dirty 2>/dev/null", "r")) {
        char buf[128];
        if (fgets(buf, sizeof buf, p)) {
            rev = buf;
            while (!rev.empty() && (rev.back() == '\n' || rev.back() == '\r')) rev.pop_back();
        }
        pclose(p);
    }
    return rev;
}

/**
 * Writes the report files for the sections present. CSV tables are
 * deterministic; timings.csv and summary.json carry wall-clock values.
 */
inline void write_report(const StudyReport& rep, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    using io::fmt;
    const auto path = [&](const char* f) { return (fs::path(out_dir) / f).string(); };
    nlohmann::json summary;
    summary["config"] = to_json(rep.cfg);
    summary["initial_mean_convention"] = initial_mean_convention(rep.cfg.x0_frame);
    summary["run"] = {{"version", kVersion}, {"revision", run_metadata_revision()},
                      {"generated_unix", std::chrono::duration_cast<std::chrono::seconds>(
                                             std::chrono::system_clock::now().time_since_epoch()).count()}};
    summary["sequential"] = kSequentialNote;
    summary["log"] = rep.log;

    if (rep.has_reach) {
        std::ostringstream os;
        os << "k,method,lower,upper,note\n";
        for (const auto& r : rep.reach) os << r.k << "," << r.method << "," << fmt(r.lower) << "," << fmt(r.upper) << ",\n";
        for (int k = 1; k <= rep.cfg.N; ++k) os << k << ",sequential,,," << kSequentialNote << "\n";
        io::write_file(path("reach.csv"), os.str());
    }

    std::ostringstream tim;
    tim << "trial,seed,identification_s,predictors_s,em_iterations,ellipsoidal_solve_s,proposed_solve_s\n";
    for (const auto& o : rep.trials) {
        tim << o.index << "," << o.seed << "," << fmt(o.t_identify) << "," << fmt(o.t_predictors) << ","
            << o.em_iterations << "," << (o.ellipsoidal.attempted ? fmt(o.ellipsoidal.wall_time) : "") << ","
            << (o.proposed.attempted ? fmt(o.proposed.wall_time) : "") << "\n";
    }
    io::write_file(path("timings.csv"), tim.str());

    if (rep.has_control) {
        std::ostringstream fe, vi, vs, co;
        fe << "method,trials,excluded,feasible,feasible_pct,infeasible,max_iterations,numerical_failure,unverified,note\n";
        vi << "method,trials,rollouts_per_trial,max_violation_pct,worst_k,worst_j,mean_trial_max_pct,note\n";
        vs << "method,k,violation_pct\n";
        nlohmann::json jt = nlohmann::json::object();
        fe << "sequential,,,,,,,,," << kSequentialNote << "\n";
        vi << "sequential,,,,,,," << kSequentialNote << "\n";
        auto emit_violation = [&](const std::string& name, const ViolationSummary& s) {
            vi << name << "," << s.trials << "," << s.rollouts_per_trial << "," << fmt(s.max_pct) << "," << s.worst_k << ","
               << s.worst_j << "," << fmt(s.mean_trial_max_pct) << ",\n";
            for (std::size_t k = 0; k < s.per_step_pct.size(); ++k)
                vs << name << "," << k + 1 << "," << fmt(s.per_step_pct[k]) << "\n";
        };
        if (rep.nominal.attempted) {
            const auto s = summarize_violation({&rep.nominal}, rep.cfg.N);
            fe << "nominal_true_model,1,0," << (rep.nominal.feasible() ? 1 : 0) << ","
               << (rep.nominal.feasible() ? "100" : "0") << ",,,,,idealized baseline solved once\n";
            emit_violation("nominal_true_model", s);
            jt["nominal_true_model"] = {{"solve_s", rep.nominal.wall_time}};
        }
        for (Method m : {Method::Ellipsoidal, Method::Proposed}) {
            const auto f = summarize_feasibility(rep, m);
            if (f.trials == 0) continue;
            fe << to_string(m) << "," << f.trials << "," << f.excluded << "," << f.feasible << "," << fmt(f.pct) << ","
               << f.infeasible << "," << f.max_iterations << "," << f.numerical << "," << f.unverified << ",\n";
            emit_violation(to_string(m), summarize_violation(records_of(rep, m), rep.cfg.N));
            jt[to_string(m)] = {{"mean_solve_s", f.mean_solve_s}, {"max_solve_s", f.max_solve_s}};
        }
        io::write_file(path("feasibility.csv"), fe.str());
        io::write_file(path("violation.csv"), vi.str());
        io::write_file(path("violation_steps.csv"), vs.str());
        summary["solve_times"] = jt;

        co << "method,k,j,c_p,c_eps,c_p_tilde,cone_scale,d_kj,f,rhs\n";
        for (const auto& r : rep.constants)
            co << r.method << "," << r.k << "," << r.j << "," << fmt(r.c_p) << "," << fmt(r.c_eps) << "," << fmt(r.c_p_tilde)
               << "," << fmt(r.scale) << "," << fmt(r.d_kj) << "," << fmt(r.f) << "," << fmt(r.rhs) << "\n";
        io::write_file(path("constants.csv"), co.str());
    }

    double id_sum = 0.0, msp_sum = 0.0;
    int n_ok = 0;
    for (const auto& o : rep.trials)
        if (o.ok) {
            id_sum += o.t_identify;
            msp_sum += o.t_predictors;
            ++n_ok;
        }
    summary["timings"] = {{"mean_identification_s", n_ok ? id_sum / n_ok : 0.0},
                          {"mean_predictors_s", n_ok ? msp_sum / n_ok : 0.0},
                          {"trials_ok", n_ok}};
    io::write_file(path("summary.json"), summary.dump(2) + "\n");
}

} // namespace smpc
