#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include <smpc/harness.hpp>

namespace fs = std::filesystem;
using namespace smpc;

namespace {

struct CommonArgs {
    std::string config;
    std::string out = "out";
    int trials = -1;
    long long seed = -1;
    int jobs = -1;
    double solver_tol = -1.0;
    int solver_max_iter = -1;
};

void add_common(CLI::App* sub, CommonArgs& a) {
    sub->add_option("--config", a.config, "experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--out", a.out, "output directory");
    sub->add_option("--trials", a.trials, "number of trials")->check(CLI::PositiveNumber);
    sub->add_option("--seed", a.seed, "base seed")->check(CLI::NonNegativeNumber);
    sub->add_option("--jobs", a.jobs, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--solver-tol", a.solver_tol, "interior-point tolerance")->check(CLI::PositiveNumber);
    sub->add_option("--solver-max-iter", a.solver_max_iter, "interior-point iteration cap")->check(CLI::PositiveNumber);
}

ExperimentConfig load(const CommonArgs& a) {
    ExperimentConfig c;
    if (!a.config.empty()) c = config_from_json(nlohmann::json::parse(io::read_file(a.config)));
    if (a.trials > 0) c.n_trials = a.trials;
    if (a.seed >= 0) c.base_seed = static_cast<std::uint64_t>(a.seed);
    if (a.jobs > 0) c.jobs = a.jobs;
    if (a.solver_tol > 0) c.solver.tol = a.solver_tol;
    if (a.solver_max_iter > 0) c.solver.max_iter = a.solver_max_iter;
    c.validate();
    return c;
}

void print_log(const StudyReport& rep) {
    for (const auto& l : rep.log) std::cerr << l << "\n";
}

int cmd_identify(const CommonArgs& a) {
    const ExperimentConfig c = load(a);
    const auto bundles        = run_pipeline(c);
    fs::create_directories(a.out);
    std::ostringstream tim;
    tim << "trial,seed,identification_s,predictors_s,em_iterations,em_converged,status\n";
    int ok = 0;
    for (const auto& b : bundles) {
        tim << b.index << "," << b.seed << "," << io::fmt(b.t_identify) << "," << io::fmt(b.t_predictors) << ","
            << b.em.iterations << "," << b.em.converged << "," << (b.ok ? "ok" : "excluded") << "\n";
        if (!b.ok) {
            std::cerr << "trial " << b.index << " excluded: " << b.failure << "\n";
            continue;
        }
        ++ok;
        char name[32];
        std::snprintf(name, sizeof name, "trial_%03d", b.index);
        const fs::path dir = fs::path(a.out) / name;
        fs::create_directories(dir);
        nlohmann::json model = io::to_json(b.em.model);
        model["init_mean"]   = io::vector_to_json(b.em.init.mean);
        model["init_cov"]    = io::to_json(b.em.init.cov);
        model["alignment"]   = io::to_json(b.align);
        io::write_file((dir / "model.json").string(), model.dump(2) + "\n");
        io::write_file((dir / "predictors.json").string(), io::to_json(b.predictors).dump() + "\n");
        io::write_file((dir / "trajectory.csv").string(), io::trajectory_csv(b.data));
    }
    io::write_file((fs::path(a.out) / "timings.csv").string(), tim.str());
    nlohmann::json summary = {{"config", to_json(c)}, {"trials_ok", ok},
                              {"run", {{"version", kVersion}, {"revision", run_metadata_revision()}}}};
    io::write_file((fs::path(a.out) / "summary.json").string(), summary.dump(2) + "\n");
    std::cout << "identified " << ok << "/" << c.n_trials << " trials into " << a.out << "\n";
    if (ok == 0) throw NumericalError("identify: every trial failed");
    return 0;
}

int cmd_reach(const CommonArgs& a) {
    const ExperimentConfig c = load(a);
    StudySelection sel;
    sel.reach   = true;
    sel.control = false;
    const StudyReport rep = run_study(c, sel);
    print_log(rep);
    write_report(rep, a.out);
    std::cout << "k,method,lower,upper\n";
    for (const auto& r : rep.reach) std::cout << r.k << "," << r.method << "," << io::fmt(r.lower) << "," << io::fmt(r.upper) << "\n";
    return 0;
}

int cmd_control(const CommonArgs& a, const std::string& method) {
    const ExperimentConfig c = load(a);
    StudySelection sel;
    sel.reach = false;
    if (method == "proposed") sel.methods = {Method::Proposed};
    else if (method == "ellipsoidal") sel.methods = {Method::Ellipsoidal};
    else sel.methods = {Method::Nominal};
    const StudyReport rep = run_study(c, sel);
    print_log(rep);
    write_report(rep, a.out);
    std::cout << io::read_file((fs::path(a.out) / "feasibility.csv").string())
              << io::read_file((fs::path(a.out) / "violation.csv").string());
    return 0;
}

int cmd_report(const CommonArgs& a) {
    const ExperimentConfig c = load(a);
    const StudyReport rep    = run_study(c, {});
    print_log(rep);
    write_report(rep, a.out);
    std::cout << "initial mean convention: " << initial_mean_convention(c.x0_frame) << "\n";
    std::cout << io::read_file((fs::path(a.out) / "feasibility.csv").string())
              << io::read_file((fs::path(a.out) / "violation.csv").string());
    std::cout << "report written to " << a.out << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Data-driven stochastic predictive control studies"};
    app.require_subcommand(1);
    CommonArgs identify_args, reach_args, control_args, report_args;
    std::string method = "proposed";

    auto* identify = app.add_subcommand("identify", "simulate data, run EM and fit multi-step predictors per trial");
    add_common(identify, identify_args);
    auto* reach = app.add_subcommand("reach", "probabilistic reachable sets under a constant input");
    add_common(reach, reach_args);
    auto* control = app.add_subcommand("control", "feasibility and violation study for one method");
    add_common(control, control_args);
    control->add_option("--method", method, "proposed | ellipsoidal | nominal")
        ->check(CLI::IsMember({"proposed", "ellipsoidal", "nominal"}));
    auto* report = app.add_subcommand("report", "all studies and report files");
    add_common(report, report_args);

    CLI11_PARSE(app, argc, argv);
    try {
        if (identify->parsed()) return cmd_identify(identify_args);
        if (reach->parsed()) return cmd_reach(reach_args);
        if (control->parsed()) return cmd_control(control_args, method);
        if (report->parsed()) return cmd_report(report_args);
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
