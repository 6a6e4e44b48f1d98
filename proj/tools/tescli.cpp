// Command-line front end for the market run and its helpers.

#include "tes/acpf.hpp"
#include "tes/report.hpp"
#include "tes/scenario.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>

using namespace tes;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kInfeasible = 3, kSolver = 4, kInvariant = 5 };

int exit_code(ErrorCode c) {
    switch (c) {
        case ErrorCode::ConfigInvalid:
        case ErrorCode::WrongLength:
        case ErrorCode::MalformedCase:
        case ErrorCode::NotRadial:
        case ErrorCode::DuplicateBusId:
        case ErrorCode::ZeroImpedanceBranch:
        case ErrorCode::RateLimitExceeded:
        case ErrorCode::SocOutOfRange:
            return kConfig;
        case ErrorCode::InfeasibleScenario: return kInfeasible;
        case ErrorCode::SolverFailure:
        case ErrorCode::Diverged:
        case ErrorCode::SingularJacobian:
            return kSolver;
        default: return kFailure;
    }
}

struct RunArgs {
    std::string config;
    std::string out;
    long long seed = -1;
    int steps = 0;
    double tol = 0.0;
};

int run(const RunArgs& a) {
    RunConfig cfg = load_config(a.config);
    if (!a.out.empty()) cfg.output_dir = a.out;
    if (a.seed >= 0) cfg.seed = static_cast<unsigned>(a.seed);
    if (a.tol > 0.0) cfg.solver.tol_eq = cfg.solver.tol_ineq = a.tol;
    Scenario s = build_scenario(cfg);
    if (a.steps > 0) {
        s = truncate_horizon(s, a.steps);
        cfg.steps = a.steps;
    }
    const auto bundle = run_scenario(cfg, s);
    const auto files = emit_reports(bundle, cfg.output_dir);
    const auto& r1 = bundle.baseline.dispatch.report;
    const auto& r2 = bundle.trading.dispatch.report;
    if (cfg.verbosity > 0) {
        std::printf("stage 1: %s, %d iterations, objective %.6g\n", std::string(to_string(r1.status)).c_str(),
                    r1.iterations, r1.objective);
        std::printf("stage 2: %s, %d iterations, objective %.6g\n", std::string(to_string(r2.status)).c_str(),
                    r2.iterations, r2.objective);
        std::printf("system profit: %.6f $ before allocation, %.6f $ after\n", bundle.trading.trade.profit.sum(),
                    bundle.allocation.profit.sum());
        std::printf("wall time: %.2f s\n", bundle.seconds);
        for (const auto& f : files) std::printf("wrote %s\n", f.c_str());
    }
    const auto findings = check_reports(cfg.output_dir);
    for (const auto& f : findings) std::fprintf(stderr, "warning: %s: %s\n", f.file.c_str(), f.what.c_str());
    return kOk;
}

int validate(const std::string& path) {
    const Network net = load_case_file(path);
    const auto findings = validate_radial(net);
    double p = 0.0, q = 0.0;
    int microgrids = 0;
    for (const auto& b : net.buses) {
        p += b.base_load_p;
        q += b.base_load_q;
        microgrids += b.is_microgrid;
    }
    std::printf("%zu buses, %zu branches, %d microgrid buses\n", net.size(), net.branches.size(), microgrids);
    std::printf("base %.6g MVA, %.6g kV; load %.6g kW, %.6g kvar\n", net.base_mva, net.base_kv, p, q);
    for (const auto& f : findings) std::printf("finding: %s\n", f.message.c_str());
    if (!findings.empty()) return kConfig;
    std::printf("radial: ok\n");
    return kOk;
}

int power_flow(const std::string& path, double tol) {
    const Network net = load_case_file(path);
    if (const auto f = validate_radial(net); !f.empty()) throw Error(ErrorCode::NotRadial, f.front().message);
    const auto adm = build_admittance(net);
    InjectionSet inj;
    for (const auto& b : net.buses) {
        inj.p.push_back(-b.base_load_p);
        inj.q.push_back(-b.base_load_q);
    }
    NewtonOptions opts;
    if (tol > 0.0) opts.tolerance = tol;
    const auto r = solve_newton_pf(net, adm, inj, opts);
    const auto flows = branch_flows(net, adm, r.voltage);
    std::size_t lo = 0;
    for (std::size_t i = 0; i < net.size(); ++i)
        if (r.voltage.magnitude(i) < r.voltage.magnitude(lo)) lo = i;
    std::printf("converged in %d iterations, mismatch %.3g pu\n", r.report.iterations, r.report.final_mismatch);
    std::printf("total loss %.4f kW\n", flows.total_loss);
    std::printf("minimum |V| %.6f pu at bus %d\n", r.voltage.magnitude(lo), net.buses[lo].id);
    std::printf("bus,v_pu,angle_deg\n");
    for (std::size_t i = 0; i < net.size(); ++i) {
        std::printf("%d,%.9g,%.9g\n", net.buses[i].id, r.voltage.magnitude(i),
                    std::atan2(r.voltage.f[i], r.voltage.e[i]) * 180.0 / M_PI);
    }
    return kOk;
}

int check(const std::string& dir, double tol) {
    CheckOptions opts;
    if (tol > 0.0) opts.zero_sum_tol = opts.conservation_tol = tol;
    const auto findings = check_reports(dir, opts);
    for (const auto& f : findings) std::printf("%s: %s\n", f.file.c_str(), f.what.c_str());
    if (!findings.empty()) {
        std::printf("%zu findings\n", findings.size());
        return kInvariant;
    }
    std::printf("all invariants hold\n");
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Three-stage transactive energy market on radial feeders"};
    app.require_subcommand(1);

    RunArgs ra;
    auto* run_cmd = app.add_subcommand("run", "solve both market stages, allocate and write reports");
    run_cmd->add_option("config", ra.config, "run config file")->required()->check(CLI::ExistingFile);
    run_cmd->add_option("--out", ra.out, "results directory (overrides the config)");
    run_cmd->add_option("--seed", ra.seed, "seed for the random solver starts")->check(CLI::NonNegativeNumber);
    run_cmd->add_option("--steps", ra.steps, "solve only the first N steps")->check(CLI::PositiveNumber);
    run_cmd->add_option("--tol", ra.tol, "solver feasibility tolerance")->check(CLI::PositiveNumber);

    std::string case_path;
    auto* validate_cmd = app.add_subcommand("validate", "parse a case file and check that it is radial");
    validate_cmd->add_option("case", case_path, "case file")->required();

    double pf_tol = 0.0;
    auto* pf_cmd = app.add_subcommand("pf", "Newton power flow at base loads");
    pf_cmd->add_option("case", case_path, "case file")->required();
    pf_cmd->add_option("--tol", pf_tol, "mismatch tolerance, pu")->check(CLI::PositiveNumber);

    std::string dir;
    double check_tol = 0.0;
    auto* check_cmd = app.add_subcommand("check", "re-verify the invariants of a results directory");
    check_cmd->add_option("results-dir", dir, "directory written by run")->required()->check(CLI::ExistingDirectory);
    check_cmd->add_option("--tol", check_tol, "zero-sum and conservation tolerance, $")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*run_cmd) return run(ra);
        if (*validate_cmd) return validate(case_path);
        if (*pf_cmd) return power_flow(case_path, pf_tol);
        if (*check_cmd) return check(dir, check_tol);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code(e.code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kFailure;
    }
    return kFailure;
}
