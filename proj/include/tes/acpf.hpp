#pragma once

#include "tes/network.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <string>
#include <vector>

namespace tes {

// Rectangular bus voltages for one time step, indexed by bus position.
struct VoltageState {
    std::vector<double> e;
    std::vector<double> f;

    static VoltageState flat(std::size_t n) { return {std::vector<double>(n, 1.0), std::vector<double>(n, 0.0)}; }
    double magnitude(std::size_t i) const;
};

// Net injections P^G - P^D and Q^G - Q^D per bus, kW / kvar.
struct InjectionSet {
    std::vector<double> p;
    std::vector<double> q;
};

struct BranchFlow {
    double p_from = 0.0;  // kW leaving the from-bus
    double q_from = 0.0;
    double p_to = 0.0;    // kW leaving the to-bus
    double q_to = 0.0;
    double current = 0.0;  // pu
    double loss() const { return p_from + p_to; }
};

struct FlowResult {
    std::vector<BranchFlow> branches;  // in network branch order
    std::vector<double> bus_loss;      // kW, half of each adjacent branch loss
    double total_loss = 0.0;           // kW
};

// Stacked residual [P_1..P_n, Q_1..Q_n] in kW/kvar:
// injection minus the power leaving each bus through the network.
Eigen::VectorXd pf_residuals(const Network& net, const AdmittanceTable& adm, const VoltageState& v,
                             const InjectionSet& inj);

// Network power leaving each bus, pu, stacked [P; Q].
Eigen::VectorXd bus_power_pu(const AdmittanceTable& adm, const VoltageState& v);

// d(pf_residuals)/d[e_1..e_n, f_1..f_n], kW per pu voltage.
Eigen::SparseMatrix<double> pf_jacobian(const Network& net, const AdmittanceTable& adm,
                                        const VoltageState& v);

struct NewtonOptions {
    double tolerance = 1e-8;  // pu mismatch, infinity norm
    int max_iterations = 50;
    int max_halvings = 6;
};

struct NewtonReport {
    int iterations = 0;
    double final_mismatch = 0.0;  // pu
    std::vector<double> mismatch_history;
};

struct NewtonResult {
    VoltageState voltage;
    NewtonReport report;
};

// Slack voltage fixed at 1 + j0; injections at the slack are ignored.
NewtonResult solve_newton_pf(const Network& net, const AdmittanceTable& adm, const InjectionSet& inj,
                             const NewtonOptions& opts = {});
// Same, warm-started from `start` (its slack entry is overwritten).
NewtonResult solve_newton_pf(const Network& net, const AdmittanceTable& adm, const InjectionSet& inj,
                             VoltageState start, const NewtonOptions& opts = {});

FlowResult branch_flows(const Network& net, const AdmittanceTable& adm, const VoltageState& v);

std::vector<double> bus_losses(const Network& net, const FlowResult& flows);

struct LimitBounds {
    std::vector<double> pg_min, pg_max;  // kW
    std::vector<double> qg_min, qg_max;  // kvar
    double v_min = 0.95;
    double v_max = 1.05;
};

struct LimitFinding {
    enum class Kind { VoltageLow, VoltageHigh, PgLow, PgHigh, QgLow, QgHigh };
    Kind kind;
    int bus_id;
    double magnitude;  // size of the violation in pu (voltage) or kW/kvar
};

// Generation here is P^G / Q^G per bus (not net of load). Empty bound vectors
// skip the corresponding check.
std::vector<LimitFinding> check_limits(const Network& net, const VoltageState& v,
                                       const InjectionSet& generation, const LimitBounds& bounds,
                                       double tolerance = 1e-9);

}  // namespace tes
