#pragma once

#include "tes/der.hpp"
#include "tes/network.hpp"
#include "tes/nlp.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace tes {

// Devices installed at one bus. Any subset may be present.
struct DeviceSet {
    std::optional<BatterySpec> battery;
    std::optional<DGSpec> dg;
    std::optional<REProfile> re;

    bool any() const { return battery || dg || re; }
    // Largest real output the bus can produce, kW.
    double real_capacity() const;
};

struct Scenario {
    Network network;
    std::vector<DeviceSet> devices;  // one per bus position
    Eigen::MatrixXd load_p;          // steps x buses, kW
    Eigen::MatrixXd load_q;          // steps x buses, kvar
    PriceSchedule prices;
    int steps = 0;
    double dt = 0.5;  // h

    double v_min = 0.95;
    double v_max = 1.05;
    double reactive_ratio = 0.6;  // |Q| <= ratio * real capacity at DER buses

    // money rows are scaled so one unit is base_kw * dt / 100 dollars, so
    // equality and inequality tolerances are tight. A small starting barrier keeps warm
    // starts near the point they came from.
    NlpOptions solver{1e-8, 1e-8, 1e-6, 500, 1e-4, false};
    int starts = 3;
    unsigned seed = 7;

    void validate() const;
};

enum class Stage { Baseline, Trading };

std::string_view to_string(Stage stage);

// All tables are steps x buses. Powers kW, energies kWh, voltages pu.
struct DispatchSolution {
    Stage stage = Stage::Baseline;
    Eigen::MatrixXd p_import;   // P_im, signed (negative = export)
    Eigen::MatrixXd p_charge;   // >= 0
    Eigen::MatrixXd p_discharge;
    Eigen::MatrixXd energy;     // stored energy at the end of each step
    Eigen::MatrixXd p_dg;
    Eigen::MatrixXd p_re;       // renewable actually used
    Eigen::MatrixXd q_gen;      // reactive output of DER buses
    Eigen::MatrixXd e, f;
    Eigen::MatrixXd p_loss;     // participant loss share
    Eigen::VectorXd slack_p;    // kW drawn from the utility (negative = sold back)
    Eigen::VectorXd slack_q;
    SolveReport report;         // iterates and log stripped

    Eigen::MatrixXd p_battery() const { return p_discharge - p_charge; }
    double voltage(int t, int i) const;
};

struct CostTable {
    Eigen::MatrixXd imported, battery, dg, loss, total;  // $, steps x buses
};

struct StageOneResult {
    DispatchSolution dispatch;
    CostTable costs;  // C-bar*: the no-trading reference
};

struct TradeOutcome {
    Eigen::MatrixXd price;          // pi_i, $/kWh
    Eigen::MatrixXd settlement;     // (P_im + P_l) * pi * dt: what the bus pays in total
    Eigen::MatrixXd utility_share;  // part of the settlement passed through to the utility
    Eigen::MatrixXd payment;        // delta_i: intra-pool transfer (negative = incentive)
    Eigen::MatrixXd cost;           // C-tilde
    Eigen::MatrixXd baseline;       // C-bar*
    Eigen::MatrixXd profit;         // baseline - cost
    Eigen::VectorXd utility_bill;   // what the pool pays the utility per step, $
};

struct StageTwoResult {
    DispatchSolution dispatch;
    CostTable costs;
    TradeOutcome trade;
};

// Loss share of each bus: half of every adjacent branch, except that branches
// touching the slack charge their whole loss to the other end. The shares of
// all non-slack buses then add up to the total network loss.
Eigen::VectorXd participant_losses(const Network& net, const AdmittanceTable& adm,
                                   const std::vector<double>& e, const std::vector<double>& f);

NlpProblem build_stage1(const Scenario& s);
StageOneResult solve_stage1(const Scenario& s);

NlpProblem build_stage2(const Scenario& s, const CostTable& baseline);
StageTwoResult solve_stage2(const Scenario& s, const StageOneResult& baseline);

double profit(double baseline_cost, double trading_cost);

// Per-step sum of what buses pay at utility prices (u_b on imports and losses,
// u_s on exports) minus what the utility is owed for the energy metered at the
// slack.
Eigen::VectorXd cash_flow_imbalance(const Scenario& s, const DispatchSolution& baseline);

// Splits each settlement into the part that passes through to the utility and
// the intra-pool transfer. The side of the pool that faces the utility carries
// the utility exchange pro rata to its traded energy.
void split_settlement(const Scenario& s, const DispatchSolution& d, TradeOutcome& trade);

}  // namespace tes
