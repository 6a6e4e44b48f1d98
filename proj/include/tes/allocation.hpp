#pragma once

#include "tes/market.hpp"

#include <Eigen/Dense>

#include <vector>

namespace tes {

enum class TradeGroup { Idle, Importer, Exporter };

std::string_view to_string(TradeGroup group);

// Below this magnitude (kW) a bus neither imports nor exports.
inline constexpr double kIdleKw = 1e-6;

struct ContributionRates {
    std::vector<double> rate;  // share of the bus within its group, 0 for idle buses
    std::vector<TradeGroup> group;
};

// Shares of each bus in the traded quantity of its group: importers (q > 0)
// are normalised among importers, exporters among exporters. Throws
// EmptyTradingStep when every bus is idle.
ContributionRates contribution_rates(const std::vector<double>& quantity);

// All tables are steps x buses and in $, except where noted.
struct AllocationResult {
    Eigen::VectorXd price;         // pi*, $/kWh
    std::vector<bool> pooled;      // false where nobody traded inside the pool
    Eigen::MatrixXd rate;          // contribution rate
    Eigen::MatrixXd pool_energy;   // kWh each bus settles inside the pool (negative = sold)
    Eigen::MatrixXd payment;       // delta*: intra-pool transfer at pi*
    Eigen::MatrixXd cost;          // C-tilde with delta* in place of the stage-2 transfer
    Eigen::MatrixXd profit;        // baseline - cost
    Eigen::MatrixXd unit_profit;   // $/kWh, gain over the utility per kWh settled
    std::vector<std::vector<TradeGroup>> group;  // [step][bus]
};

// Pools the stage-2 transfers of the importers and re-prices every traded kWh
// at the single price that pool buys. The part of each settlement that faces
// the utility stays at utility prices. Transfers are redistributed within
// each group, never between groups. Steps without two-sided trade pass
// through unchanged with pi* set to the utility price on the pool's side.
AllocationResult allocate(const Scenario& s, const StageTwoResult& trading);

struct FairnessReport {
    Eigen::VectorXd importer_spread;  // max - min unit profit per step, $/kWh
    Eigen::VectorXd exporter_spread;
};

FairnessReport fairness_metrics(const AllocationResult& alloc);

}  // namespace tes
