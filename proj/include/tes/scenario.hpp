#pragma once

#include "tes/allocation.hpp"
#include "tes/error.hpp"
#include "tes/market.hpp"

#include <Eigen/Dense>

#include <map>
#include <string>
#include <vector>

namespace tes {

// A run as read from a key = value file. Relative paths are resolved against
// the directory of the config file.
struct RunConfig {
    std::string case_path;
    std::string load_profile;   // multiplier on the case loads per step
    std::string pv_profile;     // fraction of pv_peak_kw per step
    std::string price_profile;  // u_b, either per step or 24 hourly values
    int steps = 48;
    double dt = 0.5;
    double v_min = 0.95;
    double v_max = 1.05;
    double sell_ratio = 0.5;  // u_s = ratio * u_b

    BatterySpec battery;
    DGSpec dg;
    double pv_peak_kw = 1000.0;
    // bus ids; empty lists fall back to the microgrid flags of the case
    std::vector<int> re_buses, battery_buses, dg_buses;

    NlpOptions solver = Scenario{}.solver;
    int starts = 3;
    unsigned seed = 7;
    std::string output_dir = "results";
    int verbosity = 1;

    // every key with the value it ended up with, in file syntax
    std::map<std::string, std::string> echo() const;
};

// Reads and validates a config. Missing keys keep their defaults, except that
// profiles default to the bundled synthetic day. Throws ConfigInvalid naming
// the offending key.
RunConfig load_config(const std::string& path);
RunConfig parse_config(const std::string& text, const std::string& base_dir);

// Two steps per hour: the hour's own price, then the mean of it and the next
// hour (wrapping at midnight). Selling price is half the buying price.
PriceSchedule derive_halfhour_prices(const std::vector<double>& hourly);

// A profile file holds one value per line, optionally preceded by its step
// index; '#' starts a comment.
std::vector<double> read_profile(const std::string& path);

Scenario build_scenario(const RunConfig& cfg);

// The first `steps` steps of a scenario. Throws WrongLength past its horizon.
Scenario truncate_horizon(const Scenario& s, int steps);

inline constexpr int kSchemaVersion = 1;

struct ResultsBundle {
    int schema_version = kSchemaVersion;
    RunConfig config;
    Scenario scenario;
    StageOneResult baseline;
    StageTwoResult trading;
    AllocationResult allocation;
    FairnessReport fairness;
    Eigen::VectorXd imbalance;  // no-trading cash-flow imbalance per step, $
    double seconds = 0.0;       // wall time of the three stages
};

// Stage 1, stage 2 and allocation in order. A stage that does not end Optimal
// aborts the run: InfeasibleScenario for an infeasible problem, SolverFailure
// otherwise, with the stage named in the message.
ResultsBundle run_scenario(const RunConfig& cfg);
ResultsBundle run_scenario(const RunConfig& cfg, const Scenario& s);

}  // namespace tes
