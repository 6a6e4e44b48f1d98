#pragma once

#include "tes/scenario.hpp"

#include <string>
#include <vector>

namespace tes {

// Writes voltages.csv, dispatch.csv, prices.csv, cashflow.csv, profits.csv,
// summary.csv and manifest.json into dir (created if needed). Numbers carry 9
// significant digits; the same bundle always gives the same bytes. Throws
// IoFailure.
std::vector<std::string> emit_reports(const ResultsBundle& bundle, const std::string& dir);

struct CheckOptions {
    double zero_sum_tol = 1e-6;         // $ per step, plus print rounding
    double price_tol = 1e-9;            // $/kWh
    double exporter_spread_tol = 1e-6;  // $/kWh
    double importer_spread_tol = 1e-3;
    double conservation_tol = 1e-6;     // $ per step, plus print rounding
    double voltage_tol = 1e-6;          // pu
};

struct CheckFinding {
    std::string file;
    std::string what;
};

// Re-reads an emitted results directory and re-asserts the market invariants
// from the files alone: zero-sum transfers, the price box, fairness spreads,
// conservation of profit by the allocation and the voltage band.
std::vector<CheckFinding> check_reports(const std::string& dir, const CheckOptions& opts = {});

}  // namespace tes
