#pragma once

#include <string>
#include <vector>

namespace tes {

// Defaults are the standard simulation parameters. Energies in kWh, powers in kW, money in $.
struct BatterySpec {
    double capacity = 1000.0;
    double eta_charge = 0.9;
    double eta_discharge = 0.9;
    double soc_min = 0.4;
    double soc_max = 0.9;
    double p_charge_max = 500.0;
    double p_discharge_max = 500.0;
    double degradation_cost = 0.1;  // $/kWh throughput
    double initial_soc = 0.5;

    void validate() const;
    double energy_min() const { return soc_min * capacity; }
    double energy_max() const { return soc_max * capacity; }
    double initial_energy() const { return initial_soc * capacity; }
};

struct DGSpec {
    double p_min = 0.0;
    double p_max = 1000.0;
    double a = 2.45e-5;   // $/kWh^2
    double b = 0.1833;    // $/kWh
    double c = 26.235;    // $
    // Below this output (kW) the fixed cost c is phased in smoothly. Narrow
    // windows put very large curvature on the cost near zero output.
    double on_threshold = 50.0;

    void validate() const;
};

struct REProfile {
    std::vector<double> available;  // kW per step

    void validate() const;
};

struct PriceSchedule {
    std::vector<double> buy;   // u_b, $/kWh
    std::vector<double> sell;  // u_s, $/kWh

    std::size_t size() const { return buy.size(); }
    void validate() const;
};

struct CostBreakdown {
    double imported = 0.0;
    double battery = 0.0;
    double dg = 0.0;
    double loss = 0.0;
    double total = 0.0;
};

// Stored energy after one step. Positive power discharges.
//   discharge: E - eta_d * P * dt
//   charge:    E + eta_c * |P| * dt
double battery_step(double energy, double p_battery, double dt, const BatterySpec& spec);

struct LimitCheck {
    bool ok = true;
    std::vector<std::string> findings;
};

LimitCheck battery_limits_ok(double energy, double p_battery, const BatterySpec& spec);

double battery_cost(double p_battery, double dt, const BatterySpec& spec);

// Quadratic fuel cost a P^2 + b P + c, with c phased in on [0, on_threshold]
// by a smootherstep so an idle unit costs nothing and the cost stays twice
// differentiable. Throws DispatchOutOfRange outside the limits.
double dg_cost(double p_dg, const DGSpec& spec);
// First and second derivatives of dg_cost. Neither checks the limits.
double dg_cost_derivative(double p_dg, const DGSpec& spec);
double dg_cost_curvature(double p_dg, const DGSpec& spec);
// dg_cost without the range check, for solvers probing near the bounds.
double dg_cost_unchecked(double p_dg, const DGSpec& spec);

double import_cost(double p_import, double price, double dt);

double loss_cost(double p_loss, double price, double dt);

CostBreakdown bus_total_cost(double imported, double battery, double dg, double loss);

double bus_power_balance_residual(double load, double p_import, double p_battery, double p_dg,
                                  double p_re);

}  // namespace tes
