#pragma once

// Test-only reference computations. Nothing here calls into the library's
// numerical paths; they exist to check them.

#include "tes/der.hpp"
#include "tes/network.hpp"

#include <complex>
#include <vector>

namespace oracle {

struct SweepSolution {
    std::vector<std::complex<double>> voltage;  // pu, slack = 1
    double total_loss_kw = 0.0;
    int iterations = 0;
};

// Backward/forward sweep with constant-power loads on a radial feeder.
// `p_kw`, `q_kvar` are net injections (negative for loads) per bus position.
SweepSolution backward_forward_sweep(const tes::Network& net, const std::vector<double>& p_kw,
                                     const std::vector<double>& q_kvar, double tol = 1e-13,
                                     int max_iter = 500);

// Loads of the network as injections (-Pd, -Qd).
void base_injections(const tes::Network& net, std::vector<double>& p_kw, std::vector<double>& q_kvar);

struct BatteryPlan {
    double cost = 0.0;               // $ over the horizon
    std::vector<double> p_battery;  // kW per step, positive discharges
    std::vector<double> energy;     // kWh after each step
};

// Cheapest schedule for one battery at bus 2 of a two-bus feeder, by dynamic
// programming over stored energy on a 1%-of-capacity lattice. Each step pays
// imports at u_b, is paid u_s for exports, pays the branch loss at u_b and
// the degradation fee. The reactive output within +-q_limit is chosen per
// step to minimise the loss.
BatteryPlan two_bus_battery_search(const tes::Network& net, const std::vector<double>& load_p,
                                   const std::vector<double>& load_q, const std::vector<double>& u_b,
                                   const std::vector<double>& u_s, double dt, const tes::BatterySpec& bat,
                                   double q_limit);

}  // namespace oracle
