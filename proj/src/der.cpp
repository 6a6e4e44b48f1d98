#include <algorithm>
#include "tes/der.hpp"

#include "tes/error.hpp"

#include <cmath>

namespace tes {

void BatterySpec::validate() const {
    if (!(capacity > 0.0 && p_charge_max > 0.0 && p_discharge_max > 0.0)) {
        throw Error(ErrorCode::ConfigInvalid, "battery capacity and power limits must be positive");
    }
    if (!(0.0 < soc_min && soc_min < soc_max && soc_max <= 1.0)) {
        throw Error(ErrorCode::ConfigInvalid, "battery SoC range must satisfy 0 < min < max <= 1");
    }
    if (!(eta_charge > 0.0 && eta_charge <= 1.0 && eta_discharge > 0.0 && eta_discharge <= 1.0)) {
        throw Error(ErrorCode::ConfigInvalid, "battery efficiencies must lie in (0, 1]");
    }
    if (!(initial_soc >= soc_min && initial_soc <= soc_max)) {
        throw Error(ErrorCode::ConfigInvalid, "battery initial SoC outside its range");
    }
    if (degradation_cost < 0.0) {
        throw Error(ErrorCode::ConfigInvalid, "battery degradation cost must be nonnegative");
    }
}

void DGSpec::validate() const {
    if (!(0.0 <= p_min && p_min <= p_max)) {
        throw Error(ErrorCode::ConfigInvalid, "DG limits must satisfy 0 <= p_min <= p_max");
    }
    if (a < 0.0) throw Error(ErrorCode::ConfigInvalid, "DG quadratic coefficient must be >= 0");
    if (!(on_threshold > 0.0)) throw Error(ErrorCode::ConfigInvalid, "DG on-threshold must be > 0");
}

void REProfile::validate() const {
    for (double v : available) {
        if (!(v >= 0.0)) throw Error(ErrorCode::ConfigInvalid, "renewable profile must be >= 0");
    }
}

void PriceSchedule::validate() const {
    if (buy.size() != sell.size()) {
        throw Error(ErrorCode::WrongLength, "buy and sell schedules differ in length");
    }
    for (std::size_t t = 0; t < buy.size(); ++t) {
        if (!(sell[t] >= 0.0 && sell[t] <= buy[t])) {
            throw Error(ErrorCode::ConfigInvalid,
                        "price schedule needs 0 <= u_s <= u_b at step " + std::to_string(t + 1));
        }
    }
}

double battery_step(double energy, double p_battery, double dt, const BatterySpec& spec) {
    const double limit = p_battery >= 0.0 ? spec.p_discharge_max : spec.p_charge_max;
    if (std::abs(p_battery) > limit) {
        throw Error(ErrorCode::RateLimitExceeded,
                    std::to_string(std::abs(p_battery)) + " kW > " + std::to_string(limit) + " kW");
    }
    const double next = p_battery >= 0.0 ? energy - spec.eta_discharge * p_battery * dt
                                          : energy - spec.eta_charge * p_battery * dt;
    const double soc = next / spec.capacity;
    if (soc < spec.soc_min - 1e-12 || soc > spec.soc_max + 1e-12) {
        throw Error(ErrorCode::SocOutOfRange, "SoC " + std::to_string(soc) + " after step");
    }
    return next;
}

LimitCheck battery_limits_ok(double energy, double p_battery, const BatterySpec& spec) {
    LimitCheck out;
    const double soc = energy / spec.capacity;
    if (soc < spec.soc_min || soc > spec.soc_max) {
        out.ok = false;
        out.findings.push_back("SocOutOfRange: " + std::to_string(soc));
    }
    const double limit = p_battery < 0.0 ? spec.p_charge_max : spec.p_discharge_max;
    if (std::abs(p_battery) > limit) {
        out.ok = false;
        out.findings.push_back("RateLimitExceeded: |P_b| = " + std::to_string(std::abs(p_battery)) +
                               " kW > " + std::to_string(limit) + " kW");
    }
    return out;
}

double battery_cost(double p_battery, double dt, const BatterySpec& spec) {
    return spec.degradation_cost * std::abs(p_battery) * dt;
}

namespace {

// Share of the fixed cost at output p: 6u^5 - 15u^4 + 10u^3 with u = p / threshold.
double phase_in(double p, double th, int order) {
    const double u = std::clamp(p / th, 0.0, 1.0);
    switch (order) {
        case 0: return u * u * u * (10.0 + u * (-15.0 + 6.0 * u));
        case 1: return 30.0 * u * u * (1.0 - u) * (1.0 - u) / th;
        default: return 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u) / (th * th);
    }
}

}  // namespace

double dg_cost_unchecked(double p_dg, const DGSpec& spec) {
    return spec.a * p_dg * p_dg + spec.b * p_dg + spec.c * phase_in(p_dg, spec.on_threshold, 0);
}

double dg_cost(double p_dg, const DGSpec& spec) {
    if (p_dg < spec.p_min - 1e-9 || p_dg > spec.p_max + 1e-9) {
        throw Error(ErrorCode::DispatchOutOfRange, std::to_string(p_dg) + " kW");
    }
    return dg_cost_unchecked(p_dg, spec);
}

double dg_cost_derivative(double p_dg, const DGSpec& spec) {
    return 2.0 * spec.a * p_dg + spec.b + spec.c * phase_in(p_dg, spec.on_threshold, 1);
}

double dg_cost_curvature(double p_dg, const DGSpec& spec) {
    return 2.0 * spec.a + spec.c * phase_in(p_dg, spec.on_threshold, 2);
}

double import_cost(double p_import, double price, double dt) { return p_import * price * dt; }

double loss_cost(double p_loss, double price, double dt) {
    if (p_loss < 0.0) throw Error(ErrorCode::NegativeLoss, std::to_string(p_loss) + " kW");
    return p_loss * price * dt;
}

CostBreakdown bus_total_cost(double imported, double battery, double dg, double loss) {
    return {imported, battery, dg, loss, imported + battery + dg + loss};
}

double bus_power_balance_residual(double load, double p_import, double p_battery, double p_dg,
                                  double p_re) {
    return load - (p_import + p_battery + p_dg + p_re);
}

}  // namespace tes
