#include "tes/allocation.hpp"

#include "tes/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tes {

std::string_view to_string(TradeGroup group) {
    switch (group) {
        case TradeGroup::Importer: return "importer";
        case TradeGroup::Exporter: return "exporter";
        case TradeGroup::Idle: break;
    }
    return "idle";
}

ContributionRates contribution_rates(const std::vector<double>& quantity) {
    ContributionRates out;
    out.rate.assign(quantity.size(), 0.0);
    out.group.assign(quantity.size(), TradeGroup::Idle);
    double imports = 0.0, exports = 0.0;
    for (std::size_t i = 0; i < quantity.size(); ++i) {
        if (quantity[i] > kIdleKw) {
            out.group[i] = TradeGroup::Importer;
            imports += quantity[i];
        } else if (quantity[i] < -kIdleKw) {
            out.group[i] = TradeGroup::Exporter;
            exports -= quantity[i];
        }
    }
    if (imports == 0.0 && exports == 0.0) throw Error(ErrorCode::EmptyTradingStep, "every bus is idle");
    for (std::size_t i = 0; i < quantity.size(); ++i) {
        if (out.group[i] == TradeGroup::Importer) out.rate[i] = quantity[i] / imports;
        if (out.group[i] == TradeGroup::Exporter) out.rate[i] = -quantity[i] / exports;
    }
    return out;
}

AllocationResult allocate(const Scenario& s, const StageTwoResult& trading) {
    const auto& d = trading.dispatch;
    const auto& tr = trading.trade;
    const auto T = d.p_import.rows(), N = d.p_import.cols();
    AllocationResult out;
    out.price = Eigen::VectorXd::Zero(T);
    out.pooled.assign(static_cast<std::size_t>(T), false);
    out.rate = out.pool_energy = out.payment = out.unit_profit = Eigen::MatrixXd::Zero(T, N);
    out.group.assign(static_cast<std::size_t>(T), std::vector<TradeGroup>(static_cast<std::size_t>(N), TradeGroup::Idle));

    for (Eigen::Index t = 0; t < T; ++t) {
        const auto k = static_cast<std::size_t>(t);
        const double ub = s.prices.buy[k], us = s.prices.sell[k];
        std::vector<double> q(static_cast<std::size_t>(N), 0.0);
        double imports = 0.0, exports = 0.0;
        for (Eigen::Index i = 1; i < N; ++i) {
            q[static_cast<std::size_t>(i)] = d.p_import(t, i) + d.p_loss(t, i);
            if (q[static_cast<std::size_t>(i)] > kIdleKw) imports += q[static_cast<std::size_t>(i)];
            if (q[static_cast<std::size_t>(i)] < -kIdleKw) exports -= q[static_cast<std::size_t>(i)];
        }
        const double net = imports - exports;
        out.price(t) = net >= 0.0 ? ub : us;
        if (imports == 0.0 && exports == 0.0) continue;

        const auto rates = contribution_rates(q);
        out.group[k] = rates.group;
        // whichever side outweighs the other buys or sells the difference
        // from the utility, pro rata, so only the rest is settled in the pool
        const double keep_in = net > 0.0 ? 1.0 - net / imports : 1.0;
        const double keep_out = net < 0.0 ? 1.0 + net / exports : 1.0;
        double pool = 0.0, paid_out = 0.0, pool_kwh = 0.0;
        for (Eigen::Index i = 1; i < N; ++i) {
            const auto g = rates.group[static_cast<std::size_t>(i)];
            out.rate(t, i) = rates.rate[static_cast<std::size_t>(i)];
            const double keep = g == TradeGroup::Importer ? keep_in : keep_out;
            out.pool_energy(t, i) = g == TradeGroup::Idle ? 0.0 : q[static_cast<std::size_t>(i)] * keep * s.dt;
            if (g == TradeGroup::Importer) {
                pool += tr.payment(t, i);
                pool_kwh += out.pool_energy(t, i);
            }
            if (g == TradeGroup::Exporter) paid_out -= tr.payment(t, i);
        }

        out.pooled[k] = imports > 0.0 && exports > 0.0;
        if (!out.pooled[k]) {
            out.payment.row(t) = tr.payment.row(t);
            continue;
        }
        if (!(pool_kwh > 0.0)) throw Error(ErrorCode::ZeroTradedEnergy, "step " + std::to_string(t));
        const double pi = pool / pool_kwh;
        const double slack = 1e-9 * std::max(1.0, ub);
        if (pi < us - slack || pi > ub + slack) {
            throw Error(ErrorCode::PriceOutOfBounds,
                        "step " + std::to_string(t) + ": " + std::to_string(pi) + " $/kWh");
        }
        out.price(t) = std::clamp(pi, us, ub);
        for (Eigen::Index i = 1; i < N; ++i) {
            const auto g = rates.group[static_cast<std::size_t>(i)];
            if (g == TradeGroup::Importer) out.payment(t, i) = out.rate(t, i) * pool;
            // each group keeps its own total, so whatever residual the stage-2
            // balance left is carried through rather than moved between groups
            if (g == TradeGroup::Exporter) out.payment(t, i) = -out.rate(t, i) * paid_out;
        }
    }

    out.cost = trading.costs.total - tr.payment + out.payment;
    out.profit = tr.baseline - out.cost;
    for (Eigen::Index t = 0; t < T; ++t) {
        const auto k = static_cast<std::size_t>(t);
        for (Eigen::Index i = 1; i < N; ++i) {
            const double q = d.p_import(t, i) + d.p_loss(t, i);
            const auto g = out.group[k][static_cast<std::size_t>(i)];
            if (g == TradeGroup::Idle) continue;
            const double ref = q * (g == TradeGroup::Importer ? s.prices.buy[k] : s.prices.sell[k]) * s.dt;
            const double paid = tr.utility_share(t, i) + out.payment(t, i);
            out.unit_profit(t, i) = (ref - paid) / (std::abs(q) * s.dt);
        }
    }
    return out;
}

FairnessReport fairness_metrics(const AllocationResult& alloc) {
    const auto T = alloc.unit_profit.rows(), N = alloc.unit_profit.cols();
    FairnessReport out;
    out.importer_spread = out.exporter_spread = Eigen::VectorXd::Zero(T);
    for (Eigen::Index t = 0; t < T; ++t) {
        const auto& groups = alloc.group[static_cast<std::size_t>(t)];
        for (auto [which, spread] : {std::pair{TradeGroup::Importer, &out.importer_spread},
                                     std::pair{TradeGroup::Exporter, &out.exporter_spread}}) {
            double lo = std::numeric_limits<double>::infinity(), hi = -lo;
            for (Eigen::Index i = 0; i < N; ++i) {
                if (groups[static_cast<std::size_t>(i)] != which) continue;
                lo = std::min(lo, alloc.unit_profit(t, i));
                hi = std::max(hi, alloc.unit_profit(t, i));
            }
            (*spread)(t) = hi >= lo ? hi - lo : 0.0;
        }
    }
    return out;
}

}  // namespace tes
