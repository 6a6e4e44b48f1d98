#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace oracle {

void base_injections(const tes::Network& net, std::vector<double>& p_kw, std::vector<double>& q_kvar) {
    p_kw.assign(net.size(), 0.0);
    q_kvar.assign(net.size(), 0.0);
    for (std::size_t i = 0; i < net.size(); ++i) {
        p_kw[i] = -net.buses[i].base_load_p;
        q_kvar[i] = -net.buses[i].base_load_q;
    }
}

SweepSolution backward_forward_sweep(const tes::Network& net, const std::vector<double>& p_kw,
                                     const std::vector<double>& q_kvar, double tol, int max_iter) {
    using cd = std::complex<double>;
    const std::size_t n = net.size();
    const double base = net.base_mva * 1000.0;

    // orient the tree from bus 1 by breadth-first search
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> adj(n);
    for (std::size_t k = 0; k < net.branches.size(); ++k) {
        const auto a = static_cast<std::size_t>(net.branches[k].from_bus - 1);
        const auto b = static_cast<std::size_t>(net.branches[k].to_bus - 1);
        adj[a].push_back({b, k});
        adj[b].push_back({a, k});
    }
    std::vector<long> parent(n, -1), parent_branch(n, -1);
    std::vector<std::size_t> order{0};
    std::vector<bool> seen(n, false);
    seen[0] = true;
    for (std::size_t h = 0; h < order.size(); ++h) {
        for (auto [nb, k] : adj[order[h]]) {
            if (seen[nb]) continue;
            seen[nb] = true;
            parent[nb] = static_cast<long>(order[h]);
            parent_branch[nb] = static_cast<long>(k);
            order.push_back(nb);
        }
    }
    if (order.size() != n) throw std::runtime_error("sweep oracle needs a connected tree");

    std::vector<cd> v(n, cd(1.0, 0.0));
    std::vector<cd> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = cd(p_kw[i], q_kvar[i]) / base;

    SweepSolution out;
    for (int it = 0; it < max_iter; ++it) {
        // backward: branch current into each subtree
        std::vector<cd> j(n, cd(0.0, 0.0));
        for (std::size_t h = n; h-- > 1;) {
            const auto i = order[h];
            j[i] += -std::conj(s[i] / v[i]);  // current drawn by the bus
            j[static_cast<std::size_t>(parent[i])] += j[i];
        }
        // forward: voltage drops along each branch
        double delta = 0.0;
        for (std::size_t h = 1; h < n; ++h) {
            const auto i = order[h];
            const auto& br = net.branches[static_cast<std::size_t>(parent_branch[i])];
            const cd z(br.r, br.x);
            const cd vn = v[static_cast<std::size_t>(parent[i])] - z * j[i];
            delta = std::max(delta, std::abs(vn - v[i]));
            v[i] = vn;
        }
        out.iterations = it + 1;
        if (delta < tol) break;
    }
    double loss = 0.0;
    for (const auto& br : net.branches) {
        const auto a = static_cast<std::size_t>(br.from_bus - 1);
        const auto b = static_cast<std::size_t>(br.to_bus - 1);
        const cd z(br.r, br.x);
        const cd i = (v[a] - v[b]) / z;
        loss += std::norm(i) * br.r;
    }
    out.voltage = v;
    out.total_loss_kw = loss * base;
    return out;
}

namespace {

// Loss of a two-bus feeder with net bus-2 demand p + jq, kW.
double branch_loss(const tes::Network& net, double p, double q) {
    const auto sol = backward_forward_sweep(net, {0.0, -p}, {0.0, -q});
    return sol.total_loss_kw;
}

double best_loss(const tes::Network& net, double p, double load_q, double q_limit) {
    double lo = load_q - q_limit, hi = load_q + q_limit;  // net reactive demand range
    for (int k = 0; k < 80; ++k) {
        const double a = lo + (hi - lo) / 3.0, b = hi - (hi - lo) / 3.0;
        if (branch_loss(net, p, a) < branch_loss(net, p, b)) hi = b;
        else lo = a;
    }
    return branch_loss(net, p, 0.5 * (lo + hi));
}

}  // namespace

BatteryPlan two_bus_battery_search(const tes::Network& net, const std::vector<double>& load_p,
                                   const std::vector<double>& load_q, const std::vector<double>& u_b,
                                   const std::vector<double>& u_s, double dt, const tes::BatterySpec& bat,
                                   double q_limit) {
    const std::size_t steps = load_p.size();
    const double unit = bat.capacity / 100.0;
    const int lo = static_cast<int>(std::lround(bat.soc_min * 100.0));
    const int hi = static_cast<int>(std::lround(bat.soc_max * 100.0));
    const int start = static_cast<int>(std::lround(bat.initial_soc * 100.0));
    const double inf = std::numeric_limits<double>::infinity();

    auto battery_power = [&](int from, int to) {
        const double de = (to - from) * unit;
        return de >= 0.0 ? -de / (bat.eta_charge * dt) : -de / (bat.eta_discharge * dt);
    };
    auto step_cost = [&](std::size_t t, double pb) {
        const double pim = load_p[t] - pb;
        const double loss = best_loss(net, pim, load_q[t], q_limit);
        const double trade = pim >= 0.0 ? u_b[t] * pim : u_s[t] * pim;
        return dt * (trade + u_b[t] * loss + bat.degradation_cost * std::abs(pb));
    };

    const auto width = static_cast<std::size_t>(hi - lo + 1);
    // the cost depends only on the step and the change in stored energy
    std::vector<std::vector<double>> cost_of(steps, std::vector<double>(2 * width - 1, inf));
    std::vector<std::vector<double>> value(steps + 1, std::vector<double>(width, inf));
    std::vector<std::vector<int>> from(steps + 1, std::vector<int>(width, -1));
    value[0][static_cast<std::size_t>(start - lo)] = 0.0;
    for (std::size_t t = 0; t < steps; ++t) {
        for (int a = lo; a <= hi; ++a) {
            const double here = value[t][static_cast<std::size_t>(a - lo)];
            if (here == inf) continue;
            for (int b = lo; b <= hi; ++b) {
                const double pb = battery_power(a, b);
                if (pb > bat.p_discharge_max || -pb > bat.p_charge_max) continue;
                double& c = cost_of[t][static_cast<std::size_t>(b - a + hi - lo)];
                if (c == inf) c = step_cost(t, pb);
                const double v = here + c;
                auto& slot = value[t + 1][static_cast<std::size_t>(b - lo)];
                if (v < slot) {
                    slot = v;
                    from[t + 1][static_cast<std::size_t>(b - lo)] = a;
                }
            }
        }
    }
    int end = start;
    for (int b = start; b <= hi; ++b)  // stored energy may not fall over the horizon
        if (value[steps][static_cast<std::size_t>(b - lo)] < value[steps][static_cast<std::size_t>(end - lo)]) end = b;

    BatteryPlan plan;
    plan.cost = value[steps][static_cast<std::size_t>(end - lo)];
    plan.p_battery.assign(steps, 0.0);
    plan.energy.assign(steps, 0.0);
    for (std::size_t t = steps; t > 0; --t) {
        const int prev = from[t][static_cast<std::size_t>(end - lo)];
        plan.p_battery[t - 1] = battery_power(prev, end);
        plan.energy[t - 1] = end * unit;
        end = prev;
    }
    return plan;
}

}  // namespace oracle
