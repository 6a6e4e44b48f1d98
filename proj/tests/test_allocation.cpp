#include "tes/allocation.hpp"
#include "tes/error.hpp"

#include <doctest.h>

#include <cmath>

using namespace tes;

namespace {

// One step over buses given as (P_im, P_l, stage-2 price); bus 0 is the slack.
struct Step {
    double p_import, p_loss, price;
};

struct Toy {
    Scenario s;
    StageTwoResult r;
};

Toy toy(const std::vector<Step>& buses, double ub, double us, double dt) {
    Toy out;
    out.s.dt = dt;
    out.s.steps = 1;
    out.s.prices.buy = {ub};
    out.s.prices.sell = {us};
    const auto n = static_cast<Eigen::Index>(buses.size() + 1);
    auto& d = out.r.dispatch;
    d.p_import = d.p_loss = Eigen::MatrixXd::Zero(1, n);
    d.slack_p = Eigen::VectorXd::Zero(1);
    auto& tr = out.r.trade;
    tr.price = Eigen::MatrixXd::Zero(1, n);
    for (Eigen::Index i = 1; i < n; ++i) {
        const auto& b = buses[static_cast<std::size_t>(i - 1)];
        d.p_import(0, i) = b.p_import;
        d.p_loss(0, i) = b.p_loss;
        tr.price(0, i) = b.price;
        d.slack_p(0) += b.p_import + b.p_loss;
    }
    split_settlement(out.s, d, tr);
    out.r.costs.total = tr.settlement;
    tr.cost = tr.settlement;
    // a baseline that pays the utility for everything
    tr.baseline = Eigen::MatrixXd::Zero(1, n);
    for (Eigen::Index i = 1; i < n; ++i) {
        const double q = d.p_import(0, i) + d.p_loss(0, i);
        tr.baseline(0, i) = q * (q > 0.0 ? ub : us) * dt;
    }
    tr.profit = tr.baseline - tr.cost;
    return out;
}

}  // namespace

TEST_CASE("contribution_rates") {
    SUBCASE("importers share by volume") {
        const auto r = contribution_rates({0.0, 300.0, 100.0});
        CHECK(r.rate[1] == doctest::Approx(0.75));
        CHECK(r.rate[2] == doctest::Approx(0.25));
        CHECK(r.group[0] == TradeGroup::Idle);
        CHECK(r.rate[0] == 0.0);
    }
    SUBCASE("single exporter") {
        const auto r = contribution_rates({0.0, -50.0});
        CHECK(r.rate[1] == 1.0);
        CHECK(r.group[1] == TradeGroup::Exporter);
    }
    SUBCASE("groups normalise separately") {
        const auto r = contribution_rates({200.0, 200.0, -400.0});
        CHECK(r.rate[0] == 0.5);
        CHECK(r.rate[1] == 0.5);
        CHECK(r.rate[2] == 1.0);
    }
    SUBCASE("nobody trades") {
        CHECK_THROWS_AS(contribution_rates({0.0, 0.0}), Error);
        try {
            contribution_rates({0.0});
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::EmptyTradingStep);
        }
    }
}

TEST_CASE("allocate: balanced pool") {
    // importer 100 kW plus 2 kW of loss, exporter 102 kW, both at 0.1 $/kWh
    const Toy t = toy({{100.0, 2.0, 0.1}, {-102.0, 0.0, 0.1}}, 0.2, 0.05, 1.0);
    CHECK(t.r.trade.payment(0, 1) == doctest::Approx(10.2));
    CHECK(t.r.trade.payment(0, 2) == doctest::Approx(-10.2));
    const auto a = allocate(t.s, t.r);
    CHECK(a.pooled[0]);
    CHECK(a.price(0) == doctest::Approx(0.1));
    CHECK(a.payment(0, 1) == doctest::Approx(10.2));
    CHECK(a.payment(0, 2) == doctest::Approx(-10.2));
    CHECK(std::abs(a.payment.row(0).sum()) < 1e-12);
}

TEST_CASE("allocate: already uniform prices are left alone") {
    const Toy t = toy({{60.0, 1.0, 0.15}, {40.0, 0.5, 0.15}, {-101.5, 0.0, 0.15}}, 0.3, 0.1, 0.5);
    const auto a = allocate(t.s, t.r);
    CHECK(a.price(0) == doctest::Approx(0.15));
    for (Eigen::Index i = 1; i < 4; ++i) CHECK(a.payment(0, i) == doctest::Approx(t.r.trade.payment(0, i)));
}

TEST_CASE("allocate: unequal prices are pooled into one") {
    // the pool is short 50 kW, which the importers buy from the utility pro rata;
    // stage 2 balanced the transfers at three different prices
    const Toy t = toy({{120.0, 0.0, 0.28}, {30.0, 0.0, 0.12}, {-100.0, 0.0, 0.222}}, 0.3, 0.1, 1.0);
    const auto a = allocate(t.s, t.r);
    // the importers paid 120*0.28 + 30*0.12 = 37.2 $, of which 50 kWh at 0.3 went
    // to the utility; the remaining 22.2 $ bought the 100 kWh in the pool
    CHECK(a.price(0) == doctest::Approx(0.222));
    CHECK(a.pool_energy(0, 1) == doctest::Approx(80.0));
    CHECK(a.pool_energy(0, 2) == doctest::Approx(20.0));
    CHECK(a.pool_energy(0, 3) == doctest::Approx(-100.0));
    CHECK(a.payment(0, 1) == doctest::Approx(80.0 * 0.222));
    CHECK(a.payment(0, 3) == doctest::Approx(-22.2));
    CHECK(std::abs(a.payment.row(0).sum()) < 1e-12);
    CHECK(a.rate(0, 1) == doctest::Approx(0.8));
    // every kWh in the pool now clears at pi*
    for (Eigen::Index i = 1; i < 4; ++i) CHECK(a.payment(0, i) / a.pool_energy(0, i) == doctest::Approx(a.price(0)));
    CHECK(a.profit.sum() == doctest::Approx(t.r.trade.profit.sum()));

    const auto f = fairness_metrics(a);
    CHECK(f.importer_spread(0) < 1e-12);
    CHECK(f.exporter_spread(0) == 0.0);
    // importers save (u_b - pi*) on the pooled two thirds of their energy
    CHECK(a.unit_profit(0, 1) == doctest::Approx((0.3 - 0.222) * 2.0 / 3.0));
    CHECK(a.unit_profit(0, 3) == doctest::Approx(0.222 - 0.1));
}

TEST_CASE("allocate: a stage-2 balance residual stays where it was") {
    Toy t = toy({{120.0, 0.0, 0.28}, {30.0, 0.0, 0.12}, {-60.0, 0.0, 0.2}, {-40.0, 0.0, 0.25}}, 0.3, 0.1, 1.0);
    // as if the solver left 5e-8 $ unbalanced
    t.r.trade.payment(0, 3) += 5e-8;
    t.r.trade.cost(0, 3) += 5e-8;
    t.r.trade.profit(0, 3) -= 5e-8;
    t.r.costs.total = t.r.trade.cost;
    const auto a = allocate(t.s, t.r);
    CHECK(a.payment.row(0).sum() == doctest::Approx(t.r.trade.payment.row(0).sum()).epsilon(1e-12));
    CHECK(std::abs(a.profit.sum() - t.r.trade.profit.sum()) < 1e-12);
    CHECK(std::abs(a.payment(0, 3) + a.payment(0, 4) - (t.r.trade.payment(0, 3) + t.r.trade.payment(0, 4))) < 1e-12);
}

TEST_CASE("allocate: one-sided steps pass through") {
    SUBCASE("everyone imports") {
        const Toy t = toy({{50.0, 1.0, 0.3}, {20.0, 0.2, 0.3}}, 0.3, 0.1, 0.5);
        const auto a = allocate(t.s, t.r);
        CHECK_FALSE(a.pooled[0]);
        CHECK(a.price(0) == 0.3);
        CHECK(a.payment.cwiseAbs().maxCoeff() < 1e-12);
        CHECK(a.profit.cwiseAbs().maxCoeff() < 1e-12);
    }
    SUBCASE("everyone idle") {
        const Toy t = toy({{0.0, 0.0, 0.2}, {0.0, 0.0, 0.2}}, 0.3, 0.1, 0.5);
        const auto a = allocate(t.s, t.r);
        CHECK_FALSE(a.pooled[0]);
        CHECK(a.payment.cwiseAbs().maxCoeff() == 0.0);
        CHECK(a.group[0][1] == TradeGroup::Idle);
    }
}

TEST_CASE("allocate: a pool price outside the band is an upstream error") {
    Toy t = toy({{100.0, 0.0, 0.2}, {-100.0, 0.0, 0.2}}, 0.3, 0.1, 1.0);
    t.r.trade.payment(0, 1) = 50.0;  // 0.5 $/kWh
    t.r.trade.payment(0, 2) = -50.0;
    CHECK_THROWS_AS(allocate(t.s, t.r), Error);
}

TEST_CASE("allocation after a solved trading day") {
    Scenario s;
    s.network = parse_case("BASE 10 12.66\nBUS 1 slack 0 0 0\nBUS 2 prosumer 40 10 0\nBUS 3 consumer 300 100 0\n"
                           "BUS 4 prosumer 60 20 0\nBUS 5 consumer 200 80 0\nBRANCH 1 2 0.0922 0.0470\n"
                           "BRANCH 2 3 0.4930 0.2511\nBRANCH 3 4 0.3660 0.1864\nBRANCH 4 5 0.3811 0.1941\n");
    s.steps = 3;
    s.dt = 0.5;
    s.devices.resize(5);
    s.load_p.resize(3, 5);
    s.load_q.resize(3, 5);
    for (int t = 0; t < 3; ++t)
        for (int i = 0; i < 5; ++i) {
            s.load_p(t, i) = s.network.buses[static_cast<std::size_t>(i)].base_load_p;
            s.load_q(t, i) = s.network.buses[static_cast<std::size_t>(i)].base_load_q;
        }
    s.prices.buy = {0.3, 0.25, 0.3};
    s.prices.sell = {0.1, 0.1, 0.12};
    s.devices[1].re = REProfile{{400.0, 250.0, 0.0}};
    s.devices[3].re = REProfile{{300.0, 600.0, 0.0}};
    s.devices[3].battery = BatterySpec{};

    const auto base = solve_stage1(s);
    const auto r = solve_stage2(s, base);
    REQUIRE(r.dispatch.report.status == SolveStatus::Optimal);
    const auto a = allocate(s, r);
    const auto f = fairness_metrics(a);
    CHECK(a.pooled[0]);
    CHECK(a.pooled[1]);
    for (int t = 0; t < s.steps; ++t) {
        CHECK(std::abs(a.payment.row(t).sum()) < 1e-6);
        CHECK(a.price(t) >= s.prices.sell[static_cast<std::size_t>(t)]);
        CHECK(a.price(t) <= s.prices.buy[static_cast<std::size_t>(t)]);
        CHECK(std::abs(a.profit.row(t).sum() - r.trade.profit.row(t).sum()) < 1e-6);
        // a bus that runs its devices as it did without trading gains
        // (u_b - pi*) or (pi* - u_s) on every pooled kWh
        for (int i : {1, 2, 4}) CHECK(a.profit(t, i) >= -1e-6);
        CHECK(f.exporter_spread(t) < 1e-6);
        CHECK(f.importer_spread(t) < 1e-3);
        for (int i = 1; i < 5; ++i)
            if (std::abs(a.pool_energy(t, i)) > 1e-9) CHECK(a.payment(t, i) / a.pool_energy(t, i) == doctest::Approx(a.price(t)));
    }
    // surplus steps clear below the utility's price
    CHECK(a.price(0) < s.prices.buy[0]);
    // the battery shifts energy to the last step once it can sell to the pool;
    // a single price per step cannot pay it back step by step, only over the day
    CHECK(r.dispatch.p_battery()(2, 3) > base.dispatch.p_battery()(2, 3) + 100.0);
    CHECK(a.profit.row(0).minCoeff() < 0.0);
    CHECK(a.profit.col(3).sum() > 0.0);
}
