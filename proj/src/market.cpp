#include "tes/market.hpp"

#include "tes/acpf.hpp"
#include "tes/error.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>

namespace tes {

double DeviceSet::real_capacity() const {
    double cap = 0.0;
    if (battery) cap += battery->p_discharge_max;
    if (dg) cap += dg->p_max;
    if (re && !re->available.empty()) cap += *std::max_element(re->available.begin(), re->available.end());
    return cap;
}

void Scenario::validate() const {
    const auto n = static_cast<Eigen::Index>(network.size());
    auto bad = [](ErrorCode c, const std::string& m) { throw Error(c, m); };
    if (steps <= 0) bad(ErrorCode::ConfigInvalid, "horizon must have at least one step");
    if (!(dt > 0.0)) bad(ErrorCode::ConfigInvalid, "step length must be positive");
    if (devices.size() != network.size()) bad(ErrorCode::WrongLength, "one device set per bus expected");
    if (load_p.rows() != steps || load_p.cols() != n || load_q.rows() != steps || load_q.cols() != n) {
        bad(ErrorCode::WrongLength, "load tables must be steps x buses");
    }
    if (static_cast<int>(prices.size()) != steps) bad(ErrorCode::WrongLength, "price schedule length != steps");
    prices.validate();
    if (!(0.0 < v_min && v_min < v_max)) bad(ErrorCode::ConfigInvalid, "voltage band must satisfy 0 < min < max");
    if (devices[0].any()) bad(ErrorCode::ConfigInvalid, "the slack bus cannot host devices");
    if (load_p.minCoeff() < 0.0) bad(ErrorCode::ConfigInvalid, "loads must be nonnegative");
    for (const auto& d : devices) {
        if (d.battery) d.battery->validate();
        if (d.dg) d.dg->validate();
        if (d.re) {
            d.re->validate();
            if (static_cast<int>(d.re->available.size()) != steps) {
                bad(ErrorCode::WrongLength, "renewable profile length != steps");
            }
        }
    }
}

std::string_view to_string(Stage stage) { return stage == Stage::Baseline ? "baseline" : "trading"; }

double DispatchSolution::voltage(int t, int i) const { return std::hypot(e(t, i), f(t, i)); }

double profit(double baseline_cost, double trading_cost) { return baseline_cost - trading_cost; }

namespace {

constexpr double kPowerCap = 10.0;    // pu, loose bound on any exchange
// Weight on a pool budget gap. Lowering a price moves cost one for one into
// the gap, so any weight above 1 keeps the gap at zero at the optimum, while
// steps where every bus imports keep an interior for the prices.
constexpr double kGapWeight = 10.0;
// Prices only decide how the pool's gain is split, so the optimum is flat along
// them. A faint pull toward the middle of the price band picks one split and
// keeps Newton steps from wandering along that flat set.
constexpr double kPriceWeight = 1e-6;

using Triplet = Eigen::Triplet<double>;

struct Neighbor {
    int j;
    double g, b;
};

// Share w of the loss on branch a-b charged to one bus.
struct LossTerm {
    int a, b;
    double g, w;
};

struct Grid {
    int n = 0;
    std::vector<std::vector<Neighbor>> adj;  // row of the nodal matrix, diagonal included
    std::vector<std::vector<LossTerm>> loss;
};

Grid make_grid(const Network& net) {
    Grid grid;
    grid.n = static_cast<int>(net.size());
    const auto adm = build_admittance(net);
    const Eigen::MatrixXd g = Eigen::MatrixXd(adm.g), b = Eigen::MatrixXd(adm.b);
    grid.adj.resize(static_cast<std::size_t>(grid.n));
    for (int i = 0; i < grid.n; ++i) {
        for (int j = 0; j < grid.n; ++j) {
            if (i == j || g(i, j) != 0.0 || b(i, j) != 0.0) grid.adj[i].push_back({j, g(i, j), b(i, j)});
        }
    }
    grid.loss.resize(static_cast<std::size_t>(grid.n));
    for (std::size_t k = 0; k < net.branches.size(); ++k) {
        const int a = net.index_of(net.branches[k].from_bus);
        const int c = net.index_of(net.branches[k].to_bus);
        const double gk = adm.branch_g[k];
        if (a == 0) {
            grid.loss[c].push_back({a, c, gk, 1.0});
        } else if (c == 0) {
            grid.loss[a].push_back({a, c, gk, 1.0});
        } else {
            grid.loss[a].push_back({a, c, gk, 0.5});
            grid.loss[c].push_back({a, c, gk, 0.5});
        }
    }
    return grid;
}

struct Layout {
    int T = 0, N = 0;
    bool trading = false;
    Eigen::Index n = 0, m_eq = 0, m_ineq = 0;
    // steps x buses, -1 where absent
    Eigen::MatrixXi e, f, imp, exp, chg, dis, energy, dg, re, qg, price;
    Eigen::VectorXi s_imp, s_exp, s_q, gap_over, gap_under;
    Eigen::MatrixXi row_p, row_q, row_bal, row_batt, row_vlo, row_vhi, row_ir;
    Eigen::VectorXi row_zero;

    Layout(const Scenario& s, bool trade) : T(s.steps), N(static_cast<int>(s.network.size())), trading(trade) {
        auto table = [&] { return Eigen::MatrixXi::Constant(T, N, -1); };
        e = table(), f = table(), imp = table(), exp = table(), chg = table(), dis = table();
        energy = table(), dg = table(), re = table(), qg = table(), price = table();
        row_p = table(), row_q = table(), row_bal = table(), row_batt = table();
        row_vlo = table(), row_vhi = table(), row_ir = table();
        s_imp = s_exp = s_q = row_zero = gap_over = gap_under = Eigen::VectorXi::Constant(T, -1);
        int v = 0, re_row = 0, ri = 0;
        for (int t = 0; t < T; ++t) {
            for (int i = 0; i < N; ++i) {
                e(t, i) = v++;
                f(t, i) = v++;
            }
            s_imp(t) = v++;
            if (trading) s_exp(t) = v++;
            s_q(t) = v++;
            if (trading) {
                gap_over(t) = v++;
                gap_under(t) = v++;
            }
            for (int i = 1; i < N; ++i) {
                const auto& d = s.devices[static_cast<std::size_t>(i)];
                imp(t, i) = v++;
                if (!trading && d.any()) exp(t, i) = v++;
                if (d.battery) {
                    chg(t, i) = v++;
                    dis(t, i) = v++;
                    energy(t, i) = v++;
                }
                if (d.dg) dg(t, i) = v++;
                if (d.re) re(t, i) = v++;
                if (d.any()) qg(t, i) = v++;
                if (trading) price(t, i) = v++;
            }
            for (int i = 0; i < N; ++i) {
                row_p(t, i) = re_row++;
                row_q(t, i) = re_row++;
            }
            for (int i = 1; i < N; ++i) {
                row_bal(t, i) = re_row++;
                if (s.devices[static_cast<std::size_t>(i)].battery) row_batt(t, i) = re_row++;
            }
            if (trading) row_zero(t) = re_row++;
            for (int i = 1; i < N; ++i) {
                row_vlo(t, i) = ri++;
                row_vhi(t, i) = ri++;
                if (trading) row_ir(t, i) = ri++;
            }
        }
        n = v;
        m_eq = re_row;
        m_ineq = ri;
    }
};

// Symmetric Hessian accumulator for terms alpha * x_u * x_v.
struct HessSink {
    std::vector<Triplet>& out;
    void bil(int u, int v, double alpha) {
        if (u == v) {
            out.emplace_back(u, u, 2.0 * alpha);
        } else {
            out.emplace_back(u, v, alpha);
            out.emplace_back(v, u, alpha);
        }
    }
};

class Model {
public:
    Model(const Scenario& s, bool trading, const CostTable* baseline)
        : s_(s), grid_(make_grid(s.network)), lay_(s, trading), kw_(s.network.base_kw()) {
        if (trading) {
            if (!baseline || baseline->total.rows() != s.steps ||
                baseline->total.cols() != static_cast<Eigen::Index>(s.network.size())) {
                throw Error(ErrorCode::MissingBaseline, "stage 2 needs the stage-1 cost table");
            }
            baseline_ = baseline->total;
        }
        m_ = kw_ * s.dt;
        inv_ = 100.0 / m_;
    }

    const Layout& layout() const { return lay_; }
    const Grid& grid() const { return grid_; }
    double kw() const { return kw_; }

    NlpProblem problem(std::shared_ptr<const Model> self) const;
    void bounds(Vec& lo, Vec& hi) const;

    // signed P_im in pu
    double pim(const Vec& x, int t, int i) const {
        double v = x(lay_.imp(t, i));
        if (lay_.exp(t, i) >= 0) v -= x(lay_.exp(t, i));
        return v;
    }

    double loss(const Vec& x, int t, int i) const {
        double v = 0.0;
        for (const auto& l : grid_.loss[i]) {
            const double de = x(lay_.e(t, l.a)) - x(lay_.e(t, l.b));
            const double df = x(lay_.f(t, l.a)) - x(lay_.f(t, l.b));
            v += l.w * l.g * (de * de + df * df);
        }
        return v;
    }

    template <class Add>
    void loss_grad(const Vec& x, int t, int i, double coef, Add&& add) const {
        for (const auto& l : grid_.loss[i]) {
            const double de = x(lay_.e(t, l.a)) - x(lay_.e(t, l.b));
            const double df = x(lay_.f(t, l.a)) - x(lay_.f(t, l.b));
            const double k = 2.0 * coef * l.w * l.g;
            add(lay_.e(t, l.a), k * de);
            add(lay_.e(t, l.b), -k * de);
            add(lay_.f(t, l.a), k * df);
            add(lay_.f(t, l.b), -k * df);
        }
    }

    void loss_hess(int t, int i, double coef, HessSink& h) const {
        for (const auto& l : grid_.loss[i]) {
            const double k = coef * l.w * l.g;
            for (const auto& idx : {&lay_.e, &lay_.f}) {
                const int a = (*idx)(t, l.a), b = (*idx)(t, l.b);
                h.bil(a, a, k);
                h.bil(b, b, k);
                h.bil(a, b, -2.0 * k);
            }
        }
    }


    // Cost of bus i at step t in $, split into the transaction with the pool
    // or utility and the device operating cost.
    double transaction(const Vec& x, int t, int i) const {
        const double ub = s_.prices.buy[t], us = s_.prices.sell[t];
        if (!lay_.trading) {
            double v = ub * x(lay_.imp(t, i)) + ub * loss(x, t, i);
            if (lay_.exp(t, i) >= 0) v -= us * x(lay_.exp(t, i));
            return m_ * v;
        }
        return m_ * (pim(x, t, i) + loss(x, t, i)) * x(lay_.price(t, i));
    }

    double devices(const Vec& x, int t, int i) const {
        const auto& d = s_.devices[static_cast<std::size_t>(i)];
        double v = 0.0;
        if (d.battery) v += m_ * d.battery->degradation_cost * (x(lay_.chg(t, i)) + x(lay_.dis(t, i)));
        if (d.dg) v += s_.dt * dg_cost_unchecked(kw_ * x(lay_.dg(t, i)), *d.dg);
        return v;
    }

    template <class Add>
    void transaction_grad(const Vec& x, int t, int i, double coef, Add&& add) const {
        const double ub = s_.prices.buy[t], us = s_.prices.sell[t];
        if (!lay_.trading) {
            add(lay_.imp(t, i), coef * m_ * ub);
            if (lay_.exp(t, i) >= 0) add(lay_.exp(t, i), -coef * m_ * us);
            loss_grad(x, t, i, coef * m_ * ub, add);
            return;
        }
        const double pi = x(lay_.price(t, i));
        add(lay_.imp(t, i), coef * m_ * pi);
        loss_grad(x, t, i, coef * m_ * pi, add);
        add(lay_.price(t, i), coef * m_ * (pim(x, t, i) + loss(x, t, i)));
    }

    template <class Add>
    void devices_grad(const Vec& x, int t, int i, double coef, Add&& add) const {
        const auto& d = s_.devices[static_cast<std::size_t>(i)];
        if (d.battery) {
            add(lay_.chg(t, i), coef * m_ * d.battery->degradation_cost);
            add(lay_.dis(t, i), coef * m_ * d.battery->degradation_cost);
        }
        if (d.dg) {
            const double p = kw_ * x(lay_.dg(t, i));
            add(lay_.dg(t, i), coef * s_.dt * kw_ * dg_cost_derivative(p, *d.dg));
        }
    }

    void transaction_hess(const Vec& x, int t, int i, double coef, HessSink& h) const {
        if (!lay_.trading) {
            loss_hess(t, i, coef * m_ * s_.prices.buy[t], h);
            return;
        }
        const int pv = lay_.price(t, i);
        h.bil(lay_.imp(t, i), pv, coef * m_);
        loss_hess(t, i, coef * m_ * x(pv), h);
        loss_grad(x, t, i, coef * m_, [&](int v, double d) { h.bil(v, pv, d); });
    }

    void devices_hess(const Vec& x, int t, int i, double coef, HessSink& h) const {
        const auto& d = s_.devices[static_cast<std::size_t>(i)];
        if (d.dg) {
            const int v = lay_.dg(t, i);
            h.bil(v, v, 0.5 * coef * s_.dt * kw_ * kw_ * dg_cost_curvature(kw_ * x(v), *d.dg));
        }
    }

    // ((pi - mid) / half width)^2 and its derivatives in pi
    double price_pull(const Vec& x, int t, int i, int order) const {
        const double ub = s_.prices.buy[t], us = s_.prices.sell[t];
        const double half = 0.5 * (ub - us);
        if (!(half > 0.0)) return 0.0;
        const double u = (x(lay_.price(t, i)) - 0.5 * (ub + us)) / half;
        return order == 0 ? u * u : order == 1 ? 2.0 * u / half : 2.0 / (half * half);
    }

    double utility_bill(const Vec& x, int t) const {
        double v = s_.prices.buy[t] * x(lay_.s_imp(t));
        if (lay_.s_exp(t) >= 0) v -= s_.prices.sell[t] * x(lay_.s_exp(t));
        return m_ * v;
    }

    double objective(const Vec& x) const {
        double v = 0.0;
        for (int t = 0; t < lay_.T; ++t)
            for (int i = 1; i < lay_.N; ++i) v += transaction(x, t, i) + devices(x, t, i);
        double gap = 0.0, pull = 0.0;
        if (lay_.trading)
            for (int t = 0; t < lay_.T; ++t) {
                gap += x(lay_.gap_over(t)) + x(lay_.gap_under(t));
                for (int i = 1; i < lay_.N; ++i) pull += price_pull(x, t, i, 0);
            }
        return inv_ * v + kGapWeight * gap + kPriceWeight * pull;
    }

    Vec gradient(const Vec& x) const {
        Vec g = Vec::Zero(lay_.n);
        auto add = [&](int v, double d) { g(v) += d; };
        for (int t = 0; t < lay_.T; ++t) {
            for (int i = 1; i < lay_.N; ++i) {
                transaction_grad(x, t, i, inv_, add);
                devices_grad(x, t, i, inv_, add);
            }
            if (lay_.trading) {
                g(lay_.gap_over(t)) = kGapWeight;
                g(lay_.gap_under(t)) = kGapWeight;
                for (int i = 1; i < lay_.N; ++i) g(lay_.price(t, i)) += kPriceWeight * price_pull(x, t, i, 1);
            }
        }
        return g;
    }

    // Network power leaving bus i, pu.
    void bus_power(const Vec& x, int t, int i, double& p, double& q, double& a, double& c) const {
        a = c = 0.0;
        for (const auto& nb : grid_.adj[i]) {
            const double ej = x(lay_.e(t, nb.j)), fj = x(lay_.f(t, nb.j));
            a += nb.g * ej - nb.b * fj;
            c += nb.g * fj + nb.b * ej;
        }
        const double ei = x(lay_.e(t, i)), fi = x(lay_.f(t, i));
        p = ei * a + fi * c;
        q = fi * a - ei * c;
    }

    double load_p(int t, int i) const { return s_.load_p(t, i) / kw_; }
    double load_q(int t, int i) const { return s_.load_q(t, i) / kw_; }

    Vec eq_values(const Vec& x) const {
        Vec c(lay_.m_eq);
        for (int t = 0; t < lay_.T; ++t) {
            for (int i = 0; i < lay_.N; ++i) {
                double p, q, a, cc;
                bus_power(x, t, i, p, q, a, cc);
                if (i == 0) {
                    double sp = x(lay_.s_imp(t));
                    if (lay_.s_exp(t) >= 0) sp -= x(lay_.s_exp(t));
                    c(lay_.row_p(t, 0)) = p - sp;
                    c(lay_.row_q(t, 0)) = q - x(lay_.s_q(t));
                } else {
                    c(lay_.row_p(t, i)) = p + pim(x, t, i);
                    const double qg = lay_.qg(t, i) >= 0 ? x(lay_.qg(t, i)) : 0.0;
                    c(lay_.row_q(t, i)) = q - qg + load_q(t, i);
                }
            }
            for (int i = 1; i < lay_.N; ++i) {
                double bal = pim(x, t, i) - load_p(t, i);
                if (lay_.chg(t, i) >= 0) bal += x(lay_.dis(t, i)) - x(lay_.chg(t, i));
                if (lay_.dg(t, i) >= 0) bal += x(lay_.dg(t, i));
                if (lay_.re(t, i) >= 0) bal += x(lay_.re(t, i));
                c(lay_.row_bal(t, i)) = bal;
                if (lay_.row_batt(t, i) >= 0) {
                    const auto& b = *s_.devices[static_cast<std::size_t>(i)].battery;
                    const double prev = t == 0 ? b.initial_energy() / kw_ : x(lay_.energy(t - 1, i));
                    c(lay_.row_batt(t, i)) = x(lay_.energy(t, i)) - prev -
                                             (b.eta_charge * x(lay_.chg(t, i)) -
                                              b.eta_discharge * x(lay_.dis(t, i))) * s_.dt;
                }
            }
            if (lay_.trading) {
                double z = -utility_bill(x, t);
                for (int i = 1; i < lay_.N; ++i) z += transaction(x, t, i);
                c(lay_.row_zero(t)) = inv_ * z - x(lay_.gap_over(t)) + x(lay_.gap_under(t));
            }
        }
        return c;
    }

    SpMat eq_jacobian(const Vec& x) const {
        std::vector<Triplet> tr;
        tr.reserve(static_cast<std::size_t>(lay_.m_eq) * 12);
        for (int t = 0; t < lay_.T; ++t) {
            for (int i = 0; i < lay_.N; ++i) {
                double p, q, a, c;
                bus_power(x, t, i, p, q, a, c);
                const int rp = lay_.row_p(t, i), rq = lay_.row_q(t, i);
                const double ei = x(lay_.e(t, i)), fi = x(lay_.f(t, i));
                for (const auto& nb : grid_.adj[i]) {
                    const int ej = lay_.e(t, nb.j), fj = lay_.f(t, nb.j);
                    const bool self = nb.j == i;
                    tr.emplace_back(rp, ej, nb.g * ei + nb.b * fi + (self ? a : 0.0));
                    tr.emplace_back(rp, fj, nb.g * fi - nb.b * ei + (self ? c : 0.0));
                    tr.emplace_back(rq, ej, nb.g * fi - nb.b * ei - (self ? c : 0.0));
                    tr.emplace_back(rq, fj, -nb.g * ei - nb.b * fi + (self ? a : 0.0));
                }
                if (i == 0) {
                    tr.emplace_back(rp, lay_.s_imp(t), -1.0);
                    if (lay_.s_exp(t) >= 0) tr.emplace_back(rp, lay_.s_exp(t), 1.0);
                    tr.emplace_back(rq, lay_.s_q(t), -1.0);
                } else {
                    tr.emplace_back(rp, lay_.imp(t, i), 1.0);
                    if (lay_.exp(t, i) >= 0) tr.emplace_back(rp, lay_.exp(t, i), -1.0);
                    if (lay_.qg(t, i) >= 0) tr.emplace_back(rq, lay_.qg(t, i), -1.0);
                }
            }
            for (int i = 1; i < lay_.N; ++i) {
                const int r = lay_.row_bal(t, i);
                tr.emplace_back(r, lay_.imp(t, i), 1.0);
                if (lay_.exp(t, i) >= 0) tr.emplace_back(r, lay_.exp(t, i), -1.0);
                if (lay_.chg(t, i) >= 0) {
                    tr.emplace_back(r, lay_.dis(t, i), 1.0);
                    tr.emplace_back(r, lay_.chg(t, i), -1.0);
                }
                if (lay_.dg(t, i) >= 0) tr.emplace_back(r, lay_.dg(t, i), 1.0);
                if (lay_.re(t, i) >= 0) tr.emplace_back(r, lay_.re(t, i), 1.0);
                if (lay_.row_batt(t, i) >= 0) {
                    const auto& b = *s_.devices[static_cast<std::size_t>(i)].battery;
                    const int rb = lay_.row_batt(t, i);
                    tr.emplace_back(rb, lay_.energy(t, i), 1.0);
                    if (t > 0) tr.emplace_back(rb, lay_.energy(t - 1, i), -1.0);
                    tr.emplace_back(rb, lay_.chg(t, i), -b.eta_charge * s_.dt);
                    tr.emplace_back(rb, lay_.dis(t, i), b.eta_discharge * s_.dt);
                }
            }
            if (lay_.trading) {
                const int r = lay_.row_zero(t);
                auto add = [&](int v, double d) { tr.emplace_back(r, v, d); };
                for (int i = 1; i < lay_.N; ++i) transaction_grad(x, t, i, inv_, add);
                tr.emplace_back(r, lay_.s_imp(t), -inv_ * m_ * s_.prices.buy[t]);
                tr.emplace_back(r, lay_.s_exp(t), inv_ * m_ * s_.prices.sell[t]);
                tr.emplace_back(r, lay_.gap_over(t), -1.0);
                tr.emplace_back(r, lay_.gap_under(t), 1.0);
            }
        }
        SpMat j(lay_.m_eq, lay_.n);
        j.setFromTriplets(tr.begin(), tr.end());
        return j;
    }

    Vec ineq_values(const Vec& x) const {
        Vec g(lay_.m_ineq);
        const double lo2 = s_.v_min * s_.v_min, hi2 = s_.v_max * s_.v_max;
        for (int t = 0; t < lay_.T; ++t) {
            for (int i = 1; i < lay_.N; ++i) {
                const double ei = x(lay_.e(t, i)), fi = x(lay_.f(t, i));
                const double v2 = ei * ei + fi * fi;
                g(lay_.row_vlo(t, i)) = lo2 - v2;
                g(lay_.row_vhi(t, i)) = v2 - hi2;
                if (lay_.trading) {
                    g(lay_.row_ir(t, i)) = inv_ * (transaction(x, t, i) + devices(x, t, i) - baseline_(t, i));
                }
            }
        }
        return g;
    }

    SpMat ineq_jacobian(const Vec& x) const {
        std::vector<Triplet> tr;
        for (int t = 0; t < lay_.T; ++t) {
            for (int i = 1; i < lay_.N; ++i) {
                const int ev = lay_.e(t, i), fv = lay_.f(t, i);
                const double ei = x(ev), fi = x(fv);
                tr.emplace_back(lay_.row_vlo(t, i), ev, -2.0 * ei);
                tr.emplace_back(lay_.row_vlo(t, i), fv, -2.0 * fi);
                tr.emplace_back(lay_.row_vhi(t, i), ev, 2.0 * ei);
                tr.emplace_back(lay_.row_vhi(t, i), fv, 2.0 * fi);
                if (lay_.trading) {
                    const int r = lay_.row_ir(t, i);
                    auto add = [&](int v, double d) { tr.emplace_back(r, v, d); };
                    transaction_grad(x, t, i, inv_, add);
                    devices_grad(x, t, i, inv_, add);
                }
            }
        }
        SpMat j(lay_.m_ineq, lay_.n);
        j.setFromTriplets(tr.begin(), tr.end());
        return j;
    }

    SpMat hessian(const Vec& x, double sigma, const Vec& ye, const Vec& yi) const {
        std::vector<Triplet> tr;
        HessSink h{tr};
        for (int t = 0; t < lay_.T; ++t) {
            for (int i = 1; i < lay_.N; ++i) {
                transaction_hess(x, t, i, sigma * inv_, h);
                devices_hess(x, t, i, sigma * inv_, h);
                if (lay_.trading) h.bil(lay_.price(t, i), lay_.price(t, i), 0.5 * sigma * kPriceWeight * price_pull(x, t, i, 2));
            }
            for (int i = 0; i < lay_.N; ++i) {
                const double lp = ye(lay_.row_p(t, i)), lq = ye(lay_.row_q(t, i));
                const int ei = lay_.e(t, i), fi = lay_.f(t, i);
                for (const auto& nb : grid_.adj[i]) {
                    const int ej = lay_.e(t, nb.j), fj = lay_.f(t, nb.j);
                    h.bil(ei, ej, lp * nb.g - lq * nb.b);
                    h.bil(fi, fj, lp * nb.g - lq * nb.b);
                    h.bil(fi, ej, lp * nb.b + lq * nb.g);
                    h.bil(ei, fj, -lp * nb.b - lq * nb.g);
                }
            }
            if (lay_.trading) {
                const double yz = ye(lay_.row_zero(t));
                for (int i = 1; i < lay_.N; ++i) transaction_hess(x, t, i, yz * inv_, h);
            }
            for (int i = 1; i < lay_.N; ++i) {
                const double w = yi(lay_.row_vhi(t, i)) - yi(lay_.row_vlo(t, i));
                h.bil(lay_.e(t, i), lay_.e(t, i), w);
                h.bil(lay_.f(t, i), lay_.f(t, i), w);
                if (lay_.trading) {
                    const double yr = yi(lay_.row_ir(t, i));
                    transaction_hess(x, t, i, yr * inv_, h);
                    devices_hess(x, t, i, yr * inv_, h);
                }
            }
        }
        SpMat hm(lay_.n, lay_.n);
        hm.setFromTriplets(tr.begin(), tr.end());
        return hm;
    }

private:
    Scenario s_;
    Grid grid_;
    Layout lay_;
    double kw_ = 0.0;
    double m_ = 0.0;    // $ per (pu power x $/kWh) over one step
    double inv_ = 0.0;  // money rows and the objective are in units of m_/100 dollars
    Eigen::MatrixXd baseline_;
};

void Model::bounds(Vec& lo, Vec& hi) const {
    lo = Vec::Constant(lay_.n, -kInf);
    hi = Vec::Constant(lay_.n, kInf);
    auto set = [&](int v, double a, double b) {
        lo(v) = a;
        hi(v) = b;
    };
    for (int t = 0; t < lay_.T; ++t) {
        set(lay_.e(t, 0), 1.0, 1.0);
        set(lay_.f(t, 0), 0.0, 0.0);
        for (int i = 1; i < lay_.N; ++i) {
            set(lay_.e(t, i), 0.0, s_.v_max);
            set(lay_.f(t, i), -s_.v_max, s_.v_max);
        }
        if (lay_.trading) {
            set(lay_.s_imp(t), 0.0, kPowerCap);
            set(lay_.s_exp(t), 0.0, kPowerCap);
            set(lay_.gap_over(t), 0.0, kPowerCap);
            set(lay_.gap_under(t), 0.0, kPowerCap);
        } else {
            set(lay_.s_imp(t), -kPowerCap, kPowerCap);
        }
        set(lay_.s_q(t), -kPowerCap, kPowerCap);
        for (int i = 1; i < lay_.N; ++i) {
            const auto& d = s_.devices[static_cast<std::size_t>(i)];
            if (lay_.trading) {
                set(lay_.imp(t, i), d.any() ? -kPowerCap : 0.0, kPowerCap);
            } else {
                set(lay_.imp(t, i), 0.0, kPowerCap);
                if (lay_.exp(t, i) >= 0) set(lay_.exp(t, i), 0.0, kPowerCap);
            }
            if (d.battery) {
                const auto& b = *d.battery;
                set(lay_.chg(t, i), 0.0, b.p_charge_max / kw_);
                set(lay_.dis(t, i), 0.0, b.p_discharge_max / kw_);
                double emin = b.energy_min();
                if (t == lay_.T - 1) emin = std::max(emin, b.initial_energy());
                set(lay_.energy(t, i), emin / kw_, b.energy_max() / kw_);
            }
            if (d.dg) set(lay_.dg(t, i), d.dg->p_min / kw_, d.dg->p_max / kw_);
            if (d.re) set(lay_.re(t, i), 0.0, d.re->available[static_cast<std::size_t>(t)] / kw_);
            if (lay_.qg(t, i) >= 0) {
                const double qcap = s_.reactive_ratio * d.real_capacity() / kw_;
                set(lay_.qg(t, i), -qcap, qcap);
            }
            if (lay_.trading) set(lay_.price(t, i), s_.prices.sell[t], s_.prices.buy[t]);
        }
    }
}

NlpProblem Model::problem(std::shared_ptr<const Model> self) const {
    NlpProblem p;
    p.n = lay_.n;
    p.m_eq = lay_.m_eq;
    p.m_ineq = lay_.m_ineq;
    p.objective = [self](const Vec& x) { return self->objective(x); };
    p.gradient = [self](const Vec& x) { return self->gradient(x); };
    p.eq_constraints = [self](const Vec& x) { return self->eq_values(x); };
    p.eq_jacobian = [self](const Vec& x) { return self->eq_jacobian(x); };
    p.ineq_constraints = [self](const Vec& x) { return self->ineq_values(x); };
    p.ineq_jacobian = [self](const Vec& x) { return self->ineq_jacobian(x); };
    p.hessian = [self](const Vec& x, double s, const Vec& ye, const Vec& yi) {
        return self->hessian(x, s, ye, yi);
    };
    bounds(p.lower, p.upper);
    p.names.resize(static_cast<std::size_t>(lay_.n));
    auto name = [&](int v, const std::string& what, int t, int i) {
        if (v >= 0) {
            p.names[static_cast<std::size_t>(v)] =
                what + "[t=" + std::to_string(t + 1) + (i >= 0 ? ",bus=" + std::to_string(i + 1) : "") + "]";
        }
    };
    for (int t = 0; t < lay_.T; ++t) {
        name(lay_.s_imp(t), lay_.trading ? "slack_import" : "slack_p", t, -1);
        name(lay_.s_exp(t), "slack_export", t, -1);
        name(lay_.s_q(t), "slack_q", t, -1);
        name(lay_.gap_over(t), "pool_surplus", t, -1);
        name(lay_.gap_under(t), "pool_deficit", t, -1);
        for (int i = 0; i < lay_.N; ++i) {
            name(lay_.e(t, i), "e", t, i);
            name(lay_.f(t, i), "f", t, i);
            name(lay_.imp(t, i), lay_.trading ? "p_im" : "import", t, i);
            name(lay_.exp(t, i), "export", t, i);
            name(lay_.chg(t, i), "charge", t, i);
            name(lay_.dis(t, i), "discharge", t, i);
            name(lay_.energy(t, i), "energy", t, i);
            name(lay_.dg(t, i), "dg", t, i);
            name(lay_.re(t, i), "re", t, i);
            name(lay_.qg(t, i), "q_gen", t, i);
            name(lay_.price(t, i), "price", t, i);
        }
    }
    p.x0 = Vec::Zero(lay_.n);
    return p;
}

// Start point with flat voltages, idle devices and the grid covering all load.
Vec flat_start(const Model& mdl, const Scenario& s) {
    const auto& lay = mdl.layout();
    const double kw = mdl.kw();
    Vec x = Vec::Zero(lay.n);
    for (int t = 0; t < lay.T; ++t) {
        double total = 0.0;
        for (int i = 0; i < lay.N; ++i) {
            x(lay.e(t, i)) = 1.0;
            if (i == 0) continue;
            const auto& d = s.devices[static_cast<std::size_t>(i)];
            double need = s.load_p(t, i) / kw;
            if (d.battery) x(lay.energy(t, i)) = d.battery->initial_energy() / kw;
            if (d.dg) x(lay.dg(t, i)) = d.dg->p_min / kw;
            if (d.re) {
                x(lay.re(t, i)) = d.re->available[static_cast<std::size_t>(t)] / kw;
                need -= x(lay.re(t, i));
            }
            if (lay.exp(t, i) >= 0) {
                x(lay.imp(t, i)) = std::max(need, 0.0);
                x(lay.exp(t, i)) = std::max(-need, 0.0);
            } else {
                x(lay.imp(t, i)) = need;
            }
            if (lay.price(t, i) >= 0) x(lay.price(t, i)) = 0.5 * (s.prices.buy[t] + s.prices.sell[t]);
            total += need;
        }
        if (lay.s_exp(t) >= 0) {
            x(lay.s_imp(t)) = std::max(total, 0.0);
            x(lay.s_exp(t)) = std::max(-total, 0.0);
        } else {
            x(lay.s_imp(t)) = total;
        }
    }
    return x;
}

// Same point with voltages from a load-flow solve of the start injections.
Vec powerflow_start(const Model& mdl, const Scenario& s, Vec x) {
    const auto& lay = mdl.layout();
    const auto adm = build_admittance(s.network);
    for (int t = 0; t < lay.T; ++t) {
        InjectionSet inj;
        inj.p.assign(static_cast<std::size_t>(lay.N), 0.0);
        inj.q.assign(static_cast<std::size_t>(lay.N), 0.0);
        for (int i = 1; i < lay.N; ++i) {
            inj.p[static_cast<std::size_t>(i)] = -mdl.pim(x, t, i) * mdl.kw();
            inj.q[static_cast<std::size_t>(i)] = -s.load_q(t, i);
        }
        try {
            const auto sol = solve_newton_pf(s.network, adm, inj);
            for (int i = 0; i < lay.N; ++i) {
                x(lay.e(t, i)) = sol.voltage.e[static_cast<std::size_t>(i)];
                x(lay.f(t, i)) = sol.voltage.f[static_cast<std::size_t>(i)];
            }
        } catch (const Error&) {
            // keep the flat voltages for this step
        }
    }
    return x;
}

Vec perturbed_start(const Model& mdl, Vec x, unsigned seed) {
    const auto& lay = mdl.layout();
    std::mt19937 rng(seed);
    std::normal_distribution<double> jitter(0.0, 0.01);
    std::uniform_real_distribution<double> unit(0.2, 0.8);
    Vec lo, hi;
    mdl.bounds(lo, hi);
    for (int t = 0; t < lay.T; ++t) {
        for (int i = 1; i < lay.N; ++i) {
            x(lay.e(t, i)) += jitter(rng);
            x(lay.f(t, i)) += jitter(rng);
            for (int v : {lay.chg(t, i), lay.dis(t, i), lay.dg(t, i), lay.re(t, i)}) {
                if (v >= 0) x(v) = lo(v) + unit(rng) * (hi(v) - lo(v));
            }
        }
    }
    return x;
}

DispatchSolution extract(const Model& mdl, const Scenario& s, const SolveReport& rep, Stage stage) {
    const auto& lay = mdl.layout();
    const double kw = mdl.kw();
    const Vec& x = rep.x;
    DispatchSolution d;
    d.stage = stage;
    auto table = [&] { return Eigen::MatrixXd::Zero(lay.T, lay.N).eval(); };
    d.p_import = table(), d.p_charge = table(), d.p_discharge = table(), d.energy = table();
    d.p_dg = table(), d.p_re = table(), d.q_gen = table(), d.e = table(), d.f = table(), d.p_loss = table();
    d.slack_p = Eigen::VectorXd::Zero(lay.T);
    d.slack_q = Eigen::VectorXd::Zero(lay.T);
    for (int t = 0; t < lay.T; ++t) {
        double sp = x(lay.s_imp(t));
        if (lay.s_exp(t) >= 0) sp -= x(lay.s_exp(t));
        d.slack_p(t) = sp * kw;
        d.slack_q(t) = x(lay.s_q(t)) * kw;
        for (int i = 0; i < lay.N; ++i) {
            d.e(t, i) = x(lay.e(t, i));
            d.f(t, i) = x(lay.f(t, i));
        }
        for (int i = 1; i < lay.N; ++i) {
            const auto& dev = s.devices[static_cast<std::size_t>(i)];
            d.p_import(t, i) = mdl.pim(x, t, i) * kw;
            if (dev.battery) {
                // a cycle inside one step only burns degradation; net it out
                const double c = x(lay.chg(t, i)), g = x(lay.dis(t, i));
                const double overlap = std::min(c, g);
                d.p_charge(t, i) = std::max(0.0, c - overlap) * kw;
                d.p_discharge(t, i) = std::max(0.0, g - overlap) * kw;
                d.energy(t, i) = x(lay.energy(t, i)) * kw;
            }
            if (dev.dg) d.p_dg(t, i) = std::clamp(x(lay.dg(t, i)) * kw, dev.dg->p_min, dev.dg->p_max);
            if (dev.re) d.p_re(t, i) = std::max(0.0, x(lay.re(t, i)) * kw);
            if (lay.qg(t, i) >= 0) d.q_gen(t, i) = x(lay.qg(t, i)) * kw;
            d.p_loss(t, i) = mdl.loss(x, t, i) * kw;
        }
    }
    d.report = rep;
    d.report.iterates.clear();
    return d;
}

CostTable device_costs(const Scenario& s, const DispatchSolution& d) {
    CostTable c;
    const auto T = d.p_import.rows(), N = d.p_import.cols();
    c.imported = c.battery = c.dg = c.loss = c.total = Eigen::MatrixXd::Zero(T, N);
    for (Eigen::Index t = 0; t < T; ++t) {
        for (Eigen::Index i = 1; i < N; ++i) {
            const auto& dev = s.devices[static_cast<std::size_t>(i)];
            if (dev.battery) c.battery(t, i) = battery_cost(d.p_discharge(t, i) - d.p_charge(t, i), s.dt, *dev.battery);
            if (dev.dg) c.dg(t, i) = dg_cost(d.p_dg(t, i), *dev.dg) * s.dt;
        }
    }
    return c;
}

void finish_totals(CostTable& c) {
    for (Eigen::Index t = 0; t < c.total.rows(); ++t) {
        for (Eigen::Index i = 0; i < c.total.cols(); ++i) {
            c.total(t, i) = bus_total_cost(c.imported(t, i), c.battery(t, i), c.dg(t, i), c.loss(t, i)).total;
        }
    }
}

std::vector<Vec> start_points(const Model& mdl, const Scenario& s, const Vec* warm) {
    const Vec flat = flat_start(mdl, s);
    std::vector<Vec> out;
    out.push_back(flat);
    out.push_back(warm ? *warm : powerflow_start(mdl, s, flat));
    out.push_back(perturbed_start(mdl, flat, s.seed));
    out.resize(static_cast<std::size_t>(std::clamp(s.starts, 1, 3)));
    return out;
}

NlpOptions stage_options(const Scenario& s) { return s.solver; }

}  // namespace

Eigen::VectorXd participant_losses(const Network& net, const AdmittanceTable& adm, const std::vector<double>& e,
                                   const std::vector<double>& f) {
    const auto n = static_cast<Eigen::Index>(net.size());
    Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
    for (std::size_t k = 0; k < net.branches.size(); ++k) {
        const auto a = static_cast<std::size_t>(net.index_of(net.branches[k].from_bus));
        const auto b = static_cast<std::size_t>(net.index_of(net.branches[k].to_bus));
        const double de = e[a] - e[b], df = f[a] - f[b];
        const double l = adm.branch_g[k] * (de * de + df * df) * net.base_kw();
        if (a == 0) {
            out(static_cast<Eigen::Index>(b)) += l;
        } else if (b == 0) {
            out(static_cast<Eigen::Index>(a)) += l;
        } else {
            out(static_cast<Eigen::Index>(a)) += 0.5 * l;
            out(static_cast<Eigen::Index>(b)) += 0.5 * l;
        }
    }
    return out;
}

NlpProblem build_stage1(const Scenario& s) {
    s.validate();
    for (int t = 0; t < s.steps; ++t) {
        double supply = kPowerCap * s.network.base_kw();
        for (const auto& d : s.devices) supply += d.real_capacity();
        if (s.load_p.row(t).sum() > supply) {
            throw Error(ErrorCode::InfeasibleScenario, "load exceeds supply at step " + std::to_string(t + 1));
        }
    }
    auto mdl = std::make_shared<const Model>(s, false, nullptr);
    NlpProblem p = mdl->problem(mdl);
    p.x0 = flat_start(*mdl, s);
    return p;
}

StageOneResult solve_stage1(const Scenario& s) {
    const NlpProblem p = build_stage1(s);
    auto mdl = std::make_shared<const Model>(s, false, nullptr);
    const auto rep = solve_nlp_multistart(p, start_points(*mdl, s, nullptr), stage_options(s));
    StageOneResult out;
    out.dispatch = extract(*mdl, s, rep, Stage::Baseline);
    out.costs = device_costs(s, out.dispatch);
    const auto& d = out.dispatch;
    for (int t = 0; t < s.steps; ++t) {
        const double ub = s.prices.buy[t], us = s.prices.sell[t];
        for (Eigen::Index i = 1; i < d.p_import.cols(); ++i) {
            const double pim = d.p_import(t, i);
            out.costs.imported(t, i) = import_cost(std::max(pim, 0.0), ub, s.dt) + import_cost(std::min(pim, 0.0), us, s.dt);
            out.costs.loss(t, i) = loss_cost(d.p_loss(t, i), ub, s.dt);
        }
    }
    finish_totals(out.costs);
    return out;
}

NlpProblem build_stage2(const Scenario& s, const CostTable& baseline) {
    s.validate();
    auto mdl = std::make_shared<const Model>(s, true, &baseline);
    NlpProblem p = mdl->problem(mdl);
    p.x0 = flat_start(*mdl, s);
    return p;
}

namespace {

// Stage-1 dispatch mapped onto the stage-2 variables.
Vec warm_from_baseline(const Model& mdl, const Scenario& s, const DispatchSolution& d) {
    const auto& lay = mdl.layout();
    const double kw = mdl.kw();
    Vec x = flat_start(mdl, s);
    for (int t = 0; t < lay.T; ++t) {
        x(lay.s_imp(t)) = std::max(d.slack_p(t), 0.0) / kw;
        x(lay.s_exp(t)) = std::max(-d.slack_p(t), 0.0) / kw;
        x(lay.s_q(t)) = d.slack_q(t) / kw;
        for (int i = 0; i < lay.N; ++i) {
            x(lay.e(t, i)) = d.e(t, i);
            x(lay.f(t, i)) = d.f(t, i);
        }
        for (int i = 1; i < lay.N; ++i) {
            x(lay.imp(t, i)) = d.p_import(t, i) / kw;
            if (lay.chg(t, i) >= 0) {
                x(lay.chg(t, i)) = d.p_charge(t, i) / kw;
                x(lay.dis(t, i)) = d.p_discharge(t, i) / kw;
                x(lay.energy(t, i)) = d.energy(t, i) / kw;
            }
            if (lay.dg(t, i) >= 0) x(lay.dg(t, i)) = d.p_dg(t, i) / kw;
            if (lay.re(t, i) >= 0) x(lay.re(t, i)) = d.p_re(t, i) / kw;
            if (lay.qg(t, i) >= 0) x(lay.qg(t, i)) = d.q_gen(t, i) / kw;
        }
    }
    return x;
}

}  // namespace

StageTwoResult solve_stage2(const Scenario& s, const StageOneResult& baseline) {
    const NlpProblem p = build_stage2(s, baseline.costs);
    auto mdl = std::make_shared<const Model>(s, true, &baseline.costs);
    const Vec warm = warm_from_baseline(*mdl, s, baseline.dispatch);
    const auto rep = solve_nlp_multistart(p, start_points(*mdl, s, &warm), stage_options(s));

    StageTwoResult out;
    out.dispatch = extract(*mdl, s, rep, Stage::Trading);
    out.costs = device_costs(s, out.dispatch);
    const auto& d = out.dispatch;
    const auto& lay = mdl->layout();
    auto& tr = out.trade;
    const auto T = d.p_import.rows(), N = d.p_import.cols();
    tr.price = Eigen::MatrixXd::Zero(T, N);
    for (int t = 0; t < T; ++t) {
        for (int i = 1; i < N; ++i) {
            tr.price(t, i) = std::clamp(rep.x(lay.price(t, i)), s.prices.sell[t], s.prices.buy[t]);
            out.costs.imported(t, i) = import_cost(d.p_import(t, i), tr.price(t, i), s.dt);
            out.costs.loss(t, i) = loss_cost(d.p_loss(t, i), tr.price(t, i), s.dt);
        }
    }
    finish_totals(out.costs);
    split_settlement(s, d, tr);
    tr.cost = out.costs.total;
    tr.baseline = baseline.costs.total;
    tr.profit = tr.baseline - tr.cost;
    return out;
}

void split_settlement(const Scenario& s, const DispatchSolution& d, TradeOutcome& trade) {
    const auto T = d.p_import.rows(), N = d.p_import.cols();
    trade.settlement = trade.utility_share = trade.payment = Eigen::MatrixXd::Zero(T, N);
    trade.utility_bill = Eigen::VectorXd::Zero(T);
    for (Eigen::Index t = 0; t < T; ++t) {
        const double ub = s.prices.buy[static_cast<std::size_t>(t)];
        const double us = s.prices.sell[static_cast<std::size_t>(t)];
        // the utility bills what its meter at the slack records
        const double net = d.slack_p(t);
        double imports = 0.0, exports = 0.0;
        for (Eigen::Index i = 1; i < N; ++i) {
            const double q = d.p_import(t, i) + d.p_loss(t, i);
            trade.settlement(t, i) = q * trade.price(t, i) * s.dt;
            (q > 0.0 ? imports : exports) += q;
        }
        trade.utility_bill(t) = (net > 0.0 ? ub * net : us * net) * s.dt;
        for (Eigen::Index i = 1; i < N; ++i) {
            const double q = d.p_import(t, i) + d.p_loss(t, i);
            double w = 0.0;
            if (net > 0.0 && q > 0.0) w = q * net / imports;
            if (net < 0.0 && q < 0.0) w = q * net / exports;
            trade.utility_share(t, i) = w * (net > 0.0 ? ub : us) * s.dt;
            trade.payment(t, i) = trade.settlement(t, i) - trade.utility_share(t, i);
        }
    }
}

Eigen::VectorXd cash_flow_imbalance(const Scenario& s, const DispatchSolution& baseline) {
    const auto T = baseline.p_import.rows(), N = baseline.p_import.cols();
    Eigen::VectorXd out = Eigen::VectorXd::Zero(T);
    for (Eigen::Index t = 0; t < T; ++t) {
        const double ub = s.prices.buy[static_cast<std::size_t>(t)];
        const double us = s.prices.sell[static_cast<std::size_t>(t)];
        double paid = 0.0;
        for (Eigen::Index i = 1; i < N; ++i) {
            const double pim = baseline.p_import(t, i);
            paid += (pim > 0.0 ? ub : us) * pim * s.dt + ub * baseline.p_loss(t, i) * s.dt;
        }
        const double metered = baseline.slack_p(t);
        out(t) = paid - (metered > 0.0 ? ub : us) * metered * s.dt;
    }
    return out;
}

}  // namespace tes
