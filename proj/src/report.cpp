#include "tes/report.hpp"

#include "tes/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace tes {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string num(double v) {
    if (v == 0.0) return "0";  // no "-0"
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

struct Csv {
    std::string name;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void write(const fs::path& dir) const {
        std::ofstream out(dir / name, std::ios::binary);
        if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + (dir / name).string());
        auto line = [&](const std::vector<std::string>& cells) {
            for (std::size_t k = 0; k < cells.size(); ++k) out << (k ? "," : "") << cells[k];
            out << '\n';
        };
        line(header);
        for (const auto& r : rows) line(r);
        if (!out) throw Error(ErrorCode::IoFailure, "write failed: " + (dir / name).string());
    }
};

ordered_json report_json(const SolveReport& r) {
    return {{"status", std::string(to_string(r.status))},
            {"iterations", r.iterations},
            {"objective", r.objective},
            {"eq_violation", r.eq_violation},
            {"ineq_violation", r.ineq_violation},
            {"message", r.message}};
}

}  // namespace

std::vector<std::string> emit_reports(const ResultsBundle& b, const std::string& dir) {
    const Scenario& s = b.scenario;
    const auto T = static_cast<Eigen::Index>(s.steps);
    const auto N = static_cast<Eigen::Index>(s.network.size());
    auto id = [&](Eigen::Index i) { return std::to_string(s.network.buses[static_cast<std::size_t>(i)].id); };
    const std::vector<std::pair<const char*, const DispatchSolution*>> stages = {
        {"baseline", &b.baseline.dispatch}, {"trading", &b.trading.dispatch}};

    Csv volt{"voltages.csv", {"bus", "step", "v_baseline", "v_trading"}, {}};
    for (Eigen::Index i = 0; i < N; ++i)
        for (Eigen::Index t = 0; t < T; ++t)
            volt.rows.push_back({id(i), std::to_string(t), num(b.baseline.dispatch.voltage(int(t), int(i))),
                                 num(b.trading.dispatch.voltage(int(t), int(i)))});

    Csv disp{"dispatch.csv",
             {"stage", "bus", "step", "p_import", "p_battery", "p_charge", "p_discharge", "p_dg", "p_re", "q_gen",
              "p_loss", "soc"},
             {}};
    for (const auto& [name, d] : stages)
        for (Eigen::Index i = 0; i < N; ++i) {
            const auto& bat = s.devices[static_cast<std::size_t>(i)].battery;
            for (Eigen::Index t = 0; t < T; ++t) {
                disp.rows.push_back({name, id(i), std::to_string(t), num(d->p_import(t, i)),
                                     num(d->p_discharge(t, i) - d->p_charge(t, i)), num(d->p_charge(t, i)),
                                     num(d->p_discharge(t, i)), num(d->p_dg(t, i)), num(d->p_re(t, i)),
                                     num(d->q_gen(t, i)), num(d->p_loss(t, i)),
                                     bat ? num(d->energy(t, i) / bat->capacity) : ""});
            }
        }

    const auto& tr = b.trading.trade;
    const auto& a = b.allocation;
    Csv prices{"prices.csv", {"step", "u_b", "u_s", "pi_star", "pooled"}, {}};
    for (Eigen::Index i = 1; i < N; ++i) prices.header.push_back("pi_" + id(i));
    for (Eigen::Index t = 0; t < T; ++t) {
        const auto k = static_cast<std::size_t>(t);
        std::vector<std::string> row = {std::to_string(t), num(s.prices.buy[k]), num(s.prices.sell[k]),
                                        num(a.price(t)), a.pooled[k] ? "1" : "0"};
        for (Eigen::Index i = 1; i < N; ++i) row.push_back(num(tr.price(t, i)));
        prices.rows.push_back(std::move(row));
    }

    Csv cash{"cashflow.csv", {"bus", "step", "group", "delta", "delta_star", "pool_energy", "utility_share"}, {}};
    Csv prof{"profits.csv", {"bus", "step", "group", "profit", "profit_star", "phi"}, {}};
    for (Eigen::Index i = 1; i < N; ++i)
        for (Eigen::Index t = 0; t < T; ++t) {
            const std::string g(to_string(a.group[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)]));
            cash.rows.push_back({id(i), std::to_string(t), g, num(tr.payment(t, i)), num(a.payment(t, i)),
                                 num(a.pool_energy(t, i)), num(tr.utility_share(t, i))});
            prof.rows.push_back({id(i), std::to_string(t), g, num(tr.profit(t, i)), num(a.profit(t, i)),
                                 num(a.unit_profit(t, i))});
        }

    Csv sum{"summary.csv",
            {"step", "u_b", "u_s", "pi_star", "payment_total", "payment_star_total", "profit_total",
             "profit_star_total", "imbalance", "slack_baseline", "slack_trading", "loss_baseline", "loss_trading",
             "importer_spread", "exporter_spread", "v_min", "v_max"},
            {}};
    for (Eigen::Index t = 0; t < T; ++t) {
        const auto k = static_cast<std::size_t>(t);
        double vlo = 1e9, vhi = 0.0;
        for (const auto& [name, d] : stages)
            for (Eigen::Index i = 0; i < N; ++i) {
                vlo = std::min(vlo, d->voltage(int(t), int(i)));
                vhi = std::max(vhi, d->voltage(int(t), int(i)));
            }
        sum.rows.push_back({std::to_string(t), num(s.prices.buy[k]), num(s.prices.sell[k]), num(a.price(t)),
                            num(tr.payment.row(t).sum()), num(a.payment.row(t).sum()), num(tr.profit.row(t).sum()),
                            num(a.profit.row(t).sum()), num(b.imbalance(t)), num(b.baseline.dispatch.slack_p(t)),
                            num(b.trading.dispatch.slack_p(t)), num(b.baseline.dispatch.p_loss.row(t).sum()),
                            num(b.trading.dispatch.p_loss.row(t).sum()), num(b.fairness.importer_spread(t)),
                            num(b.fairness.exporter_spread(t)), num(vlo), num(vhi)});
    }

    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw Error(ErrorCode::IoFailure, "cannot create " + dir);
    const std::vector<const Csv*> tables = {&volt, &disp, &prices, &cash, &prof, &sum};
    ordered_json files = ordered_json::array();
    std::vector<std::string> written;
    for (const Csv* c : tables) {
        c->write(dir);
        files.push_back({{"name", c->name}, {"rows", c->rows.size()}, {"columns", c->header}});
        written.push_back((fs::path(dir) / c->name).string());
    }

    ordered_json buses = ordered_json::array();
    for (const auto& bus : s.network.buses) buses.push_back(bus.id);
    ordered_json config = ordered_json::object();
    // the output location is left out so two result directories compare equal
    for (const auto& [k, v] : b.config.echo())
        if (k != "output") config[k] = v;
    ordered_json manifest = {
        {"schema_version", b.schema_version},
        {"steps", s.steps},
        {"dt_hours", s.dt},
        {"buses", buses},
        {"v_min", s.v_min},
        {"v_max", s.v_max},
        {"phi_definition", "reconstructed: gain over utility prices per settled kWh"},
        {"files", files},
        {"stages", {{"baseline", report_json(b.baseline.dispatch.report)},
                    {"trading", report_json(b.trading.dispatch.report)}}},
        {"config", config},
    };
    const fs::path mpath = fs::path(dir) / "manifest.json";
    std::ofstream out(mpath, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + mpath.string());
    out << manifest.dump(2) << '\n';
    written.push_back(mpath.string());
    return written;
}

namespace {

// Columns of a CSV by header name.
struct Table {
    std::vector<std::string> header;
    std::map<std::string, std::vector<std::string>> col;
    std::size_t rows = 0;

    bool has(const std::string& c) const { return col.count(c) != 0; }
    const std::string& at(const std::string& c, std::size_t r) const { return col.at(c)[r]; }
    double num(const std::string& c, std::size_t r) const {
        const auto& s = at(c, r);
        if (s.empty()) return std::nan("");
        return std::stod(s);
    }
    long idx(const std::string& c, std::size_t r) const { return std::stol(at(c, r)); }
};

Table read_csv(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoFailure, "cannot read " + path.string());
    auto split = [](const std::string& line) {
        std::vector<std::string> out;
        std::string cell;
        std::istringstream ss(line);
        while (std::getline(ss, cell, ',')) out.push_back(cell);
        if (!line.empty() && line.back() == ',') out.emplace_back();
        return out;
    };
    Table t;
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::IoFailure, path.string() + " is empty");
    t.header = split(line);
    for (const auto& h : t.header) t.col[h];
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split(line);
        if (cells.size() != t.header.size()) {
            throw Error(ErrorCode::IoFailure, path.string() + ": row " + std::to_string(t.rows + 1) + " has " +
                                                  std::to_string(cells.size()) + " cells");
        }
        for (std::size_t k = 0; k < cells.size(); ++k) t.col[t.header[k]].push_back(cells[k]);
        ++t.rows;
    }
    return t;
}

// 9 significant digits leave at most half a unit in the last place
constexpr double kPrintRel = 5e-9;

}  // namespace

std::vector<CheckFinding> check_reports(const std::string& dir, const CheckOptions& opts) {
    std::vector<CheckFinding> found;
    auto flag = [&](const std::string& file, const std::string& what) { found.push_back({file, what}); };
    const fs::path root(dir);

    ordered_json manifest;
    {
        std::ifstream in(root / "manifest.json", std::ios::binary);
        if (!in) throw Error(ErrorCode::IoFailure, "no manifest.json in " + dir);
        try {
            in >> manifest;
        } catch (const std::exception& e) {
            throw Error(ErrorCode::IoFailure, std::string("manifest.json: ") + e.what());
        }
    }
    if (!manifest.contains("schema_version")) flag("manifest.json", "schema_version missing");
    const int steps = manifest.value("steps", 0);
    const double v_min = manifest.value("v_min", 0.95), v_max = manifest.value("v_max", 1.05);
    for (const auto& f : manifest.value("files", ordered_json::array())) {
        const std::string name = f.value("name", "");
        if (!fs::is_regular_file(root / name)) flag(name, "listed in the manifest but missing");
    }
    for (const char* stage : {"baseline", "trading"}) {
        const auto st = manifest["stages"][stage].value("status", "");
        if (st != "Optimal") flag("manifest.json", std::string(stage) + " status " + st);
    }

    // transfers: zero-sum per step, before and after allocation
    const Table cash = read_csv(root / "cashflow.csv");
    const Table prof = read_csv(root / "profits.csv");
    std::vector<double> pay(steps, 0.0), pay_star(steps, 0.0), pay_mag(steps, 0.0), pay_star_mag(steps, 0.0);
    for (std::size_t r = 0; r < cash.rows; ++r) {
        const long t = cash.idx("step", r);
        if (t < 0 || t >= steps) {
            flag("cashflow.csv", "row " + std::to_string(r + 1) + ": step out of range");
            continue;
        }
        pay[t] += cash.num("delta", r);
        pay_star[t] += cash.num("delta_star", r);
        pay_mag[t] += std::abs(cash.num("delta", r));
        pay_star_mag[t] += std::abs(cash.num("delta_star", r));
    }
    for (int t = 0; t < steps; ++t) {
        if (std::abs(pay[t]) > opts.zero_sum_tol + kPrintRel * pay_mag[t])
            flag("cashflow.csv", "step " + std::to_string(t) + ": sum of delta = " + num(pay[t]));
        if (std::abs(pay_star[t]) > opts.zero_sum_tol + kPrintRel * pay_star_mag[t])
            flag("cashflow.csv", "step " + std::to_string(t) + ": sum of delta* = " + num(pay_star[t]));
    }

    // allocation conserves the step's total profit; fairness within groups
    std::vector<double> gain(steps, 0.0), gain_star(steps, 0.0), mag(steps, 0.0);
    std::map<std::pair<long, std::string>, std::pair<double, double>> range;
    for (std::size_t r = 0; r < prof.rows; ++r) {
        const long t = prof.idx("step", r);
        if (t < 0 || t >= steps) continue;
        gain[t] += prof.num("profit", r);
        gain_star[t] += prof.num("profit_star", r);
        mag[t] += std::abs(prof.num("profit", r)) + std::abs(prof.num("profit_star", r));
        const auto& g = prof.at("group", r);
        if (g == "idle") continue;
        const double phi = prof.num("phi", r);
        auto [it, fresh] = range.try_emplace({t, g}, phi, phi);
        if (!fresh) it->second = {std::min(it->second.first, phi), std::max(it->second.second, phi)};
    }
    for (int t = 0; t < steps; ++t)
        if (std::abs(gain[t] - gain_star[t]) > opts.conservation_tol + kPrintRel * mag[t])
            flag("profits.csv", "step " + std::to_string(t) + ": allocation changed total profit by " +
                                    num(gain_star[t] - gain[t]));
    for (const auto& [key, lohi] : range) {
        const double spread = lohi.second - lohi.first;
        const double tol = key.second == "exporter" ? opts.exporter_spread_tol : opts.importer_spread_tol;
        if (spread >= tol) flag("profits.csv", "step " + std::to_string(key.first) + ": " + key.second + " phi spread " + num(spread));
    }

    // every price in the box, one pool price per step
    const Table prices = read_csv(root / "prices.csv");
    if (static_cast<int>(prices.rows) != steps) flag("prices.csv", "expected one row per step");
    for (std::size_t r = 0; r < prices.rows; ++r) {
        const double ub = prices.num("u_b", r), us = prices.num("u_s", r);
        const double tol = opts.price_tol + kPrintRel * ub;
        for (const auto& h : prices.header) {
            if (h != "pi_star" && h.rfind("pi_", 0) != 0) continue;
            const double p = prices.num(h, r);
            if (!(p >= us - tol && p <= ub + tol))
                flag("prices.csv", "step " + prices.at("step", r) + ": " + h + " = " + num(p) + " outside [" + num(us) +
                                       ", " + num(ub) + "]");
        }
    }

    const Table volt = read_csv(root / "voltages.csv");
    for (std::size_t r = 0; r < volt.rows; ++r)
        for (const char* c : {"v_baseline", "v_trading"}) {
            const double v = volt.num(c, r);
            if (!(v >= v_min - opts.voltage_tol && v <= v_max + opts.voltage_tol))
                flag("voltages.csv", "bus " + volt.at("bus", r) + " step " + volt.at("step", r) + ": " + c + " = " + num(v));
        }

    // stored energy stays in its window
    const Table disp = read_csv(root / "dispatch.csv");
    const auto& cfg = manifest["config"];
    auto cfg_num = [&](const char* key, double fallback) {
        return cfg.contains(key) ? std::stod(cfg[key].get<std::string>()) : fallback;
    };
    const double soc_lo = cfg_num("battery.soc_min", 0.4), soc_hi = cfg_num("battery.soc_max", 0.9);
    for (std::size_t r = 0; r < disp.rows; ++r) {
        const double soc = disp.num("soc", r);
        if (std::isnan(soc)) continue;
        if (soc < soc_lo - 1e-6 || soc > soc_hi + 1e-6)
            flag("dispatch.csv", disp.at("stage", r) + " bus " + disp.at("bus", r) + " step " + disp.at("step", r) +
                                     ": soc " + num(soc));
    }
    return found;
}

}  // namespace tes
