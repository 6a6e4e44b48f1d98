#include "tes/scenario.hpp"

#include "tes/error.hpp"

#include <charconv>
#include <cmath>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

namespace tes {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string_view::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return std::string(s.substr(a, b - a + 1));
}

std::string read_text(const std::string& path, ErrorCode code) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(code, "cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool parse_number(std::string_view s, double& out) {
    const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
    return r.ec == std::errc{} && r.ptr == s.data() + s.size();
}

bool parse_int(std::string_view s, long long& out) {
    const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
    return r.ec == std::errc{} && r.ptr == s.data() + s.size();
}

std::vector<std::string> words(const std::string& s) {
    std::istringstream ss(s);
    std::vector<std::string> out;
    for (std::string w; ss >> w;) out.push_back(w);
    return out;
}

std::string format(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string join(const std::vector<int>& ids) {
    std::string out;
    for (int id : ids) out += (out.empty() ? "" : " ") + std::to_string(id);
    return out;
}

std::string resolve(const std::string& base_dir, const std::string& p) {
    if (p.empty() || fs::path(p).is_absolute() || base_dir.empty()) return p;
    return (fs::path(base_dir) / p).lexically_normal().string();
}

}  // namespace

std::map<std::string, std::string> RunConfig::echo() const {
    return {
        {"case", case_path},
        {"load_profile", load_profile},
        {"pv_profile", pv_profile},
        {"price_profile", price_profile},
        {"steps", std::to_string(steps)},
        {"dt", format(dt)},
        {"v_min", format(v_min)},
        {"v_max", format(v_max)},
        {"sell_ratio", format(sell_ratio)},
        {"battery.capacity", format(battery.capacity)},
        {"battery.eta", format(battery.eta_charge)},
        {"battery.soc_min", format(battery.soc_min)},
        {"battery.soc_max", format(battery.soc_max)},
        {"battery.initial_soc", format(battery.initial_soc)},
        {"battery.p_max", format(battery.p_charge_max)},
        {"battery.degradation_cost", format(battery.degradation_cost)},
        {"dg.p_max", format(dg.p_max)},
        {"dg.a", format(dg.a)},
        {"dg.b", format(dg.b)},
        {"dg.c", format(dg.c)},
        {"pv_peak_kw", format(pv_peak_kw)},
        {"re_buses", join(re_buses)},
        {"battery_buses", join(battery_buses)},
        {"dg_buses", join(dg_buses)},
        {"solver.tol", format(solver.tol_eq)},
        {"solver.max_iterations", std::to_string(solver.max_iterations)},
        {"starts", std::to_string(starts)},
        {"seed", std::to_string(seed)},
        {"output", output_dir},
        {"verbosity", std::to_string(verbosity)},
    };
}

RunConfig parse_config(const std::string& text, const std::string& base_dir) {
    RunConfig cfg;
    std::vector<std::string> problems;

    using Setter = std::function<bool(const std::string&)>;
    auto real = [](double& slot) -> Setter {
        return [&slot](const std::string& v) { return parse_number(v, slot); };
    };
    auto integer = [](auto& slot, long long lo) -> Setter {
        return [&slot, lo](const std::string& v) {
            long long n = 0;
            if (!parse_int(v, n) || n < lo) return false;
            slot = static_cast<std::remove_reference_t<decltype(slot)>>(n);
            return true;
        };
    };
    auto path = [&](std::string& slot) -> Setter {
        return [&slot, &base_dir](const std::string& v) {
            slot = resolve(base_dir, v);
            return !v.empty();
        };
    };
    auto ids = [](std::vector<int>& slot) -> Setter {
        return [&slot](const std::string& v) {
            slot.clear();
            for (const auto& w : words(v)) {
                long long n = 0;
                if (!parse_int(w, n) || n < 1) return false;
                slot.push_back(static_cast<int>(n));
            }
            return true;
        };
    };
    auto both = [](double& a, double& b) -> Setter {
        return [&a, &b](const std::string& v) { return parse_number(v, a) && parse_number(v, b); };
    };

    const std::map<std::string, Setter> keys = {
        {"case", path(cfg.case_path)},
        {"load_profile", path(cfg.load_profile)},
        {"pv_profile", path(cfg.pv_profile)},
        {"price_profile", path(cfg.price_profile)},
        {"steps", integer(cfg.steps, 1)},
        {"dt", real(cfg.dt)},
        {"v_min", real(cfg.v_min)},
        {"v_max", real(cfg.v_max)},
        {"sell_ratio", real(cfg.sell_ratio)},
        {"battery.capacity", real(cfg.battery.capacity)},
        {"battery.eta", both(cfg.battery.eta_charge, cfg.battery.eta_discharge)},
        {"battery.soc_min", real(cfg.battery.soc_min)},
        {"battery.soc_max", real(cfg.battery.soc_max)},
        {"battery.initial_soc", real(cfg.battery.initial_soc)},
        {"battery.p_max", both(cfg.battery.p_charge_max, cfg.battery.p_discharge_max)},
        {"battery.degradation_cost", real(cfg.battery.degradation_cost)},
        {"dg.p_max", real(cfg.dg.p_max)},
        {"dg.a", real(cfg.dg.a)},
        {"dg.b", real(cfg.dg.b)},
        {"dg.c", real(cfg.dg.c)},
        {"pv_peak_kw", real(cfg.pv_peak_kw)},
        {"re_buses", ids(cfg.re_buses)},
        {"battery_buses", ids(cfg.battery_buses)},
        {"dg_buses", ids(cfg.dg_buses)},
        {"solver.tol", both(cfg.solver.tol_eq, cfg.solver.tol_ineq)},
        {"solver.max_iterations", integer(cfg.solver.max_iterations, 1)},
        {"starts", integer(cfg.starts, 1)},
        {"seed", integer(cfg.seed, 0)},
        {"output", path(cfg.output_dir)},
        {"verbosity", integer(cfg.verbosity, 0)},
    };

    std::istringstream in(text);
    int lineno = 0;
    for (std::string raw; std::getline(in, raw);) {
        ++lineno;
        const std::string line = trim(std::string_view(raw).substr(0, raw.find('#')));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = "line " + std::to_string(lineno);
        if (eq == std::string::npos) {
            problems.push_back(where + ": expected key = value");
            continue;
        }
        const std::string key = trim(std::string_view(line).substr(0, eq));
        const std::string value = trim(std::string_view(line).substr(eq + 1));
        const auto it = keys.find(key);
        if (it == keys.end()) {
            problems.push_back(where + ": unknown key '" + key + "'");
        } else if (!it->second(value)) {
            problems.push_back(key + ": bad value '" + value + "'");
        }
    }

    const std::string data = TES_DATA_DIR;
    if (cfg.case_path.empty()) problems.push_back("case: required");
    if (cfg.load_profile.empty()) cfg.load_profile = data + "/load_shape.txt";
    if (cfg.pv_profile.empty()) cfg.pv_profile = data + "/pv_shape.txt";
    if (cfg.price_profile.empty()) cfg.price_profile = data + "/tou_hourly.txt";
    if (cfg.output_dir.empty()) cfg.output_dir = "results";

    if (!(cfg.dt > 0.0)) problems.push_back("dt: must be positive");
    if (!(0.0 < cfg.v_min && cfg.v_min < cfg.v_max)) problems.push_back("v_min/v_max: need 0 < v_min < v_max");
    if (!(cfg.sell_ratio >= 0.0 && cfg.sell_ratio <= 1.0)) problems.push_back("sell_ratio: must lie in [0, 1]");
    if (!(cfg.pv_peak_kw >= 0.0)) problems.push_back("pv_peak_kw: must be nonnegative");
    for (const auto& [name, check] : std::initializer_list<std::pair<const char*, std::function<void()>>>{
             {"battery", [&] { cfg.battery.validate(); }}, {"dg", [&] { cfg.dg.validate(); }}}) {
        try {
            check();
        } catch (const Error& e) {
            problems.push_back(std::string(name) + ": " + e.what());
        }
    }
    for (const auto& [key, file] : {std::pair{"case", &cfg.case_path}, std::pair{"load_profile", &cfg.load_profile},
                                    std::pair{"pv_profile", &cfg.pv_profile},
                                    std::pair{"price_profile", &cfg.price_profile}}) {
        if (!file->empty() && !fs::is_regular_file(*file)) problems.push_back(std::string(key) + ": no such file " + *file);
    }

    if (problems.empty()) {
        // profile lengths have to match the horizon
        try {
            const auto load = read_profile(cfg.load_profile);
            const auto pv = read_profile(cfg.pv_profile);
            const auto price = read_profile(cfg.price_profile);
            const auto T = static_cast<std::size_t>(cfg.steps);
            if (load.size() != T) problems.push_back("load_profile: " + std::to_string(load.size()) + " values for " + std::to_string(T) + " steps");
            if (pv.size() != T) problems.push_back("pv_profile: " + std::to_string(pv.size()) + " values for " + std::to_string(T) + " steps");
            const bool hourly = price.size() == 24 && T == 48;
            if (price.size() != T && !hourly) {
                problems.push_back("price_profile: " + std::to_string(price.size()) + " values for " + std::to_string(T) + " steps");
            }
        } catch (const Error& e) {
            problems.push_back(e.what());
        }
    }

    if (!problems.empty()) {
        std::string msg;
        for (const auto& p : problems) msg += (msg.empty() ? "" : "; ") + p;
        throw Error(ErrorCode::ConfigInvalid, msg);
    }
    return cfg;
}

RunConfig load_config(const std::string& path) {
    const std::string text = read_text(path, ErrorCode::ConfigInvalid);
    return parse_config(text, fs::path(path).parent_path().string());
}

std::vector<double> read_profile(const std::string& path) {
    const std::string text = read_text(path, ErrorCode::ConfigInvalid);
    std::istringstream in(text);
    std::vector<double> out;
    int lineno = 0;
    for (std::string raw; std::getline(in, raw);) {
        ++lineno;
        const auto w = words(raw.substr(0, raw.find('#')));
        if (w.empty()) continue;
        double index = 0.0, value = 0.0;
        const bool ok = w.size() == 1 ? parse_number(w[0], value)
                      : w.size() == 2 ? parse_number(w[0], index) && parse_number(w[1], value)
                                      : false;
        if (!ok) throw Error(ErrorCode::ConfigInvalid, path + ":" + std::to_string(lineno) + ": expected [step] value");
        if (w.size() == 2 && index != static_cast<double>(out.size())) {
            throw Error(ErrorCode::ConfigInvalid, path + ":" + std::to_string(lineno) + ": steps must count up from 0");
        }
        out.push_back(value);
    }
    return out;
}

PriceSchedule derive_halfhour_prices(const std::vector<double>& hourly) {
    if (hourly.size() != 24) {
        throw Error(ErrorCode::WrongLength, "expected 24 hourly prices, got " + std::to_string(hourly.size()));
    }
    PriceSchedule out;
    for (std::size_t h = 0; h < 24; ++h) {
        out.buy.push_back(hourly[h]);
        out.buy.push_back(0.5 * (hourly[h] + hourly[(h + 1) % 24]));
    }
    for (double b : out.buy) out.sell.push_back(b / 2.0);
    return out;
}

Scenario build_scenario(const RunConfig& cfg) {
    Scenario s;
    s.network = load_case_file(cfg.case_path);
    s.steps = cfg.steps;
    s.dt = cfg.dt;
    s.v_min = cfg.v_min;
    s.v_max = cfg.v_max;
    s.solver = cfg.solver;
    s.starts = cfg.starts;
    s.seed = cfg.seed;

    const auto T = static_cast<Eigen::Index>(cfg.steps);
    const auto N = static_cast<Eigen::Index>(s.network.size());
    const auto load = read_profile(cfg.load_profile);
    const auto pv = read_profile(cfg.pv_profile);
    auto price = read_profile(cfg.price_profile);
    if (static_cast<Eigen::Index>(load.size()) != T || static_cast<Eigen::Index>(pv.size()) != T) {
        throw Error(ErrorCode::WrongLength, "profiles must have one value per step");
    }

    s.load_p.resize(T, N);
    s.load_q.resize(T, N);
    for (Eigen::Index t = 0; t < T; ++t)
        for (Eigen::Index i = 0; i < N; ++i) {
            const auto& b = s.network.buses[static_cast<std::size_t>(i)];
            s.load_p(t, i) = load[static_cast<std::size_t>(t)] * b.base_load_p;
            s.load_q(t, i) = load[static_cast<std::size_t>(t)] * b.base_load_q;
        }

    if (static_cast<Eigen::Index>(price.size()) == T) {
        s.prices.buy = price;
    } else {
        s.prices.buy = derive_halfhour_prices(price).buy;
        if (static_cast<Eigen::Index>(s.prices.buy.size()) != T) {
            throw Error(ErrorCode::WrongLength, "price profile does not match the horizon");
        }
    }
    for (double b : s.prices.buy) s.prices.sell.push_back(cfg.sell_ratio * b);

    // without explicit placement: renewables at every generating bus, storage
    // and a diesel unit in every microgrid
    auto placed = [&](const std::vector<int>& ids, auto fallback) {
        std::vector<int> out = ids;
        if (out.empty())
            for (const auto& b : s.network.buses)
                if (fallback(b)) out.push_back(b.id);
        return out;
    };
    const auto re = placed(cfg.re_buses, [](const Bus& b) { return b.kind == BusKind::Prosumer || b.kind == BusKind::Producer; });
    const auto bat = placed(cfg.battery_buses, [](const Bus& b) { return b.is_microgrid; });
    const auto dg = placed(cfg.dg_buses, [](const Bus& b) { return b.is_microgrid; });

    s.devices.assign(s.network.size(), {});
    auto at = [&](int id) -> DeviceSet& {
        if (id == s.network.buses.front().id) throw Error(ErrorCode::ConfigInvalid, "the slack bus cannot host devices");
        return s.devices[s.network.index_of(id)];
    };
    for (int id : re) {
        REProfile p;
        for (double v : pv) p.available.push_back(cfg.pv_peak_kw * v);
        at(id).re = p;
    }
    for (int id : bat) at(id).battery = cfg.battery;
    for (int id : dg) at(id).dg = cfg.dg;
    s.validate();
    return s;
}

Scenario truncate_horizon(const Scenario& s, int steps) {
    if (steps < 1 || steps > s.steps) {
        throw Error(ErrorCode::WrongLength, "cannot cut a " + std::to_string(s.steps) + "-step horizon to " + std::to_string(steps));
    }
    Scenario out = s;
    out.steps = steps;
    out.load_p = s.load_p.topRows(steps);
    out.load_q = s.load_q.topRows(steps);
    out.prices.buy.resize(static_cast<std::size_t>(steps));
    out.prices.sell.resize(static_cast<std::size_t>(steps));
    for (auto& d : out.devices)
        if (d.re) d.re->available.resize(static_cast<std::size_t>(steps));
    return out;
}

ResultsBundle run_scenario(const RunConfig& cfg) { return run_scenario(cfg, build_scenario(cfg)); }

ResultsBundle run_scenario(const RunConfig& cfg, const Scenario& s) {
    ResultsBundle out;
    out.config = cfg;
    out.scenario = s;
    const auto t0 = std::chrono::steady_clock::now();

    auto require = [](const SolveReport& r, const char* stage) {
        if (r.status == SolveStatus::Optimal) return;
        const std::string msg = std::string(stage) + " ended " + std::string(to_string(r.status)) + " after " +
                                std::to_string(r.iterations) + " iterations: " + r.message;
        throw Error(r.status == SolveStatus::Infeasible ? ErrorCode::InfeasibleScenario : ErrorCode::SolverFailure, msg);
    };
    try {
        out.baseline = solve_stage1(s);
    } catch (const Error& e) {
        throw Error(e.code(), std::string("stage 1: ") + e.what());
    }
    require(out.baseline.dispatch.report, "stage 1");
    try {
        out.trading = solve_stage2(s, out.baseline);
    } catch (const Error& e) {
        throw Error(e.code(), std::string("stage 2: ") + e.what());
    }
    require(out.trading.dispatch.report, "stage 2");
    try {
        out.allocation = allocate(s, out.trading);
    } catch (const Error& e) {
        throw Error(e.code(), std::string("allocation: ") + e.what());
    }
    out.fairness = fairness_metrics(out.allocation);
    out.imbalance = cash_flow_imbalance(s, out.baseline.dispatch);
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace tes
