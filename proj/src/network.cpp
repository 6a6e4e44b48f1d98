#include "tes/network.hpp"

#include "tes/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace tes {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::MalformedCase: return "MalformedCase";
        case ErrorCode::NotRadial: return "NotRadial";
        case ErrorCode::DuplicateBusId: return "DuplicateBusId";
        case ErrorCode::ZeroImpedanceBranch: return "ZeroImpedanceBranch";
        case ErrorCode::RateLimitExceeded: return "RateLimitExceeded";
        case ErrorCode::SocOutOfRange: return "SocOutOfRange";
        case ErrorCode::DispatchOutOfRange: return "DispatchOutOfRange";
        case ErrorCode::NegativeLoss: return "NegativeLoss";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::Diverged: return "Diverged";
        case ErrorCode::SingularJacobian: return "SingularJacobian";
        case ErrorCode::InfeasibleScenario: return "InfeasibleScenario";
        case ErrorCode::MissingBaseline: return "MissingBaseline";
        case ErrorCode::EmptyTradingStep: return "EmptyTradingStep";
        case ErrorCode::ZeroTradedEnergy: return "ZeroTradedEnergy";
        case ErrorCode::PriceOutOfBounds: return "PriceOutOfBounds";
        case ErrorCode::WrongLength: return "WrongLength";
        case ErrorCode::ConfigInvalid: return "ConfigInvalid";
        case ErrorCode::SolverFailure: return "SolverFailure";
        case ErrorCode::IoFailure: return "IoFailure";
    }
    return "Unknown";
}

std::string_view to_string(BusKind kind) {
    switch (kind) {
        case BusKind::Slack: return "slack";
        case BusKind::Consumer: return "consumer";
        case BusKind::Producer: return "producer";
        case BusKind::Prosumer: return "prosumer";
    }
    return "consumer";
}

BusKind parse_bus_kind(std::string_view text) {
    if (text == "slack") return BusKind::Slack;
    if (text == "consumer") return BusKind::Consumer;
    if (text == "producer") return BusKind::Producer;
    if (text == "prosumer") return BusKind::Prosumer;
    throw Error(ErrorCode::MalformedCase, "unknown bus kind '" + std::string(text) + "'");
}

std::size_t Network::index_of(int bus_id) const {
    if (bus_id < 1 || static_cast<std::size_t>(bus_id) > buses.size()) {
        throw Error(ErrorCode::MalformedCase, "unknown bus id " + std::to_string(bus_id));
    }
    return static_cast<std::size_t>(bus_id - 1);
}

namespace {

std::vector<std::string> split_ws(const std::string& line) {
    std::istringstream is(line);
    std::vector<std::string> out;
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

double to_double(const std::string& tok, int line_no) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(v)) {
        throw Error(ErrorCode::MalformedCase,
                    "line " + std::to_string(line_no) + ": bad number '" + tok + "'");
    }
    return v;
}

int to_int(const std::string& tok, int line_no) {
    int v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) {
        throw Error(ErrorCode::MalformedCase,
                    "line " + std::to_string(line_no) + ": bad integer '" + tok + "'");
    }
    return v;
}

void expect_columns(const std::vector<std::string>& toks, std::size_t n, int line_no) {
    if (toks.size() != n) {
        throw Error(ErrorCode::MalformedCase, "line " + std::to_string(line_no) + ": expected " +
                                                  std::to_string(n) + " columns, got " +
                                                  std::to_string(toks.size()));
    }
}

}  // namespace

Network parse_case(std::string_view case_text) {
    Network net;
    bool have_base = false;
    std::istringstream in{std::string(case_text)};
    std::string line;
    int line_no = 0;
    std::set<int> seen;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        auto toks = split_ws(line);
        if (toks.empty()) continue;
        const auto& tag = toks[0];
        if (tag == "BASE") {
            expect_columns(toks, 3, line_no);
            net.base_mva = to_double(toks[1], line_no);
            net.base_kv = to_double(toks[2], line_no);
            if (net.base_mva <= 0.0 || net.base_kv <= 0.0) {
                throw Error(ErrorCode::MalformedCase, "base quantities must be positive");
            }
            have_base = true;
        } else if (tag == "BUS") {
            expect_columns(toks, 6, line_no);
            Bus bus;
            bus.id = to_int(toks[1], line_no);
            bus.kind = parse_bus_kind(toks[2]);
            bus.base_load_p = to_double(toks[3], line_no);
            bus.base_load_q = to_double(toks[4], line_no);
            bus.is_microgrid = to_int(toks[5], line_no) != 0;
            if (!seen.insert(bus.id).second) {
                throw Error(ErrorCode::DuplicateBusId, "bus " + std::to_string(bus.id));
            }
            if (bus.base_load_p < 0.0) {
                throw Error(ErrorCode::MalformedCase,
                            "bus " + std::to_string(bus.id) + " has negative real load");
            }
            net.buses.push_back(std::move(bus));
        } else if (tag == "BRANCH") {
            expect_columns(toks, 5, line_no);
            Branch br;
            br.from_bus = to_int(toks[1], line_no);
            br.to_bus = to_int(toks[2], line_no);
            br.r_ohm = to_double(toks[3], line_no);
            br.x_ohm = to_double(toks[4], line_no);
            net.branches.push_back(br);
        } else {
            throw Error(ErrorCode::MalformedCase,
                        "line " + std::to_string(line_no) + ": unknown record '" + tag + "'");
        }
    }
    if (!have_base) throw Error(ErrorCode::MalformedCase, "missing BASE record");
    if (net.buses.empty()) throw Error(ErrorCode::MalformedCase, "no BUS records");

    std::sort(net.buses.begin(), net.buses.end(),
              [](const Bus& a, const Bus& b) { return a.id < b.id; });
    for (std::size_t k = 0; k < net.buses.size(); ++k) {
        if (net.buses[k].id != static_cast<int>(k) + 1) {
            throw Error(ErrorCode::MalformedCase, "bus ids must be contiguous starting at 1");
        }
    }
    const auto slack_count = std::count_if(net.buses.begin(), net.buses.end(),
                                           [](const Bus& b) { return b.kind == BusKind::Slack; });
    if (slack_count != 1 || net.buses.front().kind != BusKind::Slack) {
        throw Error(ErrorCode::MalformedCase, "exactly one slack bus is required and it must be bus 1");
    }

    const double z_base = net.base_ohm();
    for (auto& br : net.branches) {
        if (br.r_ohm < 0.0 || br.x_ohm < 0.0) {
            throw Error(ErrorCode::MalformedCase, "negative branch impedance");
        }
        br.r = br.r_ohm / z_base;
        br.x = br.x_ohm / z_base;
    }

    if (auto findings = validate_radial(net); !findings.empty()) {
        std::string msg;
        for (const auto& f : findings) {
            if (!msg.empty()) msg += "; ";
            msg += f.message;
        }
        throw Error(ErrorCode::NotRadial, msg);
    }
    return net;
}

Network load_case_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error(ErrorCode::IoFailure, "cannot open case file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_case(ss.str());
}

std::string emit_case(const Network& net) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "# BASE mva kv\n";
    os << "BASE " << net.base_mva << ' ' << net.base_kv << '\n';
    os << "# BUS id kind Pd_kW Qd_kvar microgrid\n";
    for (const auto& b : net.buses) {
        os << "BUS " << b.id << ' ' << to_string(b.kind) << ' ' << b.base_load_p << ' '
           << b.base_load_q << ' ' << (b.is_microgrid ? 1 : 0) << '\n';
    }
    os << "# BRANCH from to r_ohm x_ohm\n";
    for (const auto& br : net.branches) {
        os << "BRANCH " << br.from_bus << ' ' << br.to_bus << ' ' << br.r_ohm << ' ' << br.x_ohm
           << '\n';
    }
    return os.str();
}

std::vector<RadialFinding> validate_radial(const Network& net) {
    using Kind = RadialFinding::Kind;
    std::vector<RadialFinding> findings;
    const std::size_t n = net.buses.size();
    if (n == 0) {
        findings.push_back({Kind::MissingSlack, "network has no buses"});
        return findings;
    }
    std::vector<int> ids;
    for (const auto& b : net.buses) ids.push_back(b.id);
    auto pos = [&](int id) -> long {
        auto it = std::find(ids.begin(), ids.end(), id);
        return it == ids.end() ? -1 : static_cast<long>(it - ids.begin());
    };
    const long slack = [&] {
        for (std::size_t k = 0; k < n; ++k) {
            if (net.buses[k].kind == BusKind::Slack) return static_cast<long>(k);
        }
        return -1L;
    }();
    if (slack < 0) findings.push_back({Kind::MissingSlack, "no slack bus"});

    // union-find over valid endpoints; a union of already-joined buses is a cycle
    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    auto find = [&](std::size_t a) {
        while (parent[a] != a) a = parent[a] = parent[parent[a]];
        return a;
    };
    bool cycle_reported = false;
    for (const auto& br : net.branches) {
        const long a = pos(br.from_bus), b = pos(br.to_bus);
        if (a < 0 || b < 0) {
            findings.push_back({Kind::DanglingEndpoint, "branch " + std::to_string(br.from_bus) + "-" +
                                                            std::to_string(br.to_bus) +
                                                            " references a missing bus"});
            continue;
        }
        if (a == b) {
            findings.push_back(
                {Kind::SelfLoop, "branch " + std::to_string(br.from_bus) + " is a self loop"});
            continue;
        }
        auto ra = find(static_cast<std::size_t>(a)), rb = find(static_cast<std::size_t>(b));
        if (ra == rb) {
            if (!cycle_reported) {
                findings.push_back({Kind::Cycle, "cycle through branch " +
                                                     std::to_string(br.from_bus) + "-" +
                                                     std::to_string(br.to_bus)});
                cycle_reported = true;
            }
        } else {
            parent[ra] = rb;
        }
    }
    if (slack >= 0) {
        const auto root = find(static_cast<std::size_t>(slack));
        for (std::size_t k = 0; k < n; ++k) {
            if (find(k) != root) {
                findings.push_back({Kind::Unreachable,
                                    "bus " + std::to_string(net.buses[k].id) + " unreachable"});
            }
        }
    }
    if (net.branches.size() + 1 != n && !cycle_reported) {
        findings.push_back({Kind::BranchCount, "expected " + std::to_string(n - 1) +
                                                   " branches, found " +
                                                   std::to_string(net.branches.size())});
    }
    return findings;
}

AdmittanceTable build_admittance(const Network& net) {
    const auto n = static_cast<Eigen::Index>(net.size());
    AdmittanceTable adm;
    std::vector<Eigen::Triplet<double>> tg, tb;
    for (const auto& br : net.branches) {
        const double den = br.r * br.r + br.x * br.x;
        if (!(den > 0.0)) {
            throw Error(ErrorCode::ZeroImpedanceBranch, "branch " + std::to_string(br.from_bus) +
                                                            "-" + std::to_string(br.to_bus));
        }
        const double g = br.r / den;
        const double b = -br.x / den;
        adm.branch_g.push_back(g);
        adm.branch_b.push_back(b);
        const auto i = static_cast<Eigen::Index>(net.index_of(br.from_bus));
        const auto j = static_cast<Eigen::Index>(net.index_of(br.to_bus));
        // Off-diagonals of the nodal matrix are -y_ij; diagonals collect +y_ij.
        tg.emplace_back(i, j, -g);
        tg.emplace_back(j, i, -g);
        tg.emplace_back(i, i, g);
        tg.emplace_back(j, j, g);
        tb.emplace_back(i, j, -b);
        tb.emplace_back(j, i, -b);
        tb.emplace_back(i, i, b);
        tb.emplace_back(j, j, b);
    }
    adm.g.resize(n, n);
    adm.b.resize(n, n);
    adm.g.setFromTriplets(tg.begin(), tg.end());
    adm.b.setFromTriplets(tb.begin(), tb.end());
    return adm;
}

}  // namespace tes
