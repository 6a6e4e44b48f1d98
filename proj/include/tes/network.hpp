#pragma once

#include <Eigen/Sparse>

#include <string>
#include <string_view>
#include <vector>

namespace tes {

enum class BusKind { Slack, Consumer, Producer, Prosumer };

std::string_view to_string(BusKind kind);
BusKind parse_bus_kind(std::string_view text);

struct Bus {
    int id = 0;  // 1-based; bus 1 is the slack
    BusKind kind = BusKind::Consumer;
    double base_load_p = 0.0;  // kW
    double base_load_q = 0.0;  // kvar
    std::vector<std::string> device_refs;
    bool is_microgrid = false;
};

struct Branch {
    int from_bus = 0;
    int to_bus = 0;
    double r = 0.0;  // pu
    double x = 0.0;  // pu
    // As read from the case file; pu values are derived from these so that
    // emit_case/parse_case round-trips bit-exactly.
    double r_ohm = 0.0;
    double x_ohm = 0.0;
};

struct Network {
    std::vector<Bus> buses;
    std::vector<Branch> branches;
    double base_mva = 10.0;
    double base_kv = 12.66;

    std::size_t size() const { return buses.size(); }
    // Zero-based position of a bus id; throws MalformedCase for unknown ids.
    std::size_t index_of(int bus_id) const;
    double base_kw() const { return base_mva * 1000.0; }
    double base_ohm() const { return base_kv * base_kv / base_mva; }
};

// Branch admittances keyed by zero-based bus positions. `matrix` is the full
// nodal admittance (conductance + j susceptance) with shunts fixed at zero.
struct AdmittanceTable {
    Eigen::SparseMatrix<double> g;
    Eigen::SparseMatrix<double> b;
    std::vector<double> branch_g;  // per branch, in branch order
    std::vector<double> branch_b;
};

struct RadialFinding {
    enum class Kind { Cycle, Unreachable, DanglingEndpoint, SelfLoop, MissingSlack, BranchCount };
    Kind kind;
    std::string message;
};

Network parse_case(std::string_view case_text);
Network load_case_file(const std::string& path);
std::string emit_case(const Network& net);

std::vector<RadialFinding> validate_radial(const Network& net);

AdmittanceTable build_admittance(const Network& net);

}  // namespace tes
