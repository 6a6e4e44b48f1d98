#include "tes/report.hpp"

#include <doctest.h>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace tes;
namespace fs = std::filesystem;

namespace {

Scenario five_bus(bool with_devices) {
    Scenario s;
    s.network = parse_case("BASE 10 12.66\nBUS 1 slack 0 0 0\nBUS 2 prosumer 40 10 0\nBUS 3 consumer 300 100 0\n"
                           "BUS 4 prosumer 60 20 0\nBUS 5 consumer 200 80 0\nBRANCH 1 2 0.0922 0.0470\n"
                           "BRANCH 2 3 0.4930 0.2511\nBRANCH 3 4 0.3660 0.1864\nBRANCH 4 5 0.3811 0.1941\n");
    s.steps = 3;
    s.dt = 0.5;
    s.starts = 1;
    s.devices.resize(5);
    s.load_p.resize(3, 5);
    s.load_q.resize(3, 5);
    for (int t = 0; t < 3; ++t)
        for (int i = 0; i < 5; ++i) {
            s.load_p(t, i) = s.network.buses[static_cast<std::size_t>(i)].base_load_p;
            s.load_q(t, i) = s.network.buses[static_cast<std::size_t>(i)].base_load_q;
        }
    s.prices.buy = {0.3, 0.25, 0.3};
    s.prices.sell = {0.15, 0.125, 0.15};
    if (with_devices) {
        s.devices[1].re = REProfile{{400.0, 250.0, 0.0}};
        s.devices[3].re = REProfile{{300.0, 600.0, 0.0}};
        s.devices[3].battery = BatterySpec{};
    }
    return s;
}

struct Dir {
    fs::path path;
    explicit Dir(const std::string& tag) : path(fs::temp_directory_path() / ("tes_report_" + tag)) { fs::remove_all(path); }
    ~Dir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> rows(const fs::path& p) {
    std::vector<std::vector<std::string>> out;
    std::istringstream in(slurp(p));
    for (std::string line; std::getline(in, line);) {
        std::vector<std::string> cells;
        std::string c;
        std::istringstream ls(line);
        while (std::getline(ls, c, ',')) cells.push_back(c);
        out.push_back(cells);
    }
    return out;
}

void write_rows(const fs::path& p, const std::vector<std::vector<std::string>>& r) {
    std::ofstream out(p, std::ios::binary);
    for (const auto& cells : r) {
        for (std::size_t k = 0; k < cells.size(); ++k) out << (k ? "," : "") << cells[k];
        out << '\n';
    }
}

std::size_t column(const std::vector<std::string>& header, const std::string& name) {
    return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
}

const ResultsBundle& solved() {
    static const ResultsBundle b = [] {
        RunConfig cfg;
        cfg.steps = 3;
        cfg.dt = 0.5;
        return run_scenario(cfg, five_bus(true));
    }();
    return b;
}

}  // namespace

TEST_CASE("emit_reports writes every table") {
    Dir dir("all");
    const auto& b = solved();
    const auto files = emit_reports(b, dir.str());
    CHECK(files.size() == 7);
    for (const auto& f : files) CHECK(fs::is_regular_file(f));

    // bus x step tables
    CHECK(rows(dir.path / "voltages.csv").size() == 1 + 5 * 3);
    CHECK(rows(dir.path / "dispatch.csv").size() == 1 + 2 * 5 * 3);
    CHECK(rows(dir.path / "cashflow.csv").size() == 1 + 4 * 3);
    CHECK(rows(dir.path / "profits.csv").size() == 1 + 4 * 3);
    const auto prices = rows(dir.path / "prices.csv");
    REQUIRE(prices.size() == 4);
    CHECK(prices[0].size() == 5 + 4);

    // the summary restates zero-sum on the emitted data
    const auto summary = rows(dir.path / "summary.csv");
    const auto pay = column(summary[0], "payment_total"), pay_star = column(summary[0], "payment_star_total");
    for (std::size_t r = 1; r < summary.size(); ++r) {
        CHECK(std::abs(std::stod(summary[r][pay])) < 1e-6);
        CHECK(std::abs(std::stod(summary[r][pay_star])) < 1e-6);
    }

    const auto manifest = nlohmann::json::parse(slurp(dir.path / "manifest.json"));
    CHECK(manifest["schema_version"] == kSchemaVersion);
    CHECK(manifest["files"].size() == 6);
    CHECK(manifest["stages"]["trading"]["status"] == "Optimal");
    CHECK(manifest["config"].contains("battery.capacity"));

    CHECK(check_reports(dir.str()).empty());
}

TEST_CASE("numbers carry 9 significant digits and a fixed layout") {
    Dir a("a"), b("b");
    emit_reports(solved(), a.str());
    emit_reports(solved(), b.str());
    for (const auto& e : fs::directory_iterator(a.path)) CHECK(slurp(e.path()) == slurp(b.path / e.path().filename()));

    const auto v = rows(a.path / "voltages.csv");
    CHECK(v[0] == std::vector<std::string>{"bus", "step", "v_baseline", "v_trading"});
    CHECK(v[1][0] == "1");
    CHECK(v[1][2] == "1");  // slack held at 1 pu
    const auto& cell = v[v.size() - 1][2];
    CHECK(cell.size() <= 11);  // "0.xxxxxxxxx"
    CHECK(std::abs(std::stod(cell) - solved().baseline.dispatch.voltage(2, 4)) < 1e-9);
}

TEST_CASE("a scenario without devices has no transfers") {
    Dir dir("idle");
    RunConfig cfg;
    cfg.steps = 3;
    const auto b = run_scenario(cfg, five_bus(false));
    emit_reports(b, dir.str());
    const auto cash = rows(dir.path / "cashflow.csv");
    const auto k = column(cash[0], "delta_star");
    for (std::size_t r = 1; r < cash.size(); ++r) CHECK(std::abs(std::stod(cash[r][k])) < 1e-6);
    CHECK(check_reports(dir.str()).empty());
}

TEST_CASE("check_reports catches tampered files") {
    Dir dir("tamper");
    emit_reports(solved(), dir.str());

    SUBCASE("a transfer that no longer sums to zero") {
        auto cash = rows(dir.path / "cashflow.csv");
        const auto k = column(cash[0], "delta");
        cash[1][k] = std::to_string(std::stod(cash[1][k]) + 0.01);
        write_rows(dir.path / "cashflow.csv", cash);
        const auto f = check_reports(dir.str());
        REQUIRE(f.size() == 1);
        CHECK(f[0].file == "cashflow.csv");
    }
    SUBCASE("a price above the utility's") {
        auto p = rows(dir.path / "prices.csv");
        p[2][column(p[0], "pi_3")] = "0.31";
        write_rows(dir.path / "prices.csv", p);
        const auto f = check_reports(dir.str());
        REQUIRE(f.size() == 1);
        CHECK(f[0].what.find("pi_3") != std::string::npos);
    }
    SUBCASE("unequal exporter gains") {
        auto pr = rows(dir.path / "profits.csv");
        const auto g = column(pr[0], "group"), phi = column(pr[0], "phi");
        for (std::size_t r = 1; r < pr.size(); ++r)
            if (pr[r][g] == "exporter") {
                pr[r][phi] = std::to_string(std::stod(pr[r][phi]) + 1e-3);
                break;
            }
        write_rows(dir.path / "profits.csv", pr);
        CHECK(check_reports(dir.str()).size() == 1);
    }
    SUBCASE("an undervoltage") {
        auto v = rows(dir.path / "voltages.csv");
        v[5][3] = "0.9";
        write_rows(dir.path / "voltages.csv", v);
        CHECK(check_reports(dir.str()).size() == 1);
    }
    SUBCASE("a missing file") {
        fs::remove(dir.path / "profits.csv");
        CHECK_THROWS_AS(check_reports(dir.str()), Error);
    }
}

TEST_CASE("emit_reports reports unwritable targets") {
    Dir dir("blocked");
    fs::create_directories(dir.path);
    std::ofstream(dir.path / "file") << "x";
    try {
        emit_reports(solved(), (dir.path / "file").string());
        FAIL("wrote into a file");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::IoFailure);
    }
}
