#include "tes/acpf.hpp"

#include "tes/error.hpp"

#include <Eigen/SparseLU>

#include <cmath>
#include <complex>

namespace tes {

double VoltageState::magnitude(std::size_t i) const { return std::hypot(e[i], f[i]); }

namespace {

void check_dims(const Network& net, const VoltageState& v) {
    if (v.e.size() != net.size() || v.f.size() != net.size()) {
        throw Error(ErrorCode::DimensionMismatch, "voltage state does not match bus count");
    }
}

void check_dims(const Network& net, const InjectionSet& inj) {
    if (inj.p.size() != net.size() || inj.q.size() != net.size()) {
        throw Error(ErrorCode::DimensionMismatch, "injection set does not match bus count");
    }
}

}  // namespace

Eigen::VectorXd bus_power_pu(const AdmittanceTable& adm, const VoltageState& v) {
    const auto n = adm.g.rows();
    Eigen::Map<const Eigen::VectorXd> e(v.e.data(), n), f(v.f.data(), n);
    // (YV)_i = a_i + j c_i
    const Eigen::VectorXd a = adm.g * e - adm.b * f;
    const Eigen::VectorXd c = adm.g * f + adm.b * e;
    Eigen::VectorXd out(2 * n);
    out.head(n) = e.cwiseProduct(a) + f.cwiseProduct(c);
    out.tail(n) = f.cwiseProduct(a) - e.cwiseProduct(c);
    return out;
}

Eigen::VectorXd pf_residuals(const Network& net, const AdmittanceTable& adm, const VoltageState& v,
                             const InjectionSet& inj) {
    check_dims(net, v);
    check_dims(net, inj);
    const auto n = static_cast<Eigen::Index>(net.size());
    const Eigen::VectorXd flow = bus_power_pu(adm, v) * net.base_kw();
    Eigen::VectorXd r(2 * n);
    for (Eigen::Index i = 0; i < n; ++i) {
        r(i) = inj.p[static_cast<std::size_t>(i)] - flow(i);
        r(n + i) = inj.q[static_cast<std::size_t>(i)] - flow(n + i);
    }
    return r;
}

namespace {

// d(bus power leaving)/d[e; f], pu.
Eigen::SparseMatrix<double> power_jacobian_pu(const AdmittanceTable& adm, const VoltageState& v) {
    const auto n = adm.g.rows();
    Eigen::Map<const Eigen::VectorXd> e(v.e.data(), n), f(v.f.data(), n);
    const Eigen::VectorXd a = adm.g * e - adm.b * f;
    const Eigen::VectorXd c = adm.g * f + adm.b * e;
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(adm.g.nonZeros()) * 4 + 4 * static_cast<std::size_t>(n));
    // adm.g and adm.b share a sparsity pattern (both built from the same branch list)
    for (Eigen::Index k = 0; k < adm.g.outerSize(); ++k) {
        Eigen::SparseMatrix<double>::InnerIterator itg(adm.g, k);
        Eigen::SparseMatrix<double>::InnerIterator itb(adm.b, k);
        for (; itg; ++itg, ++itb) {
            const auto i = itg.row();
            const auto j = itg.col();
            const double G = itg.value();
            const double B = itb.value();
            trip.emplace_back(i, j, e(i) * G + f(i) * B);         // dP_i/de_j
            trip.emplace_back(i, n + j, -e(i) * B + f(i) * G);    // dP_i/df_j
            trip.emplace_back(n + i, j, f(i) * G - e(i) * B);     // dQ_i/de_j
            trip.emplace_back(n + i, n + j, -f(i) * B - e(i) * G);  // dQ_i/df_j
        }
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        trip.emplace_back(i, i, a(i));
        trip.emplace_back(i, n + i, c(i));
        trip.emplace_back(n + i, i, -c(i));
        trip.emplace_back(n + i, n + i, a(i));
    }
    Eigen::SparseMatrix<double> jac(2 * n, 2 * n);
    jac.setFromTriplets(trip.begin(), trip.end());
    return jac;
}

}  // namespace

Eigen::SparseMatrix<double> pf_jacobian(const Network& net, const AdmittanceTable& adm,
                                        const VoltageState& v) {
    check_dims(net, v);
    Eigen::SparseMatrix<double> jac = power_jacobian_pu(adm, v) * (-net.base_kw());
    jac.prune(0.0);
    return jac;
}

NewtonResult solve_newton_pf(const Network& net, const AdmittanceTable& adm, const InjectionSet& inj,
                             const NewtonOptions& opts) {
    return solve_newton_pf(net, adm, inj, VoltageState::flat(net.size()), opts);
}

NewtonResult solve_newton_pf(const Network& net, const AdmittanceTable& adm, const InjectionSet& inj,
                             VoltageState start, const NewtonOptions& opts) {
    check_dims(net, inj);
    check_dims(net, start);
    const auto n = static_cast<Eigen::Index>(net.size());
    const Eigen::Index m = n - 1;  // unknown buses 1..n-1 (position 0 is the slack)
    start.e[0] = 1.0;
    start.f[0] = 0.0;

    Eigen::VectorXd target(2 * n);
    for (Eigen::Index i = 0; i < n; ++i) {
        target(i) = inj.p[static_cast<std::size_t>(i)] / net.base_kw();
        target(n + i) = inj.q[static_cast<std::size_t>(i)] / net.base_kw();
    }
    auto mismatch = [&](const VoltageState& v) {
        const Eigen::VectorXd r = target - bus_power_pu(adm, v);
        Eigen::VectorXd out(2 * m);
        out.head(m) = r.segment(1, m);
        out.tail(m) = r.segment(n + 1, m);
        return out;
    };

    NewtonResult result{std::move(start), {}};
    VoltageState& v = result.voltage;
    Eigen::VectorXd r = mismatch(v);
    double norm = r.lpNorm<Eigen::Infinity>();
    result.report.mismatch_history.push_back(norm);

    Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> lu;
    for (int iter = 0; iter < opts.max_iterations; ++iter) {
        if (norm < opts.tolerance) break;
        const Eigen::SparseMatrix<double> full = power_jacobian_pu(adm, v);
        // keep rows/cols of non-slack buses: indices 1..n-1 and n+1..2n-1
        std::vector<Eigen::Triplet<double>> trip;
        auto reduce = [&](Eigen::Index k) -> Eigen::Index {
            if (k == 0 || k == n) return -1;
            return k < n ? k - 1 : k - 2;
        };
        for (Eigen::Index k = 0; k < full.outerSize(); ++k) {
            for (Eigen::SparseMatrix<double>::InnerIterator it(full, k); it; ++it) {
                const auto ri = reduce(it.row()), ci = reduce(it.col());
                if (ri >= 0 && ci >= 0) trip.emplace_back(ri, ci, it.value());
            }
        }
        Eigen::SparseMatrix<double> jac(2 * m, 2 * m);
        jac.setFromTriplets(trip.begin(), trip.end());
        lu.compute(jac);
        if (lu.info() != Eigen::Success) {
            throw Error(ErrorCode::SingularJacobian, "power-flow Jacobian factorization failed");
        }
        // r = target - power(v); power(v + dv) ~ power(v) + J dv
        const Eigen::VectorXd dv = lu.solve(r);
        if (!dv.allFinite()) throw Error(ErrorCode::SingularJacobian, "non-finite Newton step");

        double step = 1.0;
        VoltageState trial = v;
        double trial_norm = 0.0;
        Eigen::VectorXd trial_r;
        for (int h = 0; h <= opts.max_halvings; ++h) {
            for (Eigen::Index i = 0; i < m; ++i) {
                trial.e[static_cast<std::size_t>(i + 1)] = v.e[static_cast<std::size_t>(i + 1)] + step * dv(i);
                trial.f[static_cast<std::size_t>(i + 1)] = v.f[static_cast<std::size_t>(i + 1)] + step * dv(m + i);
            }
            trial_r = mismatch(trial);
            trial_norm = trial_r.lpNorm<Eigen::Infinity>();
            if (trial_norm < norm) break;
            step *= 0.5;
        }
        v = trial;
        r = trial_r;
        norm = trial_norm;
        result.report.iterations = iter + 1;
        result.report.mismatch_history.push_back(norm);
    }
    result.report.final_mismatch = norm;
    if (!(norm < opts.tolerance)) {
        throw Error(ErrorCode::Diverged, "Newton power flow mismatch " + std::to_string(norm) +
                                             " pu after " + std::to_string(result.report.iterations) +
                                             " iterations");
    }
    return result;
}

FlowResult branch_flows(const Network& net, const AdmittanceTable& adm, const VoltageState& v) {
    check_dims(net, v);
    using cd = std::complex<double>;
    FlowResult out;
    out.bus_loss.assign(net.size(), 0.0);
    const double base = net.base_kw();
    for (std::size_t k = 0; k < net.branches.size(); ++k) {
        const auto& br = net.branches[k];
        const auto i = net.index_of(br.from_bus);
        const auto j = net.index_of(br.to_bus);
        const cd y(adm.branch_g[k], adm.branch_b[k]);
        const cd vi(v.e[i], v.f[i]), vj(v.e[j], v.f[j]);
        const cd iij = y * (vi - vj);
        const cd sij = vi * std::conj(iij);
        const cd sji = vj * std::conj(-iij);
        BranchFlow bf;
        bf.p_from = sij.real() * base;
        bf.q_from = sij.imag() * base;
        bf.p_to = sji.real() * base;
        bf.q_to = sji.imag() * base;
        bf.current = std::abs(iij);
        out.branches.push_back(bf);
        out.total_loss += bf.loss();
    }
    out.bus_loss = bus_losses(net, out);
    return out;
}

std::vector<double> bus_losses(const Network& net, const FlowResult& flows) {
    std::vector<double> loss(net.size(), 0.0);
    for (std::size_t k = 0; k < net.branches.size(); ++k) {
        const double half = 0.5 * flows.branches[k].loss();
        loss[net.index_of(net.branches[k].from_bus)] += half;
        loss[net.index_of(net.branches[k].to_bus)] += half;
    }
    return loss;
}

std::vector<LimitFinding> check_limits(const Network& net, const VoltageState& v,
                                       const InjectionSet& generation, const LimitBounds& bounds,
                                       double tolerance) {
    using Kind = LimitFinding::Kind;
    check_dims(net, v);
    std::vector<LimitFinding> out;
    for (std::size_t i = 0; i < net.size(); ++i) {
        const int id = net.buses[i].id;
        const double mag2 = v.e[i] * v.e[i] + v.f[i] * v.f[i];
        if (mag2 < bounds.v_min * bounds.v_min - tolerance) {
            out.push_back({Kind::VoltageLow, id, bounds.v_min - std::sqrt(mag2)});
        } else if (mag2 > bounds.v_max * bounds.v_max + tolerance) {
            out.push_back({Kind::VoltageHigh, id, std::sqrt(mag2) - bounds.v_max});
        }
        auto check = [&](const std::vector<double>& value, const std::vector<double>& lo,
                         const std::vector<double>& hi, Kind low, Kind high) {
            if (value.size() != net.size()) return;
            if (lo.size() == net.size() && value[i] < lo[i] - tolerance) {
                out.push_back({low, id, lo[i] - value[i]});
            }
            if (hi.size() == net.size() && value[i] > hi[i] + tolerance) {
                out.push_back({high, id, value[i] - hi[i]});
            }
        };
        check(generation.p, bounds.pg_min, bounds.pg_max, Kind::PgLow, Kind::PgHigh);
        check(generation.q, bounds.qg_min, bounds.qg_max, Kind::QgLow, Kind::QgHigh);
    }
    return out;
}

}  // namespace tes
