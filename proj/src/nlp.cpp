#include "tes/nlp.hpp"

#include "tes/error.hpp"

#include <Eigen/SparseCholesky>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

namespace tes {

std::string_view to_string(SolveStatus status) {
    switch (status) {
        case SolveStatus::Optimal: return "Optimal";
        case SolveStatus::MaxIterations: return "MaxIterations";
        case SolveStatus::Infeasible: return "Infeasible";
        case SolveStatus::NumericalFailure: return "NumericalFailure";
    }
    return "Unknown";
}

void NlpProblem::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::DimensionMismatch, what); };
    if (n <= 0) fail("problem has no variables");
    if (!objective || !gradient || !hessian) fail("objective, gradient and hessian are required");
    if (m_eq > 0 && (!eq_constraints || !eq_jacobian)) fail("equality evaluators missing");
    if (m_ineq > 0 && (!ineq_constraints || !ineq_jacobian)) fail("inequality evaluators missing");
    if (lower.size() != n || upper.size() != n || x0.size() != n) fail("bound/start sizes differ from n");
    for (Eigen::Index i = 0; i < n; ++i) {
        if (lower(i) > upper(i)) fail("lower bound above upper bound for variable " + std::to_string(i));
    }
}

double GradientCheck::worst() const {
    return std::max({objective, eq_jacobian, ineq_jacobian, hessian});
}

namespace {

using Clock = std::chrono::steady_clock;
using Triplet = Eigen::Triplet<double>;

// Interior-point working problem: inequalities become g(x) + s = 0 with s >= 0,
// so the solver sees only equalities and simple bounds over xs = [x; s].
class Barrier {
public:
    Barrier(const NlpProblem& p, const NlpOptions& o) : p_(p), opts_(o) {
        n_ = p.n;
        ns_ = p.n + p.m_ineq;
        m_ = p.m_eq + p.m_ineq;
        lower_ = Vec::Zero(ns_);
        upper_ = Vec::Constant(ns_, kInf);
        lower_.head(n_) = p.lower;
        upper_.head(n_) = p.upper;
        fixed_.assign(static_cast<std::size_t>(ns_), false);
        has_l_.assign(static_cast<std::size_t>(ns_), false);
        has_u_.assign(static_cast<std::size_t>(ns_), false);
        for (Eigen::Index i = 0; i < ns_; ++i) {
            const auto k = static_cast<std::size_t>(i);
            if (std::isfinite(lower_(i)) && std::isfinite(upper_(i)) &&
                upper_(i) - lower_(i) <= 1e-14 * std::max(1.0, std::abs(lower_(i)))) {
                fixed_[k] = true;
            } else {
                has_l_[k] = std::isfinite(lower_(i));
                has_u_[k] = std::isfinite(upper_(i));
            }
        }
    }

    SolveReport run(const Vec& start);

private:
    struct Eval {
        double f = 0.0;
        Vec grad;   // size ns
        Vec c;      // size m
        SpMat jac;  // m x ns
        double eq_inf = 0.0;
        double ineq_inf = 0.0;  // max(0, g(x)) on the original inequalities
    };

    Vec push_into_box(const Vec& x) const;
    Eval evaluate(const Vec& xs, bool with_jacobian) const;
    double barrier_value(const Vec& xs, double mu) const;
    Vec barrier_gradient(const Eval& ev, const Vec& xs, double mu) const;
    double merit(const Eval& ev, const Vec& xs, double mu, double nu) const {
        return ev.f + barrier_value(xs, mu) + nu * ev.c.lpNorm<1>();
    }
    double max_step(const Vec& v, const Vec& dv, const Vec& lo, const Vec& hi, double tau) const;
    double dual_step(const Vec& z, const Vec& dz, const std::vector<bool>& active, double tau) const;

    SpMat assemble_kkt(const SpMat& hess, const SpMat& jac, const Vec& sigma, double dw,
                       double dc) const;
    bool factorize(const SpMat& kkt);
    Vec solve(const SpMat& kkt, const Vec& rhs);

    const NlpProblem& p_;
    const NlpOptions& opts_;
    Eigen::Index n_ = 0, ns_ = 0, m_ = 0;
    Vec lower_, upper_;
    std::vector<bool> fixed_, has_l_, has_u_;

    Eigen::SimplicialLDLT<SpMat, Eigen::Lower, Eigen::AMDOrdering<int>> ldlt_;
    std::vector<int> pattern_outer_, pattern_inner_;
    bool analysed_ = false;
    int inertia_pos_ = 0, inertia_neg_ = 0;
};

Vec Barrier::push_into_box(const Vec& x) const {
    Vec out = x;
    for (Eigen::Index i = 0; i < ns_; ++i) {
        const auto k = static_cast<std::size_t>(i);
        if (fixed_[k]) {
            out(i) = lower_(i);
            continue;
        }
        const double lo = lower_(i), hi = upper_(i);
        double pl = 0.0, pu = 0.0;
        if (has_l_[k]) pl = 1e-2 * std::max(1.0, std::abs(lo));
        if (has_u_[k]) pu = 1e-2 * std::max(1.0, std::abs(hi));
        if (has_l_[k] && has_u_[k]) {
            pl = std::min(pl, 1e-2 * (hi - lo));
            pu = std::min(pu, 1e-2 * (hi - lo));
        }
        if (has_l_[k]) out(i) = std::max(out(i), lo + pl);
        if (has_u_[k]) out(i) = std::min(out(i), hi - pu);
    }
    return out;
}

Barrier::Eval Barrier::evaluate(const Vec& xs, bool with_jacobian) const {
    Eval ev;
    const Vec x = xs.head(n_);
    ev.f = p_.objective(x);
    ev.grad = Vec::Zero(ns_);
    ev.grad.head(n_) = p_.gradient(x);
    ev.c.resize(m_);
    Vec g;
    if (p_.m_eq > 0) ev.c.head(p_.m_eq) = p_.eq_constraints(x);
    if (p_.m_ineq > 0) {
        g = p_.ineq_constraints(x);
        ev.c.tail(p_.m_ineq) = g + xs.tail(p_.m_ineq);
    }
    ev.eq_inf = p_.m_eq > 0 ? ev.c.head(p_.m_eq).lpNorm<Eigen::Infinity>() : 0.0;
    ev.ineq_inf = p_.m_ineq > 0 ? std::max(0.0, g.maxCoeff()) : 0.0;
    if (with_jacobian) {
        std::vector<Triplet> trip;
        if (p_.m_eq > 0) {
            const SpMat je = p_.eq_jacobian(x);
            for (Eigen::Index k = 0; k < je.outerSize(); ++k) {
                for (SpMat::InnerIterator it(je, k); it; ++it) trip.emplace_back(it.row(), it.col(), it.value());
            }
        }
        if (p_.m_ineq > 0) {
            const SpMat ji = p_.ineq_jacobian(x);
            for (Eigen::Index k = 0; k < ji.outerSize(); ++k) {
                for (SpMat::InnerIterator it(ji, k); it; ++it) {
                    trip.emplace_back(p_.m_eq + it.row(), it.col(), it.value());
                }
            }
            for (Eigen::Index r = 0; r < p_.m_ineq; ++r) trip.emplace_back(p_.m_eq + r, n_ + r, 1.0);
        }
        ev.jac.resize(m_, ns_);
        ev.jac.setFromTriplets(trip.begin(), trip.end());
    }
    return ev;
}

double Barrier::barrier_value(const Vec& xs, double mu) const {
    double b = 0.0;
    for (Eigen::Index i = 0; i < ns_; ++i) {
        const auto k = static_cast<std::size_t>(i);
        if (has_l_[k]) b -= mu * std::log(xs(i) - lower_(i));
        if (has_u_[k]) b -= mu * std::log(upper_(i) - xs(i));
    }
    return b;
}

Vec Barrier::barrier_gradient(const Eval& ev, const Vec& xs, double mu) const {
    Vec g = ev.grad;
    for (Eigen::Index i = 0; i < ns_; ++i) {
        const auto k = static_cast<std::size_t>(i);
        if (fixed_[k]) {
            g(i) = 0.0;
            continue;
        }
        if (has_l_[k]) g(i) -= mu / (xs(i) - lower_(i));
        if (has_u_[k]) g(i) += mu / (upper_(i) - xs(i));
    }
    return g;
}

double Barrier::max_step(const Vec& v, const Vec& dv, const Vec& lo, const Vec& hi,
                         double tau) const {
    double alpha = 1.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        const auto k = static_cast<std::size_t>(i);
        if (fixed_[k]) continue;
        if (has_l_[k] && dv(i) < 0.0) alpha = std::min(alpha, -tau * (v(i) - lo(i)) / dv(i));
        if (has_u_[k] && dv(i) > 0.0) alpha = std::min(alpha, tau * (hi(i) - v(i)) / dv(i));
    }
    return alpha;
}

double Barrier::dual_step(const Vec& z, const Vec& dz, const std::vector<bool>& active,
                          double tau) const {
    double alpha = 1.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        if (active[static_cast<std::size_t>(i)] && dz(i) < 0.0) alpha = std::min(alpha, -tau * z(i) / dz(i));
    }
    return alpha;
}

SpMat Barrier::assemble_kkt(const SpMat& hess, const SpMat& jac, const Vec& sigma, double dw,
                            double dc) const {
    const Eigen::Index dim = ns_ + m_;
    std::vector<Triplet> trip;
    trip.reserve(static_cast<std::size_t>(hess.nonZeros() / 2 + jac.nonZeros() + dim));
    for (Eigen::Index k = 0; k < hess.outerSize(); ++k) {
        for (SpMat::InnerIterator it(hess, k); it; ++it) {
            if (it.row() < it.col()) continue;
            if (fixed_[static_cast<std::size_t>(it.row())] || fixed_[static_cast<std::size_t>(it.col())]) continue;
            trip.emplace_back(it.row(), it.col(), it.value());
        }
    }
    for (Eigen::Index i = 0; i < ns_; ++i) {
        trip.emplace_back(i, i, fixed_[static_cast<std::size_t>(i)] ? 1.0 : sigma(i) + dw);
    }
    for (Eigen::Index k = 0; k < jac.outerSize(); ++k) {
        for (SpMat::InnerIterator it(jac, k); it; ++it) {
            if (fixed_[static_cast<std::size_t>(it.col())]) continue;
            trip.emplace_back(ns_ + it.row(), it.col(), it.value());
        }
    }
    for (Eigen::Index r = 0; r < m_; ++r) trip.emplace_back(ns_ + r, ns_ + r, -dc);
    SpMat kkt(dim, dim);
    kkt.setFromTriplets(trip.begin(), trip.end());
    kkt.makeCompressed();
    return kkt;
}

bool Barrier::factorize(const SpMat& kkt) {
    const std::vector<int> outer(kkt.outerIndexPtr(), kkt.outerIndexPtr() + kkt.outerSize() + 1);
    const std::vector<int> inner(kkt.innerIndexPtr(), kkt.innerIndexPtr() + kkt.nonZeros());
    if (!analysed_ || outer != pattern_outer_ || inner != pattern_inner_) {
        ldlt_.analyzePattern(kkt);
        pattern_outer_ = outer;
        pattern_inner_ = inner;
        analysed_ = true;
    }
    ldlt_.factorize(kkt);
    if (ldlt_.info() != Eigen::Success) return false;
    const Vec& d = ldlt_.vectorD();
    inertia_pos_ = static_cast<int>((d.array() > 0.0).count());
    inertia_neg_ = static_cast<int>((d.array() < 0.0).count());
    return d.allFinite();
}

// Solve with the regularized factor, then refine against the matrix without
// the constraint-block regularization.
Vec Barrier::solve(const SpMat& kkt, const Vec& rhs) {
    Vec sol = ldlt_.solve(rhs);
    const double scale = 1.0 + rhs.lpNorm<Eigen::Infinity>();
    for (int it = 0; it < 10; ++it) {
        const Vec r = rhs - kkt.selfadjointView<Eigen::Lower>() * sol;
        if (r.lpNorm<Eigen::Infinity>() <= 1e-14 * scale) break;
        sol += ldlt_.solve(r);
    }
    return sol;
}

SolveReport Barrier::run(const Vec& start) {
    const auto t0 = Clock::now();
    SolveReport rep;

    Vec xs = Vec::Zero(ns_);
    xs.head(n_) = start;
    if (p_.m_ineq > 0) {
        const Vec g = p_.ineq_constraints(start);
        xs.tail(p_.m_ineq) = (-g).cwiseMax(0.0);
    }
    xs = push_into_box(xs);

    Vec y = Vec::Zero(m_);
    Vec zl = Vec::Zero(ns_), zu = Vec::Zero(ns_);
    for (Eigen::Index i = 0; i < ns_; ++i) {
        if (has_l_[static_cast<std::size_t>(i)]) zl(i) = 1.0;
        if (has_u_[static_cast<std::size_t>(i)]) zu(i) = 1.0;
    }
    const int n_bounds = static_cast<int>(std::count(has_l_.begin(), has_l_.end(), true) +
                                          std::count(has_u_.begin(), has_u_.end(), true));

    double mu = opts_.mu_init;
    const double mu_min = std::min(opts_.tol_kkt, opts_.tol_eq) / 10.0;
    double nu = 1.0;
    double dw_last = 0.0;
    double damping = 0.0;  // raised after heavy backtracking to shorten the next step
    int short_steps = 0;
    const double dc = 1e-9;
    Eval ev = evaluate(xs, true);
    bool done = false;
    int stalled = 0;

    auto errors = [&](double mu_ref, double& dual, double& compl_err, double& primal) {
        Vec r = ev.grad + ev.jac.transpose() * y - zl + zu;
        for (Eigen::Index i = 0; i < ns_; ++i) {
            if (fixed_[static_cast<std::size_t>(i)]) r(i) = 0.0;
        }
        const double s_max = 100.0;
        const double zsum = zl.lpNorm<1>() + zu.lpNorm<1>();
        const double sd = std::max(s_max, (y.lpNorm<1>() + zsum) / static_cast<double>(m_ + ns_)) / s_max;
        const double sc = std::max(s_max, zsum / std::max(1, n_bounds)) / s_max;
        dual = r.lpNorm<Eigen::Infinity>() / sd;
        compl_err = 0.0;
        for (Eigen::Index i = 0; i < ns_; ++i) {
            const auto k = static_cast<std::size_t>(i);
            if (has_l_[k]) compl_err = std::max(compl_err, std::abs((xs(i) - lower_(i)) * zl(i) - mu_ref));
            if (has_u_[k]) compl_err = std::max(compl_err, std::abs((upper_(i) - xs(i)) * zu(i) - mu_ref));
        }
        compl_err /= sc;
        primal = ev.c.lpNorm<Eigen::Infinity>();
    };

    int iter = 0;
    for (; iter < opts_.max_iterations; ++iter) {
        double dual = 0.0, compl_err = 0.0, primal = 0.0;
        errors(0.0, dual, compl_err, primal);
        rep.kkt_residual = std::max(dual, compl_err);
        const double slack_inf = p_.m_ineq > 0 ? ev.c.tail(p_.m_ineq).lpNorm<Eigen::Infinity>() : 0.0;
        if (dual <= opts_.tol_kkt && compl_err <= opts_.tol_kkt && ev.eq_inf <= opts_.tol_eq &&
            ev.ineq_inf <= opts_.tol_ineq && slack_inf <= opts_.tol_ineq) {
            rep.status = SolveStatus::Optimal;
            done = true;
            break;
        }
        // barrier parameter update (possibly several times)
        for (;;) {
            double d_mu = 0.0, c_mu = 0.0, p_mu = 0.0;
            errors(mu, d_mu, c_mu, p_mu);
            if (std::max({d_mu, c_mu, p_mu}) > 10.0 * mu || mu <= mu_min) break;
            mu = std::max(mu_min, std::min(0.2 * mu, std::pow(mu, 1.5)));
        }
        const double tau = std::max(0.99, 1.0 - mu);

        Vec sigma = Vec::Zero(ns_);
        for (Eigen::Index i = 0; i < ns_; ++i) {
            const auto k = static_cast<std::size_t>(i);
            if (has_l_[k]) sigma(i) += zl(i) / (xs(i) - lower_(i));
            if (has_u_[k]) sigma(i) += zu(i) / (upper_(i) - xs(i));
        }
        SpMat hess(ns_, ns_);
        {
            const SpMat h = p_.hessian(xs.head(n_), 1.0, y.head(p_.m_eq), y.tail(p_.m_ineq));
            std::vector<Triplet> trip;
            for (Eigen::Index k = 0; k < h.outerSize(); ++k) {
                for (SpMat::InnerIterator it(h, k); it; ++it) trip.emplace_back(it.row(), it.col(), it.value());
            }
            hess.setFromTriplets(trip.begin(), trip.end());
        }

        // inertia correction
        double dw = damping;
        SpMat kkt;
        bool ok = false;
        for (int attempt = 0; attempt < 60; ++attempt) {
            kkt = assemble_kkt(hess, ev.jac, sigma, dw, dc);
            if (factorize(kkt) && inertia_pos_ == ns_ && inertia_neg_ == m_) {
                ok = true;
                break;
            }
            if (dw == 0.0 || dw == damping) {
                dw = std::max(damping * 10.0, dw_last == 0.0 ? 1e-4 : std::max(1e-20, dw_last / 3.0));
            } else {
                dw *= dw_last == 0.0 ? 100.0 : 8.0;
            }
            if (dw > 1e40) break;
        }
        if (!ok) {
            rep.status = SolveStatus::NumericalFailure;
            rep.message = "inertia correction failed";
            break;
        }
        if (dw > damping) dw_last = dw;

        // solve for the multiplier change so the equality regularization
        // perturbs the step by dc * dy, which vanishes at convergence
        const Vec gb = barrier_gradient(ev, xs, mu);
        Vec lag = gb + ev.jac.transpose() * y;
        for (Eigen::Index i = 0; i < ns_; ++i) {
            if (fixed_[static_cast<std::size_t>(i)]) lag(i) = 0.0;
        }
        Vec rhs(ns_ + m_);
        rhs.head(ns_) = -lag;
        rhs.tail(m_) = -ev.c;
        const Vec sol = solve(kkt, rhs);
        const Vec dx = sol.head(ns_);
        const Vec y_new = y + sol.tail(m_);

        // penalty parameter for the l1 merit
        const double dir = gb.dot(dx);
        const double cnorm = ev.c.lpNorm<1>();
        if (cnorm > 0.0) {
            const Vec hdx = kkt.topLeftCorner(ns_, ns_).selfadjointView<Eigen::Lower>() * dx;
            const double curv = std::max(0.0, dx.dot(hdx));
            const double nu_req = (dir + 0.5 * curv) / (0.9 * cnorm);
            nu = std::max({nu, nu_req, y_new.lpNorm<Eigen::Infinity>() + 1e-3});
        }
        const double descent = dir - nu * cnorm;
        const double merit_here = merit(ev, xs, mu, nu);

        const double alpha_max = max_step(xs, dx, lower_, upper_, tau);
        double alpha = alpha_max;
        bool accepted = false;
        Vec x_trial;
        Eval ev_trial;
        double merit_trial = 0.0;
        for (int ls = 0; ls < 40; ++ls) {
            x_trial = xs + alpha * dx;
            ev_trial = evaluate(x_trial, false);
            merit_trial = merit(ev_trial, x_trial, mu, nu);
            if (std::isfinite(merit_trial) && merit_trial <= merit_here + 1e-4 * alpha * descent) {
                accepted = true;
                break;
            }
            if (ls == 0) {
                // second-order corrections for the constraint curvature, repeated
                // while they keep shrinking the violation
                Vec c_soc = alpha * ev.c + ev_trial.c;
                double theta_prev = ev_trial.c.lpNorm<1>();
                double a_soc = alpha;
                for (int k = 0; k < 4 && !accepted; ++k) {
                    Vec rhs_soc(ns_ + m_);
                    rhs_soc.head(ns_) = -lag;
                    rhs_soc.tail(m_) = -c_soc;
                    const Vec dsoc = solve(kkt, rhs_soc).head(ns_);
                    a_soc = max_step(xs, dsoc, lower_, upper_, tau);
                    const Vec x_soc = xs + a_soc * dsoc;
                    Eval ev_soc = evaluate(x_soc, false);
                    const double m_soc = merit(ev_soc, x_soc, mu, nu);
                    if (std::isfinite(m_soc) && m_soc <= merit_here + 1e-4 * alpha * descent) {
                        x_trial = x_soc;
                        ev_trial = std::move(ev_soc);
                        merit_trial = m_soc;
                        alpha = a_soc;
                        accepted = true;
                        break;
                    }
                    const double theta = ev_soc.c.lpNorm<1>();
                    if (!std::isfinite(theta) || theta > 0.99 * theta_prev) break;
                    theta_prev = theta;
                    c_soc = a_soc * c_soc + ev_soc.c;
                }
                if (accepted) break;
            }
            alpha *= 0.5;
            if (alpha * dx.lpNorm<Eigen::Infinity>() < 1e-16 * (1.0 + xs.lpNorm<Eigen::Infinity>())) break;
        }

        if (!accepted) {
            ++stalled;
            // tiny steps with the merit already flat: accept if the point is
            // already at floating-point resolution, otherwise bail
            if (std::abs(descent) < 1e-14 * (1.0 + std::abs(merit_here)) || stalled > 3) {
                rep.message = "line search failed";
                break;
            }
            dw_last = std::max(dw_last * 100.0, 1e-2);
            continue;
        }
        stalled = 0;
        if (alpha < 0.05 * alpha_max) {
            if (++short_steps >= 2) damping = damping == 0.0 ? 1e-2 : std::min(1e8, damping * 10.0);
        } else {
            short_steps = 0;
            if (alpha >= 0.5 * alpha_max) damping = damping < 1e-6 ? 0.0 : damping / 10.0;
        }

        // duals
        const double a_primal = alpha;
        Vec dzl = Vec::Zero(ns_), dzu = Vec::Zero(ns_);
        for (Eigen::Index i = 0; i < ns_; ++i) {
            const auto k = static_cast<std::size_t>(i);
            if (has_l_[k]) dzl(i) = mu / (xs(i) - lower_(i)) - zl(i) - zl(i) / (xs(i) - lower_(i)) * dx(i);
            if (has_u_[k]) dzu(i) = mu / (upper_(i) - xs(i)) - zu(i) + zu(i) / (upper_(i) - xs(i)) * dx(i);
        }
        const double az = std::min(dual_step(zl, dzl, has_l_, tau), dual_step(zu, dzu, has_u_, tau));

        IterationLog lg;
        lg.merit = merit_trial;
        lg.mu = mu;
        lg.penalty = nu;
        lg.step = a_primal;
        lg.regularization = dw;
        lg.objective = ev_trial.f;
        lg.primal_inf = ev_trial.c.lpNorm<Eigen::Infinity>();
        lg.dual_inf = dual;
        lg.merit_before = merit_here;
        rep.log.push_back(lg);

        xs = x_trial;
        y += a_primal * (y_new - y);
        zl += az * dzl;
        zu += az * dzu;
        // keep the duals within a factor of the primal-dual centre
        const double kappa = 1e10;
        for (Eigen::Index i = 0; i < ns_; ++i) {
            const auto k = static_cast<std::size_t>(i);
            if (has_l_[k]) {
                const double c = mu / (xs(i) - lower_(i));
                zl(i) = std::clamp(zl(i), c / kappa, c * kappa);
            }
            if (has_u_[k]) {
                const double c = mu / (upper_(i) - xs(i));
                zu(i) = std::clamp(zu(i), c / kappa, c * kappa);
            }
        }
        ev = evaluate(xs, true);
        if (opts_.record_iterates) rep.iterates.push_back(xs.head(n_));
        if (nu > 1e12) {
            rep.message = "penalty parameter diverged";
            break;
        }
    }

    rep.iterations = iter;
    rep.x = xs.head(n_);
    rep.y_eq = y.head(p_.m_eq);
    rep.y_ineq = y.tail(p_.m_ineq);
    rep.objective = ev.f;
    rep.eq_violation = ev.eq_inf;
    rep.ineq_violation = ev.ineq_inf;
    if (!done) {
        const double primal = std::max(ev.eq_inf, ev.ineq_inf);
        const bool infeasible = primal > 1e3 * std::max(opts_.tol_eq, opts_.tol_ineq);
        if (rep.message == "inertia correction failed") {
            rep.status = SolveStatus::NumericalFailure;
        } else if (infeasible) {
            rep.status = SolveStatus::Infeasible;
        } else if (iter >= opts_.max_iterations) {
            rep.status = SolveStatus::MaxIterations;
        } else {
            rep.status = SolveStatus::NumericalFailure;
        }
        if (rep.message.empty()) rep.message = "iteration limit reached";
    }
    rep.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return rep;
}

}  // namespace

SolveReport solve_nlp(const NlpProblem& problem, const NlpOptions& opts) {
    problem.validate();
    Barrier solver(problem, opts);
    return solver.run(problem.x0);
}

SolveReport solve_nlp_multistart(const NlpProblem& problem, const std::vector<Vec>& starts,
                                 const NlpOptions& opts) {
    problem.validate();
    if (starts.empty()) return solve_nlp(problem, opts);
    SolveReport best;
    bool have = false;
    for (std::size_t k = 0; k < starts.size(); ++k) {
        if (starts[k].size() != problem.n) {
            throw Error(ErrorCode::DimensionMismatch, "start point has wrong size");
        }
        Barrier solver(problem, opts);
        SolveReport rep = solver.run(starts[k]);
        rep.start_index = k;
        const bool rep_ok = rep.status == SolveStatus::Optimal;
        const bool best_ok = have && best.status == SolveStatus::Optimal;
        bool better = !have;
        if (have) {
            if (rep_ok != best_ok) {
                better = rep_ok;
            } else if (rep.objective != best.objective) {
                better = rep.objective < best.objective;
            } else {
                better = rep.kkt_residual < best.kkt_residual;
            }
        }
        if (better) {
            best = std::move(rep);
            have = true;
        }
    }
    return best;
}

GradientCheck check_gradients(const NlpProblem& problem, const Vec& point,
                              const GradientCheckOptions& opts) {
    problem.validate();
    GradientCheck out;
    const Eigen::Index n = problem.n;
    std::mt19937 rng(opts.seed);

    std::vector<Eigen::Index> cols(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) cols[static_cast<std::size_t>(i)] = i;
    if (opts.sample_columns > 0 && opts.sample_columns < cols.size()) {
        std::shuffle(cols.begin(), cols.end(), rng);
        cols.resize(opts.sample_columns);
        std::sort(cols.begin(), cols.end());
    }

    auto rel = [](double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); };
    auto step = [&](Eigen::Index i) { return opts.h * std::max(1.0, std::abs(point(i))); };
    auto inside = [&](Eigen::Index i, double d) {
        return point(i) + d >= problem.lower(i) && point(i) + d <= problem.upper(i);
    };
    auto at = [&](Eigen::Index i, double d) {
        Vec x = point;
        x(i) += d;
        return x;
    };
    // Central where the box allows, otherwise a second-order one-sided
    // stencil that stays inside it. Columns pinned by their bounds are skipped.
    auto differenced = [&](Eigen::Index i, const auto& fn) {
        const double h = step(i);
        if (inside(i, -h) && inside(i, h)) return decltype(fn(point))((fn(at(i, h)) - fn(at(i, -h))) / (2.0 * h));
        const double d = inside(i, 2.0 * h) ? h : -h;
        return decltype(fn(point))((-3.0 * fn(point) + 4.0 * fn(at(i, d)) - fn(at(i, 2.0 * d))) / (2.0 * d));
    };
    std::erase_if(cols, [&](Eigen::Index i) {
        const double h = step(i);
        return !((inside(i, -h) && inside(i, h)) || inside(i, 2.0 * h) || inside(i, -2.0 * h));
    });
    // Compare column i of a sparse matrix against a differenced vector.
    auto column_error = [&](const SpMat& mat, Eigen::Index i, const Vec& fd) {
        Vec col = Vec::Zero(fd.size());
        for (SpMat::InnerIterator it(mat, i); it; ++it) col(it.row()) += it.value();
        double worst = 0.0;
        for (Eigen::Index r = 0; r < fd.size(); ++r) worst = std::max(worst, rel(col(r), fd(r)));
        return worst;
    };

    const Vec grad = problem.gradient(point);
    for (auto i : cols) {
        const double fd = differenced(i, [&](const Vec& x) { return problem.objective(x); });
        out.objective = std::max(out.objective, rel(grad(i), fd));
    }
    if (problem.m_eq > 0) {
        const SpMat jac = problem.eq_jacobian(point);
        for (auto i : cols) {
            const Vec fd = differenced(i, [&](const Vec& x) { return Vec(problem.eq_constraints(x)); });
            out.eq_jacobian = std::max(out.eq_jacobian, column_error(jac, i, fd));
        }
    }
    if (problem.m_ineq > 0) {
        const SpMat jac = problem.ineq_jacobian(point);
        for (auto i : cols) {
            const Vec fd = differenced(i, [&](const Vec& x) { return Vec(problem.ineq_constraints(x)); });
            out.ineq_jacobian = std::max(out.ineq_jacobian, column_error(jac, i, fd));
        }
    }

    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    Vec ye(problem.m_eq), yi(problem.m_ineq);
    for (auto& v : ye) v = unif(rng);
    for (auto& v : yi) v = unif(rng);
    auto lagrangian_grad = [&](const Vec& x) {
        Vec g = problem.gradient(x);
        if (problem.m_eq > 0) g += problem.eq_jacobian(x).transpose() * ye;
        if (problem.m_ineq > 0) g += problem.ineq_jacobian(x).transpose() * yi;
        return g;
    };
    const SpMat hess = problem.hessian(point, 1.0, ye, yi);
    for (auto i : cols) {
        const Vec fd = differenced(i, lagrangian_grad);
        out.hessian = std::max(out.hessian, column_error(hess, i, fd));
    }
    return out;
}

}  // namespace tes
