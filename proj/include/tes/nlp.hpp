#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace tes {

using Vec = Eigen::VectorXd;
using SpMat = Eigen::SparseMatrix<double>;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// minimize f(x)  s.t.  c(x) = 0,  g(x) <= 0,  lower <= x <= upper.
//
// Jacobians and the Hessian must report the same sparsity pattern on every
// call (explicit zeros are fine); the solver analyses the pattern once.
struct NlpProblem {
    Eigen::Index n = 0;
    Eigen::Index m_eq = 0;
    Eigen::Index m_ineq = 0;

    std::function<double(const Vec&)> objective;
    std::function<Vec(const Vec&)> gradient;
    std::function<Vec(const Vec&)> eq_constraints;
    std::function<SpMat(const Vec&)> eq_jacobian;      // m_eq x n
    std::function<Vec(const Vec&)> ineq_constraints;
    std::function<SpMat(const Vec&)> ineq_jacobian;    // m_ineq x n
    // Hessian of  sigma f + y_eq' c + y_ineq' g  (full symmetric, n x n).
    std::function<SpMat(const Vec&, double sigma, const Vec& y_eq, const Vec& y_ineq)> hessian;

    Vec lower;
    Vec upper;
    Vec x0;
    std::vector<std::string> names;

    void validate() const;
};

struct NlpOptions {
    double tol_eq = 1e-6;
    double tol_ineq = 1e-6;
    double tol_kkt = 1e-6;
    int max_iterations = 500;
    double mu_init = 0.1;
    bool record_iterates = false;
};

enum class SolveStatus { Optimal, MaxIterations, Infeasible, NumericalFailure };

std::string_view to_string(SolveStatus status);

struct IterationLog {
    double objective = 0.0;
    double merit_before = 0.0;  // merit at the previous iterate, same mu and penalty
    double merit = 0.0;
    double mu = 0.0;
    double penalty = 0.0;
    double primal_inf = 0.0;
    double dual_inf = 0.0;
    double step = 0.0;
    double regularization = 0.0;
};

struct SolveReport {
    SolveStatus status = SolveStatus::NumericalFailure;
    Vec x;
    Vec y_eq;
    Vec y_ineq;
    double objective = 0.0;
    double eq_violation = 0.0;    // max |c_i(x)|
    double ineq_violation = 0.0;  // max(0, g_i(x))
    double kkt_residual = 0.0;
    int iterations = 0;
    double wall_seconds = 0.0;
    std::size_t start_index = 0;  // which start won, for multi-start solves
    std::vector<IterationLog> log;
    std::vector<Vec> iterates;  // only with NlpOptions::record_iterates
    std::string message;
};

SolveReport solve_nlp(const NlpProblem& problem, const NlpOptions& opts = {});

// Runs one solve per start point and keeps the best: Optimal beats anything
// else, then lowest objective, then lowest KKT residual, then start order.
SolveReport solve_nlp_multistart(const NlpProblem& problem, const std::vector<Vec>& starts,
                                 const NlpOptions& opts = {});

struct GradientCheck {
    double objective = 0.0;     // max relative error, gradient
    double eq_jacobian = 0.0;
    double ineq_jacobian = 0.0;
    double hessian = 0.0;       // Lagrangian Hessian vs differenced gradients
    double worst() const;
};

struct GradientCheckOptions {
    double h = 1e-6;
    // Differentiate only this many randomly chosen coordinates (0 = all).
    std::size_t sample_columns = 0;
    unsigned seed = 7;
};

// Central differences with step h * max(1, |x_i|), one-sided second order at a
// bound. Relative error is
// |analytic - fd| / max(1, |analytic|, |fd|).
GradientCheck check_gradients(const NlpProblem& problem, const Vec& point,
                              const GradientCheckOptions& opts = {});

}  // namespace tes
