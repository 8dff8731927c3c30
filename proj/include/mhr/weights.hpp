#pragma once

// Propensity models, inverse-probability-of-treatment weights and the
// multiply robust (empirical-likelihood) weight solver.

#include <cmath>
#include <vector>

#include "mhr/core.hpp"
#include "mhr/lasso.hpp"

namespace mhr {

struct PropensityModel {
  CovariateSet covariate_set;
  double intercept = 0.0;
  Vector coefficients;
  Vector fitted_ps;
};

/// Unpenalized logistic regression of Z on the columns in `set` (intercept only
/// when empty).
inline PropensityModel estimate_ps(const SurvivalDataset& data, const CovariateSet& set,
                                   const LogisticOptions& options = {}) {
  const auto fit = fit_logistic(select_columns(data.X, set), data.Z, options);
  PropensityModel model{set, fit.intercept, fit.coefficients, fit.fitted};
  if ((model.fitted_ps.array() <= 0.0).any() || (model.fitted_ps.array() >= 1.0).any())
    fail(ErrorKind::PsOutOfRange, "fitted propensity scores must lie strictly inside (0, 1)");
  return model;
}

/// w_i = Z_i / ps_i + (1 - Z_i) / (1 - ps_i)
inline WeightVector iptw_weights(const Vector& ps, const IntVector& Z) {
  if (ps.size() != Z.size()) fail(ErrorKind::InvalidArgument, "propensity length mismatch");
  WeightVector out{Vector(ps.size()), WeightKind::IPTW};
  for (Eigen::Index i = 0; i < ps.size(); ++i) {
    if (!(ps(i) > 0.0 && ps(i) < 1.0))
      fail(ErrorKind::PsOutOfRange, "propensity score outside (0, 1) at row " + std::to_string(i + 1));
    out.w(i) = Z(i) == 1 ? 1.0 / ps(i) : 1.0 / (1.0 - ps(i));
  }
  return out;
}

struct MrSolverState {
  Vector rho;       // treated-side multipliers
  Vector nu;        // untreated-side multipliers
  Matrix g_matrix;  // n x J centered fitted propensities (kept models only)
  std::vector<int> kept_models;  // positions in the input list
  int treated_iterations = 0;
  int untreated_iterations = 0;
};

struct MrResult {
  WeightVector weights;
  MrSolverState state;
};

struct MrOptions {
  int max_iterations = 500;
  double tolerance = 1e-9;  // max-norm of the estimating-equation sums
  double duplicate_tolerance = 1e-12;
};

namespace detail {

/// Per-row residual accepted when rounding stops further progress.
inline constexpr double kRoundingResidual = 1e-7;

/// Maximizes sum_i log(1 + lambda^T g_i) over rows of G by damped Newton with
/// backtracking that keeps every 1 + lambda^T g_i positive. Converged when the
/// estimating-equation sums (the gradient) have max-norm <= tolerance.
///
/// Once the predicted gain drops below the objective's rounding resolution,
/// backtracking can no longer tell good steps from bad ones; a few undamped
/// Newton steps then finish the solve, keeping the best iterate.
inline Vector solve_el_multiplier(const Matrix& G, const MrOptions& options, int& iterations) {
  const auto J = G.cols();
  const double rows = static_cast<double>(G.rows());
  auto objective = [&](const Vector& l, bool& feasible) {
    const Vector t = Vector::Ones(G.rows()) + G * l;
    feasible = (t.array() > 0.0).all();
    return feasible ? t.array().log().sum() : -std::numeric_limits<double>::infinity();
  };
  // Gradient and Newton step at l; returns the residual max-norm.
  auto newton = [&](const Vector& l, Vector& grad, Vector& step) {
    const Vector inv = (Vector::Ones(G.rows()) + G * l).cwiseInverse();
    grad = G.transpose() * inv;
    const Matrix Ginv = inv.asDiagonal() * G;
    Eigen::LDLT<Matrix> ldlt(Ginv.transpose() * Ginv);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
      fail(ErrorKind::NoInteriorSolution, "estimating equations are degenerate");
    step = ldlt.solve(grad);
    return grad.lpNorm<Eigen::Infinity>();
  };

  Vector lambda = Vector::Zero(J), grad, step;
  bool feasible = true;
  double f = objective(lambda, feasible);
  for (int iter = 0;; ++iter) {
    iterations = iter;
    const double residual = newton(lambda, grad, step);
    if (residual <= options.tolerance) return lambda;
    if (iter >= options.max_iterations)
      fail(ErrorKind::SolverNonConvergence, "multiply robust solver exceeded the iteration limit");

    const double resolution = 1e-15 * (rows + std::abs(f));
    if (0.5 * grad.dot(step) <= resolution) {
      Vector best = lambda;
      double best_residual = residual;
      for (int k = 0; k < 5 && best_residual > options.tolerance; ++k) {
        double s = 1.0;
        Vector candidate = lambda + step;
        for (int h = 0; h < 60 && (objective(candidate, feasible), !feasible); ++h) candidate = lambda + (s *= 0.5) * step;
        if (!feasible) break;
        lambda = candidate;
        const double r = newton(lambda, grad, step);
        if (r < best_residual) {
          best = lambda;
          best_residual = r;
        }
      }
      if (best_residual <= std::max(options.tolerance, kRoundingResidual * rows)) return best;
      fail(ErrorKind::SolverNonConvergence, "multiply robust solver stalled above the rounding level");
    }

    double s = 1.0;
    bool accepted = false;
    for (int h = 0; h < 60; ++h, s *= 0.5) {
      const Vector candidate = lambda + s * step;
      const double fc = objective(candidate, feasible);
      if (feasible && fc >= f) {
        lambda = candidate;
        f = fc;
        accepted = true;
        break;
      }
    }
    if (!accepted) fail(ErrorKind::SolverNonConvergence, "line search failed in multiply robust solver");
    if (lambda.lpNorm<Eigen::Infinity>() > 1e8)
      fail(ErrorKind::NoInteriorSolution,
           "origin is not inside the convex hull of the centered propensities");
  }
}

}  // namespace detail

/// Multiply robust weights from J postulated propensity models. Each arm's
/// weights sum to one.
inline MrResult multiply_robust_weights(const std::vector<PropensityModel>& models, const IntVector& Z,
                                        const MrOptions& options = {}) {
  if (models.empty()) fail(ErrorKind::InvalidArgument, "at least one propensity model is required");
  const auto n = Z.size();
  for (const auto& m : models)
    if (m.fitted_ps.size() != n) fail(ErrorKind::InvalidArgument, "models fitted on different samples");

  MrResult out;
  std::vector<Vector> columns;
  for (std::size_t j = 0; j < models.size(); ++j) {
    const Vector& ps = models[j].fitted_ps;
    bool duplicate = false;
    for (auto k : out.state.kept_models)
      if ((models[static_cast<std::size_t>(k)].fitted_ps - ps).lpNorm<Eigen::Infinity>() <= options.duplicate_tolerance)
        duplicate = true;
    if (duplicate) continue;
    Vector g = ps.array() - ps.mean();
    if (g.squaredNorm() / static_cast<double>(n) <= 1e-24) continue;
    // Skip models whose centered propensities are in the span of those kept.
    if (!columns.empty()) {
      Matrix A(n, static_cast<Eigen::Index>(columns.size()) + 1);
      for (std::size_t c = 0; c < columns.size(); ++c) A.col(static_cast<Eigen::Index>(c)) = columns[c];
      A.col(A.cols() - 1) = g;
      Eigen::ColPivHouseholderQR<Matrix> qr(A);
      qr.setThreshold(1e-10);
      if (qr.rank() < A.cols()) continue;
    }
    columns.push_back(g);
    out.state.kept_models.push_back(static_cast<int>(j));
  }
  const auto J = static_cast<Eigen::Index>(columns.size());
  Matrix G(n, J);
  for (Eigen::Index c = 0; c < J; ++c) G.col(c) = columns[static_cast<std::size_t>(c)];

  std::vector<Eigen::Index> treated, untreated;
  for (Eigen::Index i = 0; i < n; ++i) (Z(i) == 1 ? treated : untreated).push_back(i);
  if (treated.empty() || untreated.empty()) fail(ErrorKind::SingleArm, "both arms are required");
  const Matrix Gt = detail::take_rows(G, treated);
  const Matrix Gu = -detail::take_rows(G, untreated);

  out.state.rho = J ? detail::solve_el_multiplier(Gt, options, out.state.treated_iterations) : Vector();
  out.state.nu = J ? detail::solve_el_multiplier(Gu, options, out.state.untreated_iterations) : Vector();
  out.state.g_matrix = G;

  out.weights.kind = WeightKind::MultiplyRobust;
  out.weights.w.resize(n);
  const double m = static_cast<double>(treated.size());
  const double u = static_cast<double>(untreated.size());
  double treated_sum = 0.0, untreated_sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double proj = J ? G.row(i).dot(Z(i) == 1 ? out.state.rho : out.state.nu) : 0.0;
    out.weights.w(i) = Z(i) == 1 ? 1.0 / (1.0 + proj) / m : 1.0 / (1.0 - proj) / u;
    (Z(i) == 1 ? treated_sum : untreated_sum) += out.weights.w(i);
  }
  // At the solver's tolerance the sums differ from one only by rounding.
  for (Eigen::Index i = 0; i < n; ++i) out.weights.w(i) /= Z(i) == 1 ? treated_sum : untreated_sum;
  return out;
}

struct ArmWeightSummary {
  double max_weight = 0.0;
  double effective_sample_size = 0.0;
  int extreme_count = 0;  // weights above 10x the arm mean
};

struct WeightSummary {
  ArmWeightSummary treated;
  ArmWeightSummary untreated;
};

inline WeightSummary weight_diagnostics(const WeightVector& weights, const IntVector& Z) {
  WeightSummary out;
  for (int z : {1, 0}) {
    auto& arm = z ? out.treated : out.untreated;
    double sum = 0.0, sq = 0.0;
    int count = 0;
    for (Eigen::Index i = 0; i < Z.size(); ++i)
      if (Z(i) == z) {
        const double w = weights.w(i);
        sum += w;
        sq += w * w;
        arm.max_weight = std::max(arm.max_weight, w);
        ++count;
      }
    if (count == 0 || sq == 0.0) continue;
    arm.effective_sample_size = sum * sum / sq;
    const double mean = sum / count;
    for (Eigen::Index i = 0; i < Z.size(); ++i)
      if (Z(i) == z && weights.w(i) > 10.0 * mean) ++arm.extreme_count;
  }
  return out;
}

}  // namespace mhr
