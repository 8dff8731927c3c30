#pragma once

// Weighted Cox proportional hazards regression (Breslow ties), robust
// sandwich variance and Harrell's concordance index.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "mhr/core.hpp"

namespace mhr {

/// Terms entering a Cox model: optionally the treatment indicator (always the
/// first coefficient when present) followed by the named covariates.
struct CoxTerms {
  bool treatment = false;
  CovariateSet covariates;

  static CoxTerms treatment_only() { return {true, {}}; }
  static CoxTerms of(CovariateSet set) { return {false, std::move(set)}; }
  static CoxTerms treatment_and(CovariateSet set) { return {true, std::move(set)}; }

  Eigen::Index size() const {
    return static_cast<Eigen::Index>(covariates.size()) + (treatment ? 1 : 0);
  }
};

inline Matrix design_matrix(const SurvivalDataset& data, const CoxTerms& terms) {
  terms.covariates.check_bounds(data.p());
  Matrix out(data.n(), terms.size());
  Eigen::Index c = 0;
  if (terms.treatment) out.col(c++) = data.Z.cast<double>();
  for (auto col : terms.covariates.columns()) out.col(c++) = data.X.col(col);
  return out;
}

struct CoxFit {
  Vector coefficients;
  Vector model_se;
  Vector robust_se;
  Matrix information;
  double loglik = 0.0;
  bool converged = false;
  int iterations = 0;
};

struct CoxOptions {
  int max_iterations = 100;
  // Newton steps are invariant to rescaling the weights, so convergence is
  // judged on the step; one more step after this polishes to ~step^2.
  double step_tolerance = 1e-6;
  double max_abs_coefficient = 50.0;
};

namespace detail {

/// Tie groups of subjects ordered by decreasing time.
struct RiskOrder {
  std::vector<Eigen::Index> order;
  std::vector<std::size_t> group_begin;  // size = groups + 1

  explicit RiskOrder(const Vector& T) : order(static_cast<std::size_t>(T.size())) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return T(a) > T(b); });
    for (std::size_t k = 0; k < order.size(); ++k)
      if (k == 0 || T(order[k]) != T(order[k - 1])) group_begin.push_back(k);
    group_begin.push_back(order.size());
  }
  std::size_t groups() const { return group_begin.size() - 1; }
};

struct CoxValue {
  double loglik;
  Vector gradient;
  Matrix information;
};

/// Weighted Breslow partial log-likelihood with its gradient and observed information.
class CoxObjective {
 public:
  CoxObjective(const Matrix& design, const Vector& T, const IntVector& D, const Vector& w)
      : X_(design), D_(D), w_(w), risk_(T) {}

  const RiskOrder& risk() const { return risk_; }

  CoxValue evaluate(const Vector& beta, bool with_information = true) const {
    const auto q = X_.cols();
    const Vector eta = X_ * beta;
    const double shift = eta.size() ? eta.maxCoeff() : 0.0;
    double s0 = 0.0;
    Vector s1 = Vector::Zero(q);
    Matrix s2 = Matrix::Zero(q, q);
    CoxValue out{0.0, Vector::Zero(q), Matrix::Zero(q, q)};
    for (std::size_t g = 0; g < risk_.groups(); ++g) {
      const auto b = risk_.group_begin[g], e = risk_.group_begin[g + 1];
      for (auto k = b; k < e; ++k) {
        const auto i = risk_.order[k];
        const double r = w_(i) * std::exp(eta(i) - shift);
        s0 += r;
        s1.noalias() += r * X_.row(i).transpose();
        if (with_information) s2.noalias() += r * X_.row(i).transpose() * X_.row(i);
      }
      if (s0 <= 0.0) continue;
      const Vector mean = s1 / s0;
      for (auto k = b; k < e; ++k) {
        const auto i = risk_.order[k];
        if (D_(i) == 0 || w_(i) == 0.0) continue;
        out.loglik += w_(i) * (eta(i) - shift - std::log(s0));
        out.gradient.noalias() += w_(i) * (X_.row(i).transpose() - mean);
        if (with_information) out.information.noalias() += w_(i) * (s2 / s0 - mean * mean.transpose());
      }
    }
    return out;
  }

  /// Per-subject weighted score residuals (rows), evaluated at `beta`.
  Matrix score_residuals(const Vector& beta) const {
    const auto n = X_.rows(), q = X_.cols();
    const Vector eta = X_ * beta;
    const double shift = eta.size() ? eta.maxCoeff() : 0.0;
    const auto groups = risk_.groups();
    // Risk-set sums per tie group, descending time.
    std::vector<double> s0(groups);
    Matrix means(q, static_cast<Eigen::Index>(groups));
    {
      double acc0 = 0.0;
      Vector acc1 = Vector::Zero(q);
      for (std::size_t g = 0; g < groups; ++g) {
        for (auto k = risk_.group_begin[g]; k < risk_.group_begin[g + 1]; ++k) {
          const auto i = risk_.order[k];
          const double r = w_(i) * std::exp(eta(i) - shift);
          acc0 += r;
          acc1 += r * X_.row(i).transpose();
        }
        s0[g] = acc0;
        means.col(static_cast<Eigen::Index>(g)) = acc0 > 0 ? Vector(acc1 / acc0) : Vector::Zero(q);
      }
    }
    // Cumulative hazard increments accumulated from the earliest time upward.
    Matrix U(n, q);
    double hazard = 0.0;
    Vector hazard_mean = Vector::Zero(q);
    for (std::size_t gg = groups; gg-- > 0;) {
      const auto g = static_cast<Eigen::Index>(gg);
      double dN = 0.0;
      for (auto k = risk_.group_begin[gg]; k < risk_.group_begin[gg + 1]; ++k) {
        const auto i = risk_.order[k];
        if (D_(i) == 1) dN += w_(i);
      }
      if (dN > 0.0 && s0[gg] > 0.0) {
        hazard += dN / s0[gg];
        hazard_mean += (dN / s0[gg]) * means.col(g);
      }
      for (auto k = risk_.group_begin[gg]; k < risk_.group_begin[gg + 1]; ++k) {
        const auto i = risk_.order[k];
        const double r = std::exp(eta(i) - shift);
        Vector u = -r * (hazard * X_.row(i).transpose() - hazard_mean);
        if (D_(i) == 1) u += X_.row(i).transpose() - means.col(g);
        U.row(i) = w_(i) * u.transpose();
      }
    }
    return U;
  }

 private:
  const Matrix& X_;
  const IntVector& D_;
  const Vector& w_;
  RiskOrder risk_;
};

inline bool full_column_rank(const Matrix& design, const Vector& w) {
  if (design.cols() == 0) return true;
  const double total = w.sum();
  if (total <= 0.0) return false;
  Matrix centered = design;
  const Eigen::RowVectorXd mean = (w.transpose() * design) / total;
  centered.rowwise() -= mean;
  centered = w.cwiseSqrt().asDiagonal() * centered;
  Eigen::ColPivHouseholderQR<Matrix> qr(centered);
  qr.setThreshold(1e-10);
  return qr.rank() == design.cols();
}

inline Matrix invert_information(const Matrix& information) {
  Eigen::LDLT<Matrix> ldlt(information);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      ldlt.vectorD().minCoeff() <= 1e-12 * std::max(1.0, ldlt.vectorD().maxCoeff()))
    fail(ErrorKind::SingularInformation, "information matrix is not positive definite");
  return ldlt.solve(Matrix::Identity(information.rows(), information.cols()));
}

}  // namespace detail

/// Newton-Raphson with step halving on a prepared design matrix.
inline CoxFit fit_cox_design(const Matrix& design, const Vector& T, const IntVector& D,
                             const Vector& w, const CoxOptions& options = {}) {
  const auto q = design.cols();
  if (w.size() != T.size() || D.size() != T.size() || design.rows() != T.size())
    fail(ErrorKind::InvalidArgument, "Cox inputs have mismatched lengths");
  if ((D.array() == 1).select(w, 0.0).sum() <= 0.0)
    fail(ErrorKind::NoEvents, "no weighted events");
  if (!detail::full_column_rank(design, w))
    fail(ErrorKind::RankDeficientDesign, "Cox design is not of full column rank");

  detail::CoxObjective objective(design, T, D, w);
  CoxFit fit;
  Vector beta = Vector::Zero(q);
  auto value = objective.evaluate(beta);
  const Vector initial_curvature = value.information.diagonal();
  for (int iter = 0; iter <= options.max_iterations; ++iter) {
    fit.iterations = iter;
    // Information draining away while coefficients grow means the optimum is at infinity.
    if ((value.information.diagonal().array() <= 1e-10 * initial_curvature.array() && initial_curvature.array() > 0).any())
      fail(ErrorKind::MonotoneLikelihood, "information vanishes along the Newton path; partial likelihood is monotone");
    Eigen::LDLT<Matrix> ldlt(value.information);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
      fail(ErrorKind::RankDeficientDesign, "information matrix is singular");
    Vector step = ldlt.solve(value.gradient);
    if (step.lpNorm<Eigen::Infinity>() <= options.step_tolerance) {
      auto polished = objective.evaluate(beta + step);
      if (polished.loglik >= value.loglik - 1e-12 * std::abs(value.loglik)) {
        beta += step;
        value = std::move(polished);
      }
      fit.converged = true;
      break;
    }
    if (iter == options.max_iterations) break;
    Vector candidate = beta + step;
    auto next = objective.evaluate(candidate);
    for (int halving = 0; halving < 40 && !(next.loglik >= value.loglik - 1e-12 * std::abs(value.loglik));
         ++halving) {
      step *= 0.5;
      candidate = beta + step;
      next = objective.evaluate(candidate);
    }
    beta = candidate;
    value = std::move(next);
    if (beta.size() && beta.lpNorm<Eigen::Infinity>() > options.max_abs_coefficient)
      fail(ErrorKind::MonotoneLikelihood,
           "coefficient magnitude exceeds " + std::to_string(options.max_abs_coefficient) +
               "; partial likelihood is monotone");
  }
  fit.coefficients = beta;
  fit.loglik = value.loglik;
  fit.information = value.information;
  fit.model_se = Vector::Constant(q, std::nan(""));
  fit.robust_se = Vector::Constant(q, std::nan(""));
  if (fit.converged) {
    const Matrix inverse = detail::invert_information(value.information);
    fit.model_se = inverse.diagonal().cwiseSqrt();
    const Matrix U = objective.score_residuals(beta);
    const Matrix sandwich = inverse * (U.transpose() * U) * inverse;
    fit.robust_se = sandwich.diagonal().cwiseSqrt();
  }
  return fit;
}

/// Maximizes the weighted Breslow partial log-likelihood for the given terms.
inline CoxFit fit_weighted_cox(const SurvivalDataset& data, const CoxTerms& terms,
                               const WeightVector& weights, const CoxOptions& options = {}) {
  validate_weights(weights, data.Z);
  return fit_cox_design(design_matrix(data, terms), data.T, data.D, weights.w, options);
}

/// I^-1 (sum_i U_i U_i^T) I^-1 with U_i the weighted per-subject score residuals.
inline Matrix robust_sandwich_variance(const CoxFit& fit, const SurvivalDataset& data,
                                       const CoxTerms& terms, const WeightVector& weights) {
  if (!fit.converged) fail(ErrorKind::NonConvergence, "sandwich requires a converged fit");
  const Matrix design = design_matrix(data, terms);
  detail::CoxObjective objective(design, data.T, data.D, weights.w);
  const auto value = objective.evaluate(fit.coefficients);
  const Matrix inverse = detail::invert_information(value.information);
  const Matrix U = objective.score_residuals(fit.coefficients);
  Matrix out = inverse * (U.transpose() * U) * inverse;
  return 0.5 * (out + out.transpose());
}

/// Weighted partial log-likelihood and gradient at arbitrary coefficients.
inline std::pair<double, Vector> cox_loglik_gradient(const Matrix& design, const Vector& T,
                                                     const IntVector& D, const Vector& w,
                                                     const Vector& beta) {
  detail::CoxObjective objective(design, T, D, w);
  auto v = objective.evaluate(beta, false);
  return {v.loglik, v.gradient};
}

inline constexpr double kNormalQuantile975 = 1.959963984540054;

struct MhrEstimate {
  double alpha_z = 0.0;
  double mhr = 1.0;
  double robust_se = 0.0;
  double ci_lower = 0.0;
  double ci_upper = 0.0;

  static MhrEstimate from(double alpha_z, double robust_se) {
    return {alpha_z, std::exp(alpha_z), robust_se,
            std::exp(alpha_z - kNormalQuantile975 * robust_se),
            std::exp(alpha_z + kNormalQuantile975 * robust_se)};
  }

  bool covers(double truth) const { return ci_lower <= truth && truth <= ci_upper; }
};

/// Treatment-only weighted Cox fit summarized as a marginal hazard ratio.
inline MhrEstimate estimate_mhr(const SurvivalDataset& data, const WeightVector& weights,
                                const CoxOptions& options = {}) {
  const auto fit = fit_weighted_cox(data, CoxTerms::treatment_only(), weights, options);
  if (!fit.converged) fail(ErrorKind::NonConvergence, "treatment-only Cox fit did not converge");
  return MhrEstimate::from(fit.coefficients(0), fit.robust_se(0));
}

/// Harrell's C: share of comparable pairs where the higher risk has the shorter time.
/// A pair is comparable when the earlier time is an event; equal times count only
/// when exactly one of the two is an event (the event is taken as earlier).
template <class RiskVec, class TimeVec, class EventVec>
double harrell_concordance(const RiskVec& risk, const TimeVec& T, const EventVec& D) {
  const auto n = static_cast<Eigen::Index>(T.size());
  if (static_cast<Eigen::Index>(risk.size()) != n || static_cast<Eigen::Index>(D.size()) != n)
    fail(ErrorKind::InvalidArgument, "concordance inputs have mismatched lengths");
  double concordant = 0.0, comparable = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (D[i] != 1) continue;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const bool later = T[j] > T[i] || (T[j] == T[i] && D[j] == 0);
      if (!later) continue;
      comparable += 1.0;
      if (risk[i] > risk[j]) concordant += 1.0;
      else if (risk[i] == risk[j]) concordant += 0.5;
    }
  }
  if (comparable == 0.0) fail(ErrorKind::NoComparablePairs, "no comparable pairs");
  return concordant / comparable;
}

}  // namespace mhr
