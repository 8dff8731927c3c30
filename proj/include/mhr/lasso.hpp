#pragma once

// Unpenalized and l1-penalized logistic regression, l1-penalized Cox
// regression, and K-fold cross-validation with the one-standard-error rule.
//
// Penalized fits standardize predictors internally (mean 0, variance 1 with
// divisor n) and penalize the standardized coefficients; reported
// coefficients are on the original scale.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "mhr/core.hpp"
#include "mhr/survival.hpp"

namespace mhr {

// ---------------------------------------------------------------------------
// Unpenalized logistic regression
// ---------------------------------------------------------------------------

struct LogisticFit {
  double intercept = 0.0;
  Vector coefficients;
  Vector fitted;  // Pr(y = 1 | x) for every row
  int iterations = 0;
  bool converged = false;
};

enum class LogisticMode {
  /// Newton iterations to a gradient max-norm of 1e-8; separation is an error.
  Strict,
  /// Mirrors a classical GLM fitter: at most 25 IRLS iterations, relative
  /// deviance change below 1e-8 stops, and the last iterate is returned
  /// even when the likelihood has no finite maximizer.
  GlmCompatible,
};

struct LogisticOptions {
  LogisticMode mode = LogisticMode::Strict;
  int max_iterations = 100;
  double gradient_tolerance = 1e-8;
  double max_abs_coefficient = 30.0;
};

namespace detail {

inline double bernoulli_loglik(const Vector& eta, const IntVector& y) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double e = eta(i);
    // log(1 + exp(e)) computed stably
    const double softplus = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
    ll += y(i) * e - softplus;
  }
  return ll;
}

inline Matrix with_intercept(const Matrix& X) {
  Matrix design(X.rows(), X.cols() + 1);
  design.col(0).setOnes();
  design.rightCols(X.cols()) = X;
  return design;
}

inline Matrix weighted_crossprod(const Matrix& design, const Vector& w) {
  const Matrix scaled = w.cwiseSqrt().asDiagonal() * design;
  Matrix H = Matrix::Zero(design.cols(), design.cols());
  H.selfadjointView<Eigen::Lower>().rankUpdate(scaled.transpose());
  return H.selfadjointView<Eigen::Lower>();
}

}  // namespace detail

/// Maximum-likelihood logistic regression of y on the columns of X plus an intercept.
inline LogisticFit fit_logistic(const Matrix& X, const IntVector& y, const LogisticOptions& options = {}) {
  const auto n = X.rows();
  if (y.size() != n) fail(ErrorKind::InvalidArgument, "logistic inputs have mismatched lengths");
  const auto positives = y.sum();
  if (positives == 0 || positives == n)
    fail(ErrorKind::InvalidArgument, "logistic response needs both classes");
  const Matrix design = detail::with_intercept(X);
  {
    Eigen::ColPivHouseholderQR<Matrix> qr(design);
    qr.setThreshold(1e-10);
    if (qr.rank() < design.cols())
      fail(ErrorKind::RankDeficient, "logistic design is rank deficient");
  }
  const Vector yd = y.cast<double>();
  LogisticFit fit;
  Vector beta = Vector::Zero(design.cols());

  if (options.mode == LogisticMode::GlmCompatible) {
    constexpr double eps = std::numeric_limits<double>::epsilon();
    const double thresh = -std::log(eps);
    auto linkinv = [&](double e) {
      e = std::clamp(e, -thresh, thresh);
      return std::clamp(expit(e), eps, 1.0 - eps);
    };
    auto deviance = [&](const Vector& mu) {
      double dev = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) dev -= 2.0 * (y(i) ? std::log(mu(i)) : std::log1p(-mu(i)));
      return dev;
    };
    Vector mu = (yd.array() + 0.5) / 2.0;
    Vector eta = mu.unaryExpr([](double m) { return logit(m); });
    double dev_old = deviance(mu);
    for (int iter = 1; iter <= 25; ++iter) {
      fit.iterations = iter;
      const Vector w = mu.array() * (1.0 - mu.array());
      const Vector z = eta.array() + (yd - mu).array() / w.array();
      const Matrix H = detail::weighted_crossprod(design, w);
      beta = H.ldlt().solve(design.transpose() * w.cwiseProduct(z));
      eta = design * beta;
      mu = eta.unaryExpr(linkinv);
      const double dev = deviance(mu);
      if (std::abs(dev - dev_old) / (std::abs(dev) + 0.1) < 1e-8) {
        fit.converged = true;
        break;
      }
      dev_old = dev;
    }
    fit.intercept = beta(0);
    fit.coefficients = beta.tail(X.cols());
    fit.fitted = mu;
    return fit;
  }

  Vector eta = Vector::Zero(n);
  double ll = detail::bernoulli_loglik(eta, y);
  for (int iter = 0; iter <= options.max_iterations; ++iter) {
    fit.iterations = iter;
    const Vector p = eta.unaryExpr([](double e) { return expit(e); });
    const Vector grad = design.transpose() * (yd - p);
    if (grad.lpNorm<Eigen::Infinity>() <= options.gradient_tolerance) {
      fit.converged = true;
      break;
    }
    if (iter == options.max_iterations) break;
    const Vector w = p.array() * (1.0 - p.array());
    Vector step = detail::weighted_crossprod(design, w).ldlt().solve(grad);
    Vector candidate = beta + step;
    Vector eta_new = design * candidate;
    double ll_new = detail::bernoulli_loglik(eta_new, y);
    // Slack keeps rounding noise near the optimum from rejecting a Newton step.
    for (int h = 0; h < 40 && ll_new < ll - 1e-12 * std::abs(ll); ++h) {
      step *= 0.5;
      candidate = beta + step;
      eta_new = design * candidate;
      ll_new = detail::bernoulli_loglik(eta_new, y);
    }
    beta = candidate;
    eta = eta_new;
    ll = ll_new;
    if (beta.tail(X.cols()).size() && beta.tail(X.cols()).lpNorm<Eigen::Infinity>() > options.max_abs_coefficient)
      fail(ErrorKind::Separation, "coefficient magnitude exceeds " +
                                      std::to_string(options.max_abs_coefficient) +
                                      "; classes are (quasi-)separated");
    if (std::abs(beta(0)) > options.max_abs_coefficient)
      fail(ErrorKind::Separation, "intercept diverges; classes are (quasi-)separated");
  }
  if (!fit.converged) fail(ErrorKind::NonConvergence, "logistic regression did not converge");
  fit.intercept = beta(0);
  fit.coefficients = beta.tail(X.cols());
  fit.fitted = eta.unaryExpr([](double e) { return expit(e); });
  return fit;
}

// ---------------------------------------------------------------------------
// Penalized regression
// ---------------------------------------------------------------------------

struct LassoOptions {
  /// Coordinatewise KKT tolerance the solver drives every solution to.
  double kkt_tolerance = 1e-9;
  int max_sweeps = 100000;
  int max_outer = 200;
  /// Stop a path early once the deviance ratio saturates (>= 0.999) or its
  /// fractional change drops below 1e-5 after the fifth lambda.
  bool early_stop = true;
};

struct Standardization {
  Matrix Xs;
  Vector mean;
  Vector scale;  // 0 marks a constant column, which is never active

  explicit Standardization(const Matrix& X) : Xs(X), mean(X.cols()), scale(X.cols()) {
    const double n = static_cast<double>(X.rows());
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
      mean(j) = X.col(j).mean();
      Xs.col(j).array() -= mean(j);
      const double sd = std::sqrt(Xs.col(j).squaredNorm() / n);
      const double tiny = 1e-10 * std::max(1.0, std::abs(mean(j)));
      if (sd > tiny) {
        scale(j) = sd;
        Xs.col(j) /= sd;
      } else {
        scale(j) = 0.0;
        Xs.col(j).setZero();
      }
    }
  }
};

namespace detail {

inline double soft_threshold(double u, double lambda) {
  if (u > lambda) return u - lambda;
  if (u < -lambda) return u + lambda;
  return 0.0;
}

/// Bernoulli family: score y - p, information X^T diag(p(1 - p)) X.
class LogisticFamily {
 public:
  static constexpr bool kIntercept = true;
  explicit LogisticFamily(const IntVector& y) : y_(y.cast<double>()) {}

  void score(const Vector& eta, Vector& r) const {
    for (Eigen::Index i = 0; i < eta.size(); ++i) r(i) = y_(i) - expit(eta(i));
  }

  /// Per-observation state the information is built from.
  struct Curvature {
    Vector w;
  };
  Curvature curvature(const Vector& eta) const {
    Curvature c{Vector(eta.size())};
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      const double p = expit(eta(i));
      c.w(i) = p * (1.0 - p);
    }
    return c;
  }
  /// Block A^T H B of the negative log-likelihood Hessian in eta.
  Matrix information(const Curvature& c, Eigen::Ref<const Matrix> A, Eigen::Ref<const Matrix> B) const {
    return A.transpose() * (c.w.asDiagonal() * B);
  }
  Matrix information(const Curvature& c, Eigen::Ref<const Matrix> A) const {
    const Matrix WA = c.w.cwiseSqrt().asDiagonal() * A;
    Matrix Q = Matrix::Zero(A.cols(), A.cols());
    Q.selfadjointView<Eigen::Lower>().rankUpdate(WA.transpose());
    Q.triangularView<Eigen::StrictlyUpper>() = Q.transpose();
    return Q;
  }

  double loglik(const Vector& eta) const {
    double ll = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      const double e = eta(i);
      const double softplus = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
      ll += y_(i) * e - softplus;
    }
    return ll;
  }
  double saturated_loglik() const { return 0.0; }
  double null_intercept() const {
    const double ybar = y_.mean();
    return std::log(ybar / (1.0 - ybar));
  }

 private:
  Vector y_;
};

/// Breslow Cox family: score D_i - exp(eta_i) A_i with A_i the cumulative
/// baseline hazard at T_i.
class CoxFamily {
 public:
  static constexpr bool kIntercept = false;
  CoxFamily(const Vector& T, const IntVector& D) : D_(D), risk_(T) {
    const auto groups = risk_.groups();
    deaths_.assign(groups, 0.0);
    for (std::size_t g = 0; g < groups; ++g)
      for (auto k = risk_.group_begin[g]; k < risk_.group_begin[g + 1]; ++k)
        deaths_[g] += D_(risk_.order[k]);
    s0_.resize(groups);
  }

  void score(const Vector& eta, Vector& r) const {
    const double shift = risk_sums(eta);
    double A = 0.0;
    for (std::size_t g = risk_.groups(); g-- > 0;) {
      if (deaths_[g] > 0) A += deaths_[g] / s0_[g];
      for (auto k = risk_.group_begin[g]; k < risk_.group_begin[g + 1]; ++k) {
        const auto i = risk_.order[k];
        r(i) = D_(i) - std::exp(eta(i) - shift) * A;
      }
    }
  }

  struct Curvature {
    Vector e;               // exp(eta - shift)
    Vector ea;              // e * cumulative hazard
    std::vector<double> c;  // sqrt(d) / S0 per tie group, 0 without events
  };
  Curvature curvature(const Vector& eta) const {
    const double shift = risk_sums(eta);
    Curvature cv{Vector(eta.size()), Vector(eta.size()), std::vector<double>(risk_.groups(), 0.0)};
    double A = 0.0;
    for (std::size_t g = risk_.groups(); g-- > 0;) {
      if (deaths_[g] > 0) {
        A += deaths_[g] / s0_[g];
        cv.c[g] = std::sqrt(deaths_[g]) / s0_[g];
      }
      for (auto k = risk_.group_begin[g]; k < risk_.group_begin[g + 1]; ++k) {
        const auto i = risk_.order[k];
        cv.e(i) = std::exp(eta(i) - shift);
        cv.ea(i) = cv.e(i) * A;
      }
    }
    return cv;
  }
  /// X^T diag(e A) X minus the sum over event times of d/S0^2 * m m^T, where
  /// m accumulates e_i x_i over the risk set; here for the block A^T H B.
  Matrix information(const Curvature& cv, Eigen::Ref<const Matrix> A, Eigen::Ref<const Matrix> B) const {
    return A.transpose() * (cv.ea.asDiagonal() * B) - moments(cv, A).transpose() * moments(cv, B);
  }
  Matrix information(const Curvature& cv, Eigen::Ref<const Matrix> A) const {
    const Matrix WA = cv.ea.cwiseSqrt().asDiagonal() * A;
    const Matrix M = moments(cv, A);
    Matrix Q = Matrix::Zero(A.cols(), A.cols());
    Q.selfadjointView<Eigen::Lower>().rankUpdate(WA.transpose());
    Q.selfadjointView<Eigen::Lower>().rankUpdate(M.transpose(), -1.0);
    Q.triangularView<Eigen::StrictlyUpper>() = Q.transpose();
    return Q;
  }

  double loglik(const Vector& eta) const {
    const double shift = eta.maxCoeff();
    double acc = 0.0, ll = 0.0;
    for (std::size_t g = 0; g < risk_.groups(); ++g) {
      for (auto k = risk_.group_begin[g]; k < risk_.group_begin[g + 1]; ++k)
        acc += std::exp(eta(risk_.order[k]) - shift);
      for (auto k = risk_.group_begin[g]; k < risk_.group_begin[g + 1]; ++k) {
        const auto i = risk_.order[k];
        if (D_(i)) ll += eta(i) - shift - std::log(acc);
      }
    }
    return ll;
  }
  double saturated_loglik() const {
    double s = 0.0;
    for (double d : deaths_)
      if (d > 1) s -= d * std::log(d);
    return s;
  }
  double null_intercept() const { return 0.0; }

 private:
  // Fills s0_ with shifted risk-set sums (descending time); returns the shift.
  double risk_sums(const Vector& eta) const {
    const double shift = eta.maxCoeff();
    double acc = 0.0;
    for (std::size_t g = 0; g < risk_.groups(); ++g) {
      for (auto k = risk_.group_begin[g]; k < risk_.group_begin[g + 1]; ++k)
        acc += std::exp(eta(risk_.order[k]) - shift);
      s0_[g] = acc;
    }
    return shift;
  }
  // One row per event group: sqrt(d)/S0 times the risk-set sum of e_i x_i.
  Matrix moments(const Curvature& cv, Eigen::Ref<const Matrix> X) const {
    std::size_t rows = 0;
    for (double c : cv.c) rows += c > 0;
    Matrix M(static_cast<Eigen::Index>(rows), X.cols());
    Vector cum = Vector::Zero(X.cols());
    Eigen::Index row = 0;
    for (std::size_t g = 0; g < risk_.groups(); ++g) {
      for (auto k = risk_.group_begin[g]; k < risk_.group_begin[g + 1]; ++k) {
        const auto i = risk_.order[k];
        cum.noalias() += cv.e(i) * X.row(i).transpose();
      }
      if (cv.c[g] > 0) M.row(row++) = cv.c[g] * cum.transpose();
    }
    return M;
  }

  const IntVector& D_;
  RiskOrder risk_;
  std::vector<double> deaths_;
  mutable std::vector<double> s0_;
};

/// Warm-started proximal Newton. Each outer step minimizes the l1-penalized
/// quadratic model on the working set by coordinate descent over its Gram
/// matrix, then backtracks on the penalized objective. The working set only
/// grows along the path (strong-rule screening plus a full KKT pass), and the
/// information matrix is kept from earlier steps, extended for new columns,
/// until progress stalls.
template <class Family>
class CoordinateDescent {
  static constexpr Eigen::Index kOffset = Family::kIntercept ? 1 : 0;

 public:
  CoordinateDescent(const Matrix& Xs, const Vector& scale, const Family& family, const LassoOptions& options)
      : Xs_(Xs), scale_(scale), family_(family), options_(options), n_(static_cast<double>(Xs.rows())),
        beta_(Vector::Zero(Xs.cols())), eta_(Vector::Constant(Xs.rows(), family.null_intercept())),
        r_(Xs.rows()), grad_(Xs.cols()), in_set_(static_cast<std::size_t>(Xs.cols()), 0),
        XA_(Xs.rows(), std::min<Eigen::Index>(Xs.cols() + kOffset, 64)) {
    b0_ = family.null_intercept();
    if constexpr (Family::kIntercept) XA_.col(0).setOnes();
    refresh_gradient();
    null_loglik_ = family_.loglik(eta_);
  }

  double lambda_max() const {
    double m = 0.0;
    for (Eigen::Index j = 0; j < grad_.size(); ++j)
      if (scale_(j) > 0) m = std::max(m, std::abs(grad_(j)));
    return m;
  }

  const Vector& beta() const { return beta_; }
  double intercept() const { return b0_; }
  const Vector& eta() const { return eta_; }

  double deviance_ratio() const {
    const double sat = family_.saturated_loglik();
    const double null_dev = 2.0 * (sat - null_loglik_);
    if (null_dev <= 0) return 0.0;
    return 1.0 - 2.0 * (sat - family_.loglik(eta_)) / null_dev;
  }

  /// Solves at `lambda`, warm-started from the current state.
  void solve(double lambda, double lambda_prev) {
    const auto p = Xs_.cols();
    sweeps_ = 0;
    const double strong = 2.0 * lambda - lambda_prev;
    for (Eigen::Index j = 0; j < p; ++j)
      if (scale_(j) > 0 && !in_set_[static_cast<std::size_t>(j)] && std::abs(grad_(j)) >= strong) add(j);
    last_violation_ = std::numeric_limits<double>::infinity();
    for (int outer = 0;; ++outer) {
      if (outer >= options_.max_outer) fail(ErrorKind::NonConvergence, "lasso Newton iterations did not converge");
      family_.score(eta_, r_);
      const double viol = ws_violation(lambda);
      if (viol > options_.kkt_tolerance) {
        newton_step(lambda, viol);
        continue;
      }
      refresh_gradient_from_r();
      bool violated = false;
      for (Eigen::Index j = 0; j < p; ++j) {
        if (scale_(j) <= 0 || in_set_[static_cast<std::size_t>(j)]) continue;
        if (std::abs(grad_(j)) > lambda + options_.kkt_tolerance) {
          add(j);
          violated = true;
        }
      }
      if (!violated) return;
      last_violation_ = std::numeric_limits<double>::infinity();
      newton_step(lambda, ws_violation(lambda));
    }
  }

 private:
  Eigen::Index columns() const { return static_cast<Eigen::Index>(ws_.size()) + kOffset; }

  void add(Eigen::Index j) {
    in_set_[static_cast<std::size_t>(j)] = 1;
    ws_.push_back(j);
    const auto c = columns();
    if (XA_.cols() < c) XA_.conservativeResize(Eigen::NoChange, std::min(2 * XA_.cols(), Xs_.cols() + kOffset));
    XA_.col(c - 1) = Xs_.col(j);
  }

  void refresh_gradient() {
    family_.score(eta_, r_);
    refresh_gradient_from_r();
  }
  void refresh_gradient_from_r() { grad_.noalias() = Xs_.transpose() * r_ / n_; }

  /// Largest KKT violation over the working set (and the intercept); refreshes grad_ there.
  double ws_violation(double lambda) {
    double worst = 0.0;
    if constexpr (Family::kIntercept) worst = std::abs(r_.sum() / n_);
    for (auto j : ws_) {
      const double g = Xs_.col(j).dot(r_) / n_;
      grad_(j) = g;
      const double b = beta_(j);
      worst = std::max(worst, b == 0.0 ? std::abs(g) - lambda : std::abs(g - (b > 0 ? lambda : -lambda)));
    }
    return worst;
  }

  double penalized_objective(const Vector& eta, const Vector& beta, double lambda) const {
    return -family_.loglik(eta) / n_ + lambda * beta.lpNorm<1>();
  }

  /// Keeps Q_ the information (per observation) of the working-set columns,
  /// evaluated at the linearization point of the last refresh.
  void sync_information(bool refresh) {
    const auto cols = columns();
    const auto XA = XA_.leftCols(cols);
    if (refresh || Q_.cols() == 0) {
      curvature_ = family_.curvature(eta_);
      Q_ = family_.information(curvature_, XA) / n_;
      factor_valid_ = false;
      return;
    }
    const auto old = Q_.cols();
    if (old == cols) return;
    const auto fresh = XA_.middleCols(old, cols - old);
    const Matrix cross = family_.information(curvature_, XA_.leftCols(old), fresh) / n_;
    const Matrix corner = family_.information(curvature_, fresh) / n_;
    Q_.conservativeResize(cols, cols);
    Q_.topRightCorner(old, cols - old) = cross;
    Q_.bottomLeftCorner(cols - old, old) = cross.transpose();
    Q_.bottomRightCorner(cols - old, cols - old) = corner;
  }

  /// Minimizes the quadratic model over the current support with signs held
  /// fixed. Returns true when that point satisfies the model's KKT
  /// conditions; otherwise moves b toward it as far as the signs allow.
  bool support_solve(const Vector& g, const Vector& b_old, double lambda, double tol,
                     const std::vector<signed char>& signs, Vector& b, Vector& u) {
    const Matrix& Q = Q_;
    auto penalized = [](Eigen::Index k) { return k >= kOffset; };
    std::vector<Eigen::Index> S;
    for (Eigen::Index k = 0; k < Q.cols(); ++k)
      if (signs[static_cast<std::size_t>(k)] != 0 || !penalized(k)) S.push_back(k);
    if (S.empty()) return false;
    const auto m = static_cast<Eigen::Index>(S.size());
    Vector rhs(m);
    const Vector Qb = Q * b_old;
    for (Eigen::Index a = 0; a < m; ++a)
      rhs(a) = g(S[a]) + Qb(S[a]) - lambda * signs[static_cast<std::size_t>(S[a])];
    // Entries of Q_ for existing columns never change between refreshes, so
    // the factorization is reused while the support is unchanged.
    if (!factor_valid_ || S != factor_support_) {
      Matrix QS(m, m);
      for (Eigen::Index a = 0; a < m; ++a)
        for (Eigen::Index c = 0; c < m; ++c) QS(a, c) = Q(S[a], S[c]);
      factor_.compute(QS);
      factor_support_ = S;
      factor_valid_ = true;
    }
    if (factor_.info() != Eigen::Success) return false;
    const Vector bS = factor_.solve(rhs);
    if (!bS.allFinite()) return false;
    // Largest fraction of the move that keeps every support sign.
    double t = 1.0;
    Eigen::Index crossing = -1;
    for (Eigen::Index a = 0; a < m; ++a) {
      const auto k = S[a];
      if (!penalized(k) || bS(a) * signs[static_cast<std::size_t>(k)] > 0.0) continue;
      const double frac = b(k) / (b(k) - bS(a));
      if (frac < t) {
        t = frac;
        crossing = k;
      }
    }
    Vector trial = Vector::Zero(Q.cols());
    for (Eigen::Index a = 0; a < m; ++a) trial(S[a]) = b(S[a]) + t * (bS(a) - b(S[a]));
    if (crossing >= 0) trial(crossing) = 0.0;
    const Vector trial_u = Q * (trial - b_old);
    auto model = [&](const Vector& x, const Vector& ux) {
      const Vector d = x - b_old;
      return -g.dot(d) + 0.5 * d.dot(ux) + lambda * x.tail(x.size() - kOffset).lpNorm<1>();
    };
    // An ill-conditioned support can make the solve inaccurate; only descent moves are taken.
    if (model(trial, trial_u) > model(b, u)) return false;
    b = trial;
    u = trial_u;
    if (crossing >= 0) return false;
    for (Eigen::Index k = 0; k < Q.cols(); ++k) {
      const double c = g(k) - u(k);
      const double viol = !penalized(k)  ? std::abs(c)
                          : b(k) == 0.0  ? std::abs(c) - lambda
                                         : std::abs(c - lambda * (b(k) > 0 ? 1.0 : -1.0));
      if (!(viol <= tol)) return false;
    }
    return true;
  }

  /// One proximal Newton step on the working set (r_ and grad_ current). The
  /// inner solve only needs accuracy relative to the outer KKT violation.
  void newton_step(double lambda, double violation) {
    sync_information(force_refresh_ || violation > 0.25 * last_violation_);
    force_refresh_ = false;
    last_violation_ = violation;
    const auto cols = columns();
    const Matrix& Q = Q_;
    Vector g(cols), b(cols);
    if constexpr (Family::kIntercept) {
      g(0) = r_.sum() / n_;
      b(0) = b0_;
    }
    for (Eigen::Index k = kOffset; k < cols; ++k) {
      const auto j = ws_[static_cast<std::size_t>(k - kOffset)];
      g(k) = grad_(j);
      b(k) = beta_(j);
    }

    // Minimize -g'd + d'Qd/2 + lambda |b + d|_1 (intercept unpenalized).
    const Vector b_old = b;
    Vector u = Vector::Zero(cols);  // Q (b - b_old)
    const double inner_tol = std::max(0.01 * options_.kkt_tolerance, 0.1 * violation);
    std::vector<signed char> signs(static_cast<std::size_t>(cols), 0), last_signs;
    int stable = 0, next_attempt = 2;
    for (;;) {
      if (++sweeps_ > options_.max_sweeps)
        fail(ErrorKind::NonConvergence, "coordinate descent exceeded the sweep limit");
      double max_change = 0.0;
      for (Eigen::Index k = 0; k < cols; ++k) {
        const double qkk = Q(k, k);
        if (qkk <= 0.0) continue;
        const double c = g(k) - u(k) + qkk * b(k);
        const double updated = k >= kOffset ? soft_threshold(c, lambda) / qkk : c / qkk;
        const double delta = updated - b(k);
        if (delta == 0.0) continue;
        b(k) = updated;
        u.noalias() += delta * Q.col(k);
        max_change = std::max(max_change, qkk * std::abs(delta));
      }
      if (max_change < inner_tol) break;
      // Once the sign pattern settles, try the exact minimizer on the support.
      for (Eigen::Index k = 0; k < cols; ++k)
        signs[static_cast<std::size_t>(k)] = b(k) > 0 ? 1 : (b(k) < 0 ? -1 : 0);
      stable = signs == last_signs ? stable + 1 : 0;
      last_signs = signs;
      if (stable >= next_attempt) {
        if (support_solve(g, b_old, lambda, inner_tol, signs, b, u)) break;
        stable = 0;
        next_attempt = std::min(2 * next_attempt, 64);
      }
    }

    const Vector step = b - b_old;
    const Vector eta_step = XA_.leftCols(cols) * step;
    const Vector eta_old = eta_;
    const double obj_old = penalized_objective(eta_, beta_, lambda);
    for (double t = 1.0;; t *= 0.5) {
      for (Eigen::Index k = kOffset; k < cols; ++k)
        beta_(ws_[static_cast<std::size_t>(k - kOffset)]) = b(k) == 0.0 && t == 1.0 ? 0.0 : b_old(k) + t * step(k);
      if constexpr (Family::kIntercept) b0_ = b_old(0) + t * step(0);
      eta_ = eta_old + t * eta_step;
      if (penalized_objective(eta_, beta_, lambda) <= obj_old + 1e-13 * std::abs(obj_old)) break;
      force_refresh_ = true;
      if (t < 1e-10) break;
    }
  }

  const Matrix& Xs_;
  const Vector& scale_;
  const Family& family_;
  LassoOptions options_;
  double n_;
  Vector beta_;
  double b0_ = 0.0;
  Vector eta_;
  Vector r_;
  Vector grad_;
  std::vector<char> in_set_;
  std::vector<Eigen::Index> ws_;
  Matrix XA_;  // intercept column (if any) then working-set columns
  double null_loglik_ = 0.0;
  long sweeps_ = 0;
  Matrix Q_;
  typename Family::Curvature curvature_;
  bool force_refresh_ = false;
  double last_violation_ = 0.0;
  Eigen::LLT<Matrix> factor_;
  std::vector<Eigen::Index> factor_support_;
  bool factor_valid_ = false;
};

}  // namespace detail

/// Solutions along a decreasing lambda sequence. Columns of `coefficients`
/// are on the original covariate scale.
struct LassoPath {
  std::vector<double> lambdas;
  Matrix coefficients;             // P x L
  Matrix std_coefficients;         // P x L, standardized scale
  std::vector<double> intercepts;  // logistic only
  std::vector<double> deviance_ratio;

  Eigen::Index size() const { return static_cast<Eigen::Index>(lambdas.size()); }

  /// 1-based indices of the nonzero coefficients at path position `k`.
  CovariateSet active(Eigen::Index k) const {
    std::vector<int> idx;
    for (Eigen::Index j = 0; j < coefficients.rows(); ++j)
      if (coefficients(j, k) != 0.0) idx.push_back(static_cast<int>(j) + 1);
    return CovariateSet(std::move(idx));
  }
};

struct LassoFit {
  double lambda = 0.0;
  double intercept = 0.0;
  Vector coefficients;      // original scale
  Vector std_coefficients;  // standardized scale

  CovariateSet active() const {
    std::vector<int> idx;
    for (Eigen::Index j = 0; j < coefficients.size(); ++j)
      if (coefficients(j) != 0.0) idx.push_back(static_cast<int>(j) + 1);
    return CovariateSet(std::move(idx));
  }
};

namespace detail {

template <class Family>
LassoPath run_path(const Matrix& X, const Family& family, const std::vector<double>& lambdas,
                   const LassoOptions& options) {
  for (std::size_t k = 1; k < lambdas.size(); ++k)
    if (!(lambdas[k] < lambdas[k - 1])) fail(ErrorKind::InvalidArgument, "lambdas must be strictly decreasing");
  const Standardization st(X);
  CoordinateDescent<Family> cd(st.Xs, st.scale, family, options);
  LassoPath path;
  const auto p = X.cols();
  std::vector<Vector> std_cols;
  double lambda_prev = lambdas.empty() ? 0.0 : std::max(lambdas.front(), cd.lambda_max());
  for (std::size_t k = 0; k < lambdas.size(); ++k) {
    cd.solve(lambdas[k], lambda_prev);
    lambda_prev = lambdas[k];
    path.lambdas.push_back(lambdas[k]);
    std_cols.push_back(cd.beta());
    double b0 = cd.intercept();
    for (Eigen::Index j = 0; j < p; ++j)
      if (st.scale(j) > 0) b0 -= cd.beta()(j) * st.mean(j) / st.scale(j);
    path.intercepts.push_back(b0);
    const double dr = cd.deviance_ratio();
    path.deviance_ratio.push_back(dr);
    if (options.early_stop) {
      if (dr >= 0.999) break;
      if (k >= 5 && dr - path.deviance_ratio[k - 1] < 1e-5 * dr) break;
    }
  }
  const auto L = static_cast<Eigen::Index>(std_cols.size());
  path.std_coefficients.resize(p, L);
  path.coefficients.resize(p, L);
  for (Eigen::Index k = 0; k < L; ++k) {
    path.std_coefficients.col(k) = std_cols[static_cast<std::size_t>(k)];
    for (Eigen::Index j = 0; j < p; ++j)
      path.coefficients(j, k) = st.scale(j) > 0 ? std_cols[static_cast<std::size_t>(k)](j) / st.scale(j) : 0.0;
  }
  return path;
}

template <class Family>
double lambda_max_of(const Matrix& X, const Family& family) {
  const Standardization st(X);
  detail::CoordinateDescent<Family> cd(st.Xs, st.scale, family, LassoOptions{});
  return cd.lambda_max();
}

inline LassoFit single_fit(const LassoPath& path) {
  const auto k = path.size() - 1;
  return {path.lambdas.back(), path.intercepts.back(), path.coefficients.col(k), path.std_coefficients.col(k)};
}

/// Warm-start sequence ending exactly at `lambda`.
inline std::vector<double> approach(double lambda_max, double lambda) {
  std::vector<double> seq;
  if (lambda < lambda_max && lambda > 0) {
    const int steps = 20;
    for (int s = 0; s < steps; ++s) {
      const double v = lambda_max * std::pow(lambda / lambda_max, static_cast<double>(s) / steps);
      if (v > lambda) seq.push_back(v);
    }
  } else if (lambda == 0 && lambda_max > 0) {
    for (int s = 0; s < 20; ++s) seq.push_back(lambda_max * std::pow(1e-3, s / 19.0));
  }
  seq.push_back(lambda);
  seq.erase(std::unique(seq.begin(), seq.end()), seq.end());
  return seq;
}

inline void check_logistic_response(const IntVector& y, Eigen::Index n) {
  if (y.size() != n) fail(ErrorKind::InvalidArgument, "response length mismatch");
  const auto s = y.sum();
  if (s == 0 || s == n) fail(ErrorKind::InvalidArgument, "logistic response needs both classes");
}

inline void check_cox_response(const Vector& T, const IntVector& D, Eigen::Index n) {
  if (T.size() != n || D.size() != n) fail(ErrorKind::InvalidArgument, "response length mismatch");
  if (D.sum() == 0) fail(ErrorKind::NoEvents, "Cox lasso needs at least one event");
}

}  // namespace detail

/// max_p |(1/n) sum_i x~_ip (y_i - ybar)| on standardized predictors.
inline double logistic_lambda_max(const Matrix& X, const IntVector& y) {
  detail::check_logistic_response(y, X.rows());
  return detail::lambda_max_of(X, detail::LogisticFamily(y));
}

/// Largest absolute coordinate of the null-model partial-likelihood score over n.
inline double cox_lambda_max(const Matrix& X, const Vector& T, const IntVector& D) {
  detail::check_cox_response(T, D, X.rows());
  return detail::lambda_max_of(X, detail::CoxFamily(T, D));
}

inline LassoPath logistic_lasso_path(const Matrix& X, const IntVector& y, const std::vector<double>& lambdas,
                                     const LassoOptions& options = {}) {
  detail::check_logistic_response(y, X.rows());
  return detail::run_path(X, detail::LogisticFamily(y), lambdas, options);
}

inline LassoPath cox_lasso_path(const Matrix& X, const Vector& T, const IntVector& D,
                                const std::vector<double>& lambdas, const LassoOptions& options = {}) {
  detail::check_cox_response(T, D, X.rows());
  return detail::run_path(X, detail::CoxFamily(T, D), lambdas, options);
}

/// Minimizes (1/n) * negative log-likelihood + lambda * sum |beta_std|.
inline LassoFit fit_logistic_lasso(const Matrix& X, const IntVector& y, double lambda, LassoOptions options = {}) {
  options.early_stop = false;
  const auto seq = detail::approach(logistic_lambda_max(X, y), lambda);
  return detail::single_fit(logistic_lasso_path(X, y, seq, options));
}

/// Minimizes (1/n) * negative Breslow partial log-likelihood + lambda * sum |alpha_std|.
inline LassoFit fit_cox_lasso(const Matrix& X, const Vector& T, const IntVector& D, double lambda,
                              LassoOptions options = {}) {
  options.early_stop = false;
  const auto seq = detail::approach(cox_lambda_max(X, T, D), lambda);
  return detail::single_fit(cox_lasso_path(X, T, D, seq, options));
}

/// `count` log-spaced values from lambda_max down to ratio * lambda_max, where
/// ratio is 0.01 when n > P and 0.05 otherwise.
inline std::vector<double> lambda_grid(double lambda_max, Eigen::Index n, Eigen::Index p, int count = 100) {
  std::vector<double> grid;
  if (!(lambda_max > 0)) return grid;
  const double ratio = n > p ? 0.01 : 0.05;
  for (int k = 0; k < count; ++k)
    grid.push_back(lambda_max * std::exp(std::log(ratio) * k / (count - 1)));
  return grid;
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

enum class LassoKind { Logistic, Cox };

struct CvPoint {
  double lambda;
  double mean_loss;
  double se_loss;
};

struct CvResult {
  double lambda_min = 0.0;
  double lambda_1se = 0.0;
  std::vector<CvPoint> cv_curve;
  std::vector<int> folds;  // fold id (0-based) per row
  /// Full-data path over the CV grid; used to read off coefficients.
  LassoPath path;

  /// Position of `lambda_1se` on the path.
  Eigen::Index index_1se() const {
    for (Eigen::Index k = 0; k < path.size(); ++k)
      if (path.lambdas[static_cast<std::size_t>(k)] == lambda_1se) return k;
    return 0;
  }
};

struct CvOptions {
  int folds = 10;
  int grid_size = 100;
  LassoOptions lasso{};
};

namespace detail {

inline std::vector<int> random_folds(Eigen::Index n, int K, RngStream& rng) {
  std::vector<int> ids(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i % static_cast<std::size_t>(K));
  rng.shuffle(ids.begin(), ids.end());
  return ids;
}

/// Events and non-events are dealt round-robin into folds after shuffling each group.
inline std::vector<int> event_stratified_folds(const IntVector& D, int K, RngStream& rng) {
  std::vector<Eigen::Index> events, others;
  for (Eigen::Index i = 0; i < D.size(); ++i) (D(i) ? events : others).push_back(i);
  rng.shuffle(events.begin(), events.end());
  rng.shuffle(others.begin(), others.end());
  std::vector<int> ids(static_cast<std::size_t>(D.size()));
  int next = 0;
  for (auto i : events) ids[static_cast<std::size_t>(i)] = next++ % K;
  for (auto i : others) ids[static_cast<std::size_t>(i)] = next++ % K;
  return ids;
}

template <class Vec>
Vec take(const Vec& v, const std::vector<Eigen::Index>& rows) {
  Vec out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) out(static_cast<Eigen::Index>(k)) = v(rows[k]);
  return out;
}

inline Matrix take_rows(const Matrix& X, const std::vector<Eigen::Index>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), X.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = X.row(rows[k]);
  return out;
}

inline double binomial_deviance(const Vector& eta, const IntVector& y) {
  double dev = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double p = std::clamp(expit(eta(i)), 1e-5, 1.0 - 1e-5);
    dev -= 2.0 * (y(i) ? std::log(p) : std::log1p(-p));
  }
  return dev / static_cast<double>(eta.size());
}

/// Per-fold losses (rows = folds, cols = lambdas) reduced to the CV curve and
/// the lambda_min / lambda_1se choices.
inline CvResult summarize(const std::vector<double>& lambdas, const Matrix& losses, const Vector& fold_weights) {
  CvResult res;
  const auto K = losses.rows();
  const double total = fold_weights.sum();
  for (Eigen::Index k = 0; k < losses.cols(); ++k) {
    const double mean = fold_weights.dot(losses.col(k)) / total;
    const double var = fold_weights.dot((losses.col(k).array() - mean).square().matrix()) / total;
    res.cv_curve.push_back({lambdas[static_cast<std::size_t>(k)], mean, std::sqrt(var / static_cast<double>(K - 1))});
  }
  std::size_t best = 0;
  for (std::size_t k = 1; k < res.cv_curve.size(); ++k)
    if (res.cv_curve[k].mean_loss < res.cv_curve[best].mean_loss) best = k;
  res.lambda_min = res.cv_curve[best].lambda;
  const double bound = res.cv_curve[best].mean_loss + res.cv_curve[best].se_loss;
  for (const auto& pt : res.cv_curve)
    if (pt.mean_loss <= bound) {
      res.lambda_1se = pt.lambda;
      break;
    }
  return res;
}

}  // namespace detail

/// K-fold cross-validated logistic lasso, binomial deviance loss.
inline CvResult cross_validate_logistic(const Matrix& X, const IntVector& y, RngStream& rng,
                                        const CvOptions& options = {}) {
  const auto n = X.rows();
  detail::check_logistic_response(y, n);
  if (n < 20) fail(ErrorKind::InvalidArgument, "cross-validation needs at least 20 rows");
  const int K = options.folds;
  auto folds = detail::random_folds(n, K, rng);
  const double lmax = logistic_lambda_max(X, y);
  if (!(lmax > 0)) {
    // No usable predictor: the curve is a single flat point at lambda_max = 0.
    CvResult res;
    res.lambda_min = res.lambda_1se = lmax;
    res.cv_curve.push_back({lmax, detail::binomial_deviance(Vector::Constant(n, logit(y.cast<double>().mean())), y), 0.0});
    res.folds = std::move(folds);
    res.path.lambdas = {lmax};
    res.path.coefficients = Matrix::Zero(X.cols(), 1);
    res.path.std_coefficients = Matrix::Zero(X.cols(), 1);
    res.path.intercepts = {logit(y.cast<double>().mean())};
    res.path.deviance_ratio = {0.0};
    return res;
  }
  auto lambdas = lambda_grid(lmax, n, X.cols(), options.grid_size);
  auto full = logistic_lasso_path(X, y, lambdas, options.lasso);
  std::vector<LassoPath> fold_paths;
  std::vector<std::vector<Eigen::Index>> test_rows(static_cast<std::size_t>(K));
  Eigen::Index common = full.size();
  for (int f = 0; f < K; ++f) {
    std::vector<Eigen::Index> train;
    for (Eigen::Index i = 0; i < n; ++i)
      (folds[static_cast<std::size_t>(i)] == f ? test_rows[static_cast<std::size_t>(f)] : train).push_back(i);
    const IntVector ytr = detail::take(y, train);
    if (ytr.sum() == 0 || ytr.sum() == static_cast<int>(ytr.size()))
      fail(ErrorKind::InvalidArgument, "training fold lacks one response class");
    fold_paths.push_back(logistic_lasso_path(detail::take_rows(X, train), ytr, lambdas, options.lasso));
    common = std::min(common, fold_paths.back().size());
  }
  Matrix losses(K, common);
  Vector weights(K);
  for (int f = 0; f < K; ++f) {
    const auto& rows = test_rows[static_cast<std::size_t>(f)];
    const Matrix Xte = detail::take_rows(X, rows);
    const IntVector yte = detail::take(y, rows);
    const auto& path = fold_paths[static_cast<std::size_t>(f)];
    for (Eigen::Index k = 0; k < common; ++k) {
      Vector eta = Xte * path.coefficients.col(k);
      eta.array() += path.intercepts[static_cast<std::size_t>(k)];
      losses(f, k) = detail::binomial_deviance(eta, yte);
    }
    weights(f) = static_cast<double>(rows.size());
  }
  lambdas.resize(static_cast<std::size_t>(common));
  auto res = detail::summarize(lambdas, losses, weights);
  res.folds = std::move(folds);
  res.path = std::move(full);
  if (res.path.size() < static_cast<Eigen::Index>(lambdas.size())) {
    // The full-data path stopped early; extend it so lambda_1se is on it.
    LassoOptions o = options.lasso;
    o.early_stop = false;
    res.path = logistic_lasso_path(X, y, lambdas, o);
  }
  return res;
}

/// K-fold cross-validated Cox lasso; loss is minus Harrell's C of the held-out
/// fold scored with the training-fit linear predictor.
inline CvResult cross_validate_cox(const Matrix& X, const Vector& T, const IntVector& D, RngStream& rng,
                                   const CvOptions& options = {}) {
  const auto n = X.rows();
  detail::check_cox_response(T, D, n);
  if (n < 20) fail(ErrorKind::InvalidArgument, "cross-validation needs at least 20 rows");
  const int K = options.folds;
  auto folds = detail::event_stratified_folds(D, K, rng);
  const double lmax = cox_lambda_max(X, T, D);
  if (!(lmax > 0)) {
    CvResult res;
    res.lambda_min = res.lambda_1se = lmax;
    res.cv_curve.push_back({lmax, -0.5, 0.0});
    res.folds = std::move(folds);
    res.path.lambdas = {lmax};
    res.path.coefficients = Matrix::Zero(X.cols(), 1);
    res.path.std_coefficients = Matrix::Zero(X.cols(), 1);
    res.path.intercepts = {0.0};
    res.path.deviance_ratio = {0.0};
    return res;
  }
  auto lambdas = lambda_grid(lmax, n, X.cols(), options.grid_size);
  auto full = cox_lasso_path(X, T, D, lambdas, options.lasso);
  std::vector<LassoPath> fold_paths;
  std::vector<std::vector<Eigen::Index>> test_rows(static_cast<std::size_t>(K));
  Eigen::Index common = full.size();
  for (int f = 0; f < K; ++f) {
    std::vector<Eigen::Index> train;
    for (Eigen::Index i = 0; i < n; ++i)
      (folds[static_cast<std::size_t>(i)] == f ? test_rows[static_cast<std::size_t>(f)] : train).push_back(i);
    const IntVector Dtr = detail::take(D, train);
    bool test_has_event = false;
    for (auto i : test_rows[static_cast<std::size_t>(f)]) test_has_event |= D(i) == 1;
    if (Dtr.sum() == 0 || !test_has_event)
      fail(ErrorKind::FoldWithoutEvents, "fold " + std::to_string(f + 1) + " has no events");
    fold_paths.push_back(cox_lasso_path(detail::take_rows(X, train), detail::take(T, train), Dtr, lambdas, options.lasso));
    common = std::min(common, fold_paths.back().size());
  }
  Matrix losses(K, common);
  Vector weights(K);
  for (int f = 0; f < K; ++f) {
    const auto& rows = test_rows[static_cast<std::size_t>(f)];
    const Matrix Xte = detail::take_rows(X, rows);
    const Vector Tte = detail::take(T, rows);
    const IntVector Dte = detail::take(D, rows);
    const auto& path = fold_paths[static_cast<std::size_t>(f)];
    for (Eigen::Index k = 0; k < common; ++k) {
      const Vector eta = Xte * path.coefficients.col(k);
      double c;
      try {
        c = harrell_concordance(eta, Tte, Dte);
      } catch (const Error&) {
        fail(ErrorKind::FoldWithoutEvents, "fold " + std::to_string(f + 1) + " has no comparable pairs");
      }
      losses(f, k) = -c;
    }
    weights(f) = static_cast<double>(Dte.sum());
  }
  lambdas.resize(static_cast<std::size_t>(common));
  auto res = detail::summarize(lambdas, losses, weights);
  res.folds = std::move(folds);
  res.path = std::move(full);
  if (res.path.size() < static_cast<Eigen::Index>(lambdas.size())) {
    LassoOptions o = options.lasso;
    o.early_stop = false;
    res.path = cox_lasso_path(X, T, D, lambdas, o);
  }
  return res;
}

}  // namespace mhr
