#pragma once

// Data-generating process, calibration of the conditional treatment effect and
// the censoring bound, replicate runner and metric aggregation.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mhr/core.hpp"
#include "mhr/pipeline.hpp"
#include "mhr/selection.hpp"
#include "mhr/survival.hpp"

namespace mhr {

inline std::vector<double> design_treatment_coefficients() { return {0.8, -0.25, 0.6, -0.4, -0.8, -0.5, 0.7, 0, 0, 0}; }
inline std::vector<double> design_outcome_coefficients() {
  return {0.3, -0.36, -0.73, -0.2, 0, 0, 0, 0.71, -0.19, 0.26};
}

struct GeneratorParams {
  int n = 1000;
  int p = 500;
  double k = 1.0;
  std::vector<double> beta_base = design_treatment_coefficients();
  std::vector<double> alpha = design_outcome_coefficients();
  double eta = 2.0;
  double gamma = 2e-5;
  double alpha_z_star = 0.0;
  double target_mhr = 2.0;
  double censoring_rate = 0.0;
  double theta = std::numeric_limits<double>::infinity();

  void validate() const {
    if (n < 2 || p < 1) fail(ErrorKind::InvalidArgument, "generator needs n >= 2 and P >= 1");
    if (!(eta > 0) || !(gamma > 0)) fail(ErrorKind::InvalidArgument, "eta and gamma must be positive");
    if (beta_base.size() > 10 || alpha.size() > 10)
      fail(ErrorKind::InvalidArgument, "treatment and outcome coefficients are zero beyond index 10");
    if (!(target_mhr > 0)) fail(ErrorKind::InvalidArgument, "target MHR must be positive");
    if (censoring_rate < 0 || censoring_rate >= 1)
      fail(ErrorKind::InvalidArgument, "censoring rate must lie in [0, 1)");
  }
};

/// Within each block of ten columns, offsets 2, 4, 7 and 10 (1-based) are
/// standard normal; the rest are Bernoulli(0.5).
inline bool is_normal_column(int one_based) {
  const int offset = (one_based - 1) % 10 + 1;
  return offset == 2 || offset == 4 || offset == 7 || offset == 10;
}

inline Matrix generate_covariates(int n, int p, RngStream& rng) {
  Matrix X(n, p);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j) X(i, j) = is_normal_column(j + 1) ? rng.normal() : rng.bernoulli(0.5);
  return X;
}

inline double linear_predictor(const Matrix& X, Eigen::Index i, const std::vector<double>& coef, double scale = 1.0) {
  double lp = 0.0;
  const auto m = std::min<Eigen::Index>(static_cast<Eigen::Index>(coef.size()), X.cols());
  for (Eigen::Index j = 0; j < m; ++j) lp += coef[static_cast<std::size_t>(j)] * X(i, j);
  return scale * lp;
}

/// expit(k * beta^T X_i), no intercept.
inline Vector true_propensity(const Matrix& X, double k, const std::vector<double>& beta_base) {
  Vector ps(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) ps(i) = expit(linear_predictor(X, i, beta_base, k));
  return ps;
}

inline IntVector generate_treatment(const Matrix& X, double k, const std::vector<double>& beta_base, RngStream& rng) {
  const Vector ps = true_propensity(X, k, beta_base);
  IntVector Z(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) Z(i) = rng.bernoulli(ps(i));
  return Z;
}

/// Inverse transform of a Weibull-hazard model h(t) = gamma * eta * t^(eta-1) * exp(lp).
inline double weibull_event_time(double u, double lp, double eta, double gamma) {
  return std::pow(-std::log(u) / (gamma * std::exp(lp)), 1.0 / eta);
}

inline Vector generate_event_times(const IntVector& Z, const Matrix& X, const GeneratorParams& params, RngStream& rng) {
  Vector Y(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double lp = params.alpha_z_star * Z(i) + linear_predictor(X, i, params.alpha);
    Y(i) = weibull_event_time(rng.uniform(), lp, params.eta, params.gamma);
  }
  return Y;
}

/// One simulated dataset: covariates, treatment, event times, then Uniform(0, theta) censoring.
inline SurvivalDataset generate_dataset(const GeneratorParams& params, RngStream& rng) {
  SurvivalDataset d;
  d.X = generate_covariates(params.n, params.p, rng);
  d.Z = generate_treatment(d.X, params.k, params.beta_base, rng);
  const Vector Y = generate_event_times(d.Z, d.X, params, rng);
  d.T = Y;
  d.D = IntVector::Ones(params.n);
  if (std::isfinite(params.theta)) {
    for (Eigen::Index i = 0; i < Y.size(); ++i) {
      const double c = params.theta * rng.uniform();
      if (c < Y(i)) {
        d.T(i) = c;
        d.D(i) = 0;
      }
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

struct CalibrationOptions {
  int population = 200000;
  double mhr_tolerance = 0.0005;
  double rate_tolerance = 0.005;
  int max_iterations = 60;
  double bracket_low = -5.0;
  double bracket_high = 5.0;
};

/// Potential-outcome calibration population: every subject contributes an
/// untreated and a treated record sharing covariates and the uniform draw, so
/// treatment is exactly balanced and independent of X.
class MarginalHazardRatio {
 public:
  MarginalHazardRatio(const GeneratorParams& params, RngStream& rng, int population)
      : params_(params), lp_(population / 2), log_u_(population / 2) {
    const int half = population / 2;
    const Matrix X = generate_covariates(half, std::min(params.p, 10), rng);
    for (int i = 0; i < half; ++i) {
      lp_(i) = linear_predictor(X, i, params.alpha);
      log_u_(i) = -std::log(rng.uniform());
    }
    design_.resize(2 * half, 1);
    design_.col(0).head(half).setZero();
    design_.col(0).tail(half).setOnes();
    D_ = IntVector::Ones(2 * half);
    w_ = Vector::Ones(2 * half);
    T_.resize(2 * half);
  }

  /// exp of the treatment-only Cox coefficient when the conditional effect is `a`.
  double operator()(double a) {
    const auto half = lp_.size();
    for (Eigen::Index i = 0; i < half; ++i) {
      T_(i) = std::pow(log_u_(i) / (params_.gamma * std::exp(lp_(i))), 1.0 / params_.eta);
      T_(half + i) = std::pow(log_u_(i) / (params_.gamma * std::exp(lp_(i) + a)), 1.0 / params_.eta);
    }
    const auto fit = fit_cox_design(design_, T_, D_, w_);
    return std::exp(fit.coefficients(0));
  }

 private:
  GeneratorParams params_;
  Vector lp_, log_u_;
  Matrix design_;
  Vector T_, w_;
  IntVector D_;
};

/// Bisection for the conditional log hazard ratio whose marginal hazard ratio
/// equals `target_mhr`.
inline double calibrate_alpha_z(double target_mhr, const GeneratorParams& params, RngStream& rng,
                                const CalibrationOptions& options = {}) {
  if (!(target_mhr > 0)) fail(ErrorKind::InvalidArgument, "target MHR must be positive");
  MarginalHazardRatio mhr_of(params, rng, options.population);
  double lo = options.bracket_low, hi = options.bracket_high;
  const double f_lo = mhr_of(lo) - target_mhr, f_hi = mhr_of(hi) - target_mhr;
  if (f_lo > 0 || f_hi < 0) fail(ErrorKind::BracketFailure, "bracket does not straddle the target MHR");
  double mid = 0.5 * (lo + hi);
  for (int iter = 0; iter < options.max_iterations; ++iter) {
    mid = 0.5 * (lo + hi);
    const double f = mhr_of(mid) - target_mhr;
    if (std::abs(f) <= options.mhr_tolerance) break;
    (f < 0 ? lo : hi) = mid;
  }
  return mid;
}

/// Event times of a calibration population drawn from the full generator.
inline Vector calibration_event_times(const GeneratorParams& params, RngStream& rng, int population) {
  const Matrix X = generate_covariates(population, std::min(params.p, 10), rng);
  const IntVector Z = generate_treatment(X, params.k, params.beta_base, rng);
  return generate_event_times(Z, X, params, rng);
}

/// Expected share censored under Uniform(0, theta): mean of min(Y_i / theta, 1).
inline double censoring_probability(const Vector& Y, double theta) {
  if (!std::isfinite(theta)) return 0.0;
  return (Y.array() / theta).min(1.0).mean();
}

/// Root of theta -> Pr(C < Y) by bisection on log(theta); infinity when no censoring is wanted.
inline double calibrate_theta(double target_rate, const GeneratorParams& params, RngStream& rng,
                              const CalibrationOptions& options = {}) {
  if (target_rate < 0 || target_rate >= 1)
    fail(ErrorKind::RateUnreachable, "censoring rate must lie in [0, 1)");
  if (target_rate == 0) return std::numeric_limits<double>::infinity();
  const Vector Y = calibration_event_times(params, rng, options.population);
  double lo = std::log(Y.minCoeff()) - 20.0, hi = std::log(Y.maxCoeff()) + 20.0;
  if (!(censoring_probability(Y, std::exp(lo)) > target_rate && censoring_probability(Y, std::exp(hi)) < target_rate))
    fail(ErrorKind::RateUnreachable, "censoring rate cannot be reached");
  double mid = 0.5 * (lo + hi);
  double rate = 1.0;
  for (int iter = 0; iter < 200 && hi - lo > 1e-12; ++iter) {
    mid = 0.5 * (lo + hi);
    rate = censoring_probability(Y, std::exp(mid));
    (rate > target_rate ? lo : hi) = mid;
  }
  if (std::abs(rate - target_rate) > options.rate_tolerance)
    fail(ErrorKind::RateUnreachable, "censoring rate cannot be matched within tolerance");
  return std::exp(mid);
}

// ---------------------------------------------------------------------------
// Scenarios and replicates
// ---------------------------------------------------------------------------

enum class Estimator { XZ, XY, XZcapXY, XZcupXY, Xall, XZhat, XYhat, XDShat, XRobhat };

inline constexpr std::array<Estimator, 9> kAllEstimators = {
    Estimator::XZ,    Estimator::XY,    Estimator::XZcapXY, Estimator::XZcupXY, Estimator::Xall,
    Estimator::XZhat, Estimator::XYhat, Estimator::XDShat,  Estimator::XRobhat};

inline std::string estimator_name(Estimator e) {
  switch (e) {
    case Estimator::XZ: return "X_Z";
    case Estimator::XY: return "X_Y";
    case Estimator::XZcapXY: return "X_Z_cap_X_Y";
    case Estimator::XZcupXY: return "X_Z_cup_X_Y";
    case Estimator::Xall: return "X_all";
    case Estimator::XZhat: return "Xhat_Z";
    case Estimator::XYhat: return "Xhat_Y";
    case Estimator::XDShat: return "Xhat_DS";
    case Estimator::XRobhat: return "Xhat_Rob";
  }
  return "?";
}

inline Estimator parse_estimator(const std::string& name) {
  for (auto e : kAllEstimators)
    if (estimator_name(e) == name) return e;
  fail(ErrorKind::ConfigParse, "unknown estimator '" + name + "'");
}

inline bool needs_selection(Estimator e) {
  return e == Estimator::XZhat || e == Estimator::XYhat || e == Estimator::XDShat || e == Estimator::XRobhat;
}

/// Oracle adjustment sets of the generator.
inline CovariateSet oracle_xz() { return CovariateSet::range(7); }
inline CovariateSet oracle_xy() { return {1, 2, 3, 4, 8, 9, 10}; }
inline CovariateSet true_confounders() { return {1, 2, 3, 4}; }

struct ScenarioConfig {
  std::string id = "1";
  GeneratorParams params;
  int replicates = 1000;
  std::vector<Estimator> estimators{kAllEstimators.begin(), kAllEstimators.end()};
  std::uint64_t base_seed = 20240501;
  CovariateSet diagnostics_truth = true_confounders();
  CvOptions cv{};

  /// X_all needs more subjects than covariates.
  bool estimator_enabled(Estimator e) const { return e != Estimator::Xall || params.n > params.p; }

  std::vector<Estimator> active_estimators() const {
    std::vector<Estimator> out;
    for (auto e : estimators)
      if (estimator_enabled(e)) out.push_back(e);
    return out;
  }

  void validate() const {
    params.validate();
    if (replicates < 1) fail(ErrorKind::ConfigParse, "replicates must be >= 1");
    if (estimators.empty()) fail(ErrorKind::ConfigParse, "estimator list is empty");
  }
};

/// Scenario rows of the simulation design (n, P, k, MHR, censoring rate).
inline std::vector<ScenarioConfig> standard_scenarios(int replicates = 1000, std::uint64_t seed = 20240501) {
  struct Row {
    int n, p;
    double k, mhr, censoring;
  };
  const Row rows[] = {{1000, 500, 1, 2, 0},  {1000, 1000, 1, 2, 0}, {1000, 1500, 1, 2, 0},
                      {1000, 1000, 1, 0.5, 0}, {1000, 1000, 1, 2, 0.2}, {1000, 1000, 3, 2, 0},
                      {500, 250, 1, 2, 0},     {500, 500, 1, 2, 0},   {500, 750, 1, 2, 0},
                      {500, 500, 1, 0.5, 0},   {500, 500, 1, 2, 0.2}, {500, 500, 3, 2, 0}};
  std::vector<ScenarioConfig> out;
  int id = 1;
  for (const auto& r : rows) {
    ScenarioConfig c;
    c.id = std::to_string(id++);
    c.params.n = r.n;
    c.params.p = r.p;
    c.params.k = r.k;
    c.params.target_mhr = r.mhr;
    c.params.censoring_rate = r.censoring;
    c.replicates = replicates;
    c.base_seed = seed;
    out.push_back(c);
  }
  return out;
}

inline constexpr std::uint64_t kAlphaCalibrationStream = 0xA1FA000000000000ull;
inline constexpr std::uint64_t kThetaCalibrationStream = 0x7E7A000000000000ull;
inline constexpr std::uint64_t kValidationStream = 0x7A11D00000000000ull;

/// Stream for replicate r (0-based); disjoint from the calibration streams.
inline RngStream replicate_stream(std::uint64_t base_seed, int replicate) {
  return spawn_stream(base_seed, static_cast<std::uint64_t>(replicate) + 1);
}

struct Calibration {
  double alpha_z_star = 0.0;
  double theta = std::numeric_limits<double>::infinity();
  double achieved_mhr = 1.0;            // on the calibration population
  double achieved_censoring = 0.0;      // on the calibration population
};

/// Calibrates alpha_z* then theta for `params` on fixed calibration streams.
inline Calibration calibrate(const GeneratorParams& params, std::uint64_t seed, const CalibrationOptions& options = {}) {
  Calibration c;
  {
    auto rng = spawn_stream(seed, kAlphaCalibrationStream);
    c.alpha_z_star = calibrate_alpha_z(params.target_mhr, params, rng, options);
    auto again = spawn_stream(seed, kAlphaCalibrationStream);
    MarginalHazardRatio mhr_of(params, again, options.population);
    c.achieved_mhr = mhr_of(c.alpha_z_star);
  }
  GeneratorParams with_effect = params;
  with_effect.alpha_z_star = c.alpha_z_star;
  auto rng = spawn_stream(seed, kThetaCalibrationStream);
  c.theta = calibrate_theta(params.censoring_rate, with_effect, rng, options);
  auto again = spawn_stream(seed, kThetaCalibrationStream);
  c.achieved_censoring = censoring_probability(calibration_event_times(with_effect, again, options.population), c.theta);
  return c;
}

inline GeneratorParams apply(GeneratorParams params, const Calibration& c) {
  params.alpha_z_star = c.alpha_z_star;
  params.theta = c.theta;
  return params;
}

struct EstimatorOutcome {
  Estimator estimator;
  EstimateOutcome outcome;
  bool covers = false;
};

struct ReplicateResult {
  int replicate = 0;
  std::vector<EstimatorOutcome> estimates;
  std::optional<SelectedSets> sets;
  std::string selection_failure;
  double censored_share = 0.0;

  const EstimatorOutcome* find(Estimator e) const {
    for (const auto& x : estimates)
      if (x.estimator == e) return &x;
    return nullptr;
  }
};

/// Generates replicate `replicate` of a calibrated scenario and evaluates every
/// active estimator on it. Estimator failures are recorded, never dropped.
inline ReplicateResult run_replicate(const ScenarioConfig& config, int replicate) {
  auto rng = replicate_stream(config.base_seed, replicate);
  const auto data = generate_dataset(config.params, rng);
  ReplicateResult res;
  res.replicate = replicate;
  res.censored_share = 1.0 - static_cast<double>(data.event_count()) / static_cast<double>(data.n());
  const auto active = config.active_estimators();
  const bool select = std::any_of(active.begin(), active.end(), needs_selection);
  if (select) {
    try {
      res.sets = run_selection(data, rng, config.cv).sets;
    } catch (const Error& e) {
      res.selection_failure = e.what();
    }
  }
  const double truth = config.params.target_mhr;
  for (auto e : active) {
    EstimatorOutcome eo{e, {}, false};
    auto iptw = [&](const CovariateSet& s) { return estimate_iptw(data, s); };
    if (needs_selection(e) && !res.sets) {
      eo.outcome.failure = "selection failed: " + res.selection_failure;
    } else {
      switch (e) {
        case Estimator::XZ: eo.outcome = iptw(oracle_xz()); break;
        case Estimator::XY: eo.outcome = iptw(oracle_xy()); break;
        case Estimator::XZcapXY: eo.outcome = iptw(set_intersection(oracle_xz(), oracle_xy())); break;
        case Estimator::XZcupXY: eo.outcome = iptw(set_union(oracle_xz(), oracle_xy())); break;
        case Estimator::Xall: eo.outcome = iptw(CovariateSet::range(config.params.p)); break;
        case Estimator::XZhat: eo.outcome = iptw(res.sets->xz_hat); break;
        case Estimator::XYhat: eo.outcome = iptw(res.sets->xy_hat); break;
        case Estimator::XDShat: eo.outcome = iptw(res.sets->ds_hat); break;
        case Estimator::XRobhat: eo.outcome = estimate_multiply_robust(data, robust_model_sets(*res.sets)); break;
      }
    }
    eo.covers = eo.outcome.ok() && eo.outcome.estimate->covers(truth);
    res.estimates.push_back(std::move(eo));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

struct EstimatorSummary {
  double mean_mhr = 0.0;
  double bias = 0.0;
  double rel_bias = 0.0;
  double sd = 0.0;
  double rmse = 0.0;
  double coverage = 0.0;
  int n_ok = 0;
};

/// Metrics over the successful replicates of one estimator. SD uses divisor R - 1.
inline EstimatorSummary summarize_estimates(const std::vector<double>& mhr, const std::vector<bool>& covers,
                                            double true_mhr) {
  const auto R = mhr.size();
  if (R < 2) fail(ErrorKind::TooFewReplicates, "need at least two successful replicates");
  EstimatorSummary s;
  s.n_ok = static_cast<int>(R);
  double sum = 0.0;
  for (double v : mhr) sum += v;
  s.mean_mhr = sum / static_cast<double>(R);
  double ss = 0.0;
  for (double v : mhr) ss += (v - s.mean_mhr) * (v - s.mean_mhr);
  s.sd = std::sqrt(ss / static_cast<double>(R - 1));
  s.bias = s.mean_mhr - true_mhr;
  s.rel_bias = s.bias / true_mhr;
  s.rmse = std::sqrt(s.bias * s.bias + s.sd * s.sd);
  s.coverage = static_cast<double>(std::count(covers.begin(), covers.end(), true)) / static_cast<double>(R);
  return s;
}

struct EstimatorResult {
  Estimator estimator;
  std::optional<EstimatorSummary> summary;  // empty with fewer than two successes
  int n_failed = 0;
  std::vector<double> raw_mhr;  // successful replicates, replicate order
};

struct SetDiagnosticsSummary {
  std::string set;
  double avg_true_positive = 0.0;
  double avg_f1 = 0.0;
  double max_f1 = 0.0;
  double avg_cardinality = 0.0;
  int replicates = 0;
};

struct ScenarioResult {
  std::string scenario;
  double true_mhr = 0.0;
  std::vector<EstimatorResult> estimators;
  std::vector<SetDiagnosticsSummary> selection;
  int selection_failures = 0;

  const EstimatorResult* find(Estimator e) const {
    for (const auto& x : estimators)
      if (x.estimator == e) return &x;
    return nullptr;
  }
  const SetDiagnosticsSummary* find_set(const std::string& name) const {
    for (const auto& x : selection)
      if (x.set == name) return &x;
    return nullptr;
  }
};

inline ScenarioResult aggregate(const std::vector<ReplicateResult>& results, double true_mhr,
                                const std::vector<Estimator>& estimators, const CovariateSet& truth,
                                const std::string& scenario = "") {
  ScenarioResult out;
  out.scenario = scenario;
  out.true_mhr = true_mhr;
  for (auto e : estimators) {
    EstimatorResult er{e, std::nullopt, 0, {}};
    std::vector<bool> covers;
    for (const auto& r : results) {
      const auto* x = r.find(e);
      if (!x) continue;
      if (x->outcome.ok()) {
        er.raw_mhr.push_back(x->outcome.estimate->mhr);
        covers.push_back(x->covers);
      } else {
        ++er.n_failed;
      }
    }
    if (er.raw_mhr.size() >= 2) er.summary = summarize_estimates(er.raw_mhr, covers, true_mhr);
    out.estimators.push_back(std::move(er));
  }
  const std::pair<const char*, CovariateSet SelectedSets::*> sets[] = {
      {"Xhat_Z", &SelectedSets::xz_hat}, {"Xhat_Y", &SelectedSets::xy_hat},
      {"Xhat_DS", &SelectedSets::ds_hat}, {"Xhat_I", &SelectedSets::i_hat}};
  bool any = false;
  for (const auto& r : results) {
    if (r.sets) any = true;
    else if (!r.selection_failure.empty()) ++out.selection_failures;
  }
  if (any) {
    for (const auto& [name, member] : sets) {
      SetDiagnosticsSummary s;
      s.set = name;
      for (const auto& r : results) {
        if (!r.sets) continue;
        const auto d = diagnostics((*r.sets).*member, truth);
        s.avg_true_positive += d.true_positive_count;
        s.avg_f1 += d.f1;
        s.max_f1 = std::max(s.max_f1, d.f1);
        s.avg_cardinality += d.cardinality;
        ++s.replicates;
      }
      s.avg_true_positive /= s.replicates;
      s.avg_f1 /= s.replicates;
      s.avg_cardinality /= s.replicates;
      out.selection.push_back(s);
    }
  }
  return out;
}

/// Runs replicates [0, R) on `workers` threads. Results are indexed by
/// replicate, so the output does not depend on scheduling. When `stop` is set,
/// workers finish their current replicate and only completed ones are returned.
inline std::vector<ReplicateResult> run_replicates(const ScenarioConfig& config, int workers,
                                                   const std::atomic<bool>* stop = nullptr,
                                                   const std::function<void(int)>& on_done = {}) {
  const int R = config.replicates;
  std::vector<std::optional<ReplicateResult>> slots(static_cast<std::size_t>(R));
  std::atomic<int> next{0};
  std::mutex done_mutex;
  auto work = [&] {
    for (;;) {
      if (stop && stop->load()) return;
      const int r = next.fetch_add(1);
      if (r >= R) return;
      slots[static_cast<std::size_t>(r)] = run_replicate(config, r);
      if (on_done) {
        std::lock_guard lock(done_mutex);
        on_done(r);
      }
    }
  };
  workers = std::max(1, std::min(workers, R));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  std::vector<ReplicateResult> out;
  for (auto& s : slots)
    if (s) out.push_back(std::move(*s));
  return out;
}

}  // namespace mhr
