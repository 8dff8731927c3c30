#pragma once

// Lasso-based candidate adjustment sets and their selection diagnostics.

#include <utility>

#include "mhr/core.hpp"
#include "mhr/lasso.hpp"

namespace mhr {

struct SelectedSets {
  CovariateSet xz_hat;
  CovariateSet xy_hat;
  CovariateSet ds_hat;  // union
  CovariateSet i_hat;   // intersection
};

struct SelectionDiagnostics {
  double true_positive_count = 0.0;
  double f1 = 0.0;
  int cardinality = 0;
};

/// Covariates with nonzero coefficients in the cross-validated (lambda_1se)
/// logistic lasso of treatment on all covariates.
inline CovariateSet select_xz(const SurvivalDataset& data, RngStream& rng, const CvOptions& options = {}) {
  const auto cv = cross_validate_logistic(data.X, data.Z, rng, options);
  return cv.path.active(cv.index_1se());
}

struct ArmSelections {
  CovariateSet treated;    // outcome lasso among Z = 1
  CovariateSet untreated;  // outcome lasso among Z = 0
  CovariateSet combined() const { return set_union(treated, untreated); }
};

inline ArmSelections select_xy_arms(const SurvivalDataset& data, RngStream& rng, const CvOptions& options = {}) {
  auto arm = [&](int z) {
    const auto sub = data.subset([&](Eigen::Index i) { return data.Z(i) == z; });
    if (sub.n() < 20 || sub.event_count() < 1)
      fail(ErrorKind::ArmTooSmall, std::string(z ? "treated" : "untreated") +
                                       " arm needs at least 20 subjects and one event");
    const auto cv = cross_validate_cox(sub.X, sub.T, sub.D, rng, options);
    return cv.path.active(cv.index_1se());
  };
  ArmSelections out;
  out.treated = arm(1);
  out.untreated = arm(0);
  return out;
}

/// Union of the per-arm cross-validated Cox lasso selections.
inline CovariateSet select_xy(const SurvivalDataset& data, RngStream& rng, const CvOptions& options = {}) {
  return select_xy_arms(data, rng, options).combined();
}

inline SelectedSets derive_sets(CovariateSet xz_hat, CovariateSet xy_hat) {
  SelectedSets s;
  s.ds_hat = set_union(xz_hat, xy_hat);
  s.i_hat = set_intersection(xz_hat, xy_hat);
  s.xz_hat = std::move(xz_hat);
  s.xy_hat = std::move(xy_hat);
  return s;
}

inline SelectionDiagnostics diagnostics(const CovariateSet& set, const CovariateSet& true_confounders) {
  if (true_confounders.empty()) fail(ErrorKind::InvalidArgument, "true confounder set is empty");
  SelectionDiagnostics d;
  const auto tp = static_cast<double>(set_intersection(set, true_confounders).size());
  d.true_positive_count = tp;
  d.cardinality = static_cast<int>(set.size());
  if (!set.empty() && tp > 0) {
    const double precision = tp / static_cast<double>(set.size());
    const double recall = tp / static_cast<double>(true_confounders.size());
    d.f1 = 2.0 * precision * recall / (precision + recall);
  }
  return d;
}

}  // namespace mhr
