#pragma once

// Covariate set -> propensity model -> weights -> weighted treatment-only Cox.

#include <optional>
#include <string>
#include <vector>

#include "mhr/selection.hpp"
#include "mhr/survival.hpp"
#include "mhr/weights.hpp"

namespace mhr {

/// Propensity fits inside the estimation pipeline follow the classical GLM
/// fitter so that (quasi-)separated designs still yield weights.
inline LogisticOptions pipeline_logistic_options() {
  LogisticOptions o;
  o.mode = LogisticMode::GlmCompatible;
  return o;
}

struct EstimateOutcome {
  std::optional<MhrEstimate> estimate;
  std::string failure;  // empty on success
  WeightSummary weights;

  bool ok() const { return estimate.has_value(); }
};

template <class F>
EstimateOutcome guarded(F&& body) {
  EstimateOutcome out;
  try {
    body(out);
  } catch (const Error& e) {
    out.estimate.reset();
    out.failure = e.what();
  }
  return out;
}

/// IPTW weights from a logistic propensity model on `set`, then the MHR.
inline EstimateOutcome estimate_iptw(const SurvivalDataset& data, const CovariateSet& set) {
  return guarded([&](EstimateOutcome& out) {
    const auto model = estimate_ps(data, set, pipeline_logistic_options());
    const auto w = iptw_weights(model.fitted_ps, data.Z);
    out.weights = weight_diagnostics(w, data.Z);
    out.estimate = estimate_mhr(data, w);
  });
}

/// Multiply robust weights over the propensity models of `sets`, then the MHR.
inline EstimateOutcome estimate_multiply_robust(const SurvivalDataset& data, const std::vector<CovariateSet>& sets) {
  return guarded([&](EstimateOutcome& out) {
    std::vector<PropensityModel> models;
    for (const auto& s : sets) models.push_back(estimate_ps(data, s, pipeline_logistic_options()));
    const auto mr = multiply_robust_weights(models, data.Z);
    out.weights = weight_diagnostics(mr.weights, data.Z);
    out.estimate = estimate_mhr(data, mr.weights);
  });
}

/// Default multiply robust model list: X^_Z, X^_Y, X^_DS, X^_I.
inline std::vector<CovariateSet> robust_model_sets(const SelectedSets& s) {
  return {s.xz_hat, s.xy_hat, s.ds_hat, s.i_hat};
}

struct SelectionRun {
  SelectedSets sets;
  ArmSelections arms;
};

/// Lasso selection of X^_Z then X^_Y (treated arm, then untreated arm) on one stream.
inline SelectionRun run_selection(const SurvivalDataset& data, RngStream& rng, const CvOptions& options = {}) {
  SelectionRun run;
  auto xz = select_xz(data, rng, options);
  run.arms = select_xy_arms(data, rng, options);
  run.sets = derive_sets(std::move(xz), run.arms.combined());
  return run;
}

}  // namespace mhr
