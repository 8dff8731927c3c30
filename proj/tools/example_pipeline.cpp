// Library walk-through: draw one dataset from the simulation design, select
// covariates with the lasso, and compare IPTW and multiply robust estimates.

#include <cstdio>

#include "mhr/pipeline.hpp"
#include "mhr/simulate.hpp"

int main() {
  using namespace mhr;
  GeneratorParams params;
  params.n = 500;
  params.p = 50;
  params.censoring_rate = 0.2;
  CalibrationOptions quick;
  quick.population = 50000;
  params = apply(params, calibrate(params, 1, quick));

  auto rng = replicate_stream(1, 0);
  const auto data = generate_dataset(params, rng);
  const auto selection = run_selection(data, rng);
  std::printf("Xhat_Z  = %s\nXhat_Y  = %s\n", selection.sets.xz_hat.to_string().c_str(),
              selection.sets.xy_hat.to_string().c_str());

  auto report = [](const char* label, const EstimateOutcome& e) {
    if (e.ok())
      std::printf("%-9s MHR %.3f  (%.3f, %.3f)\n", label, e.estimate->mhr, e.estimate->ci_lower, e.estimate->ci_upper);
    else
      std::printf("%-9s failed: %s\n", label, e.failure.c_str());
  };
  report("X_Z", estimate_iptw(data, oracle_xz()));
  report("Xhat_DS", estimate_iptw(data, selection.sets.ds_hat));
  report("Xhat_Rob", estimate_multiply_robust(data, robust_model_sets(selection.sets)));
  std::printf("target MHR %.1f\n", params.target_mhr);
}
