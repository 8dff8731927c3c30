#include <csignal>
#include <cstdint>
#include <iostream>

#include "CLI11.hpp"
#include "mhr/cli.hpp"

namespace {

extern "C" void on_interrupt(int) { mhr::cli::interrupt_flag().store(true); }

void add_run_flags(CLI::App* cmd, mhr::cli::RunOptions& o, bool config_required) {
  auto* config = cmd->add_option("--config", o.config_path, "Scenario configuration file")->check(CLI::ExistingFile);
  if (config_required) config->required();
  cmd->add_option("--out", o.out_dir, "Output directory")->capture_default_str();
  cmd->add_option("--seed", o.seed, "Replace the run seed and every scenario seed");
  cmd->add_option("--workers", o.workers, "Worker threads (default: MHR_WORKERS, else all cores)");
  cmd->add_option("--replicates", o.replicates, "Override the replicate count of every scenario");
  cmd->add_option("--scenario", o.scenarios, "Run only these scenario ids (repeatable)");
  cmd->add_option("--cache", o.cache_path, "Calibration cache file (default: <out>/calibration_cache.json)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Marginal hazard ratio estimation with lasso-selected propensity models"};
  app.set_version_flag("--version", mhr::kSoftwareVersion);
  app.require_subcommand(1);

  mhr::cli::RunOptions simulate;
  add_run_flags(app.add_subcommand("simulate", "Run Monte Carlo scenarios"), simulate, true);

  mhr::cli::RunOptions diagnostics;
  add_run_flags(app.add_subcommand("diagnostics", "Emit overlap plot data and selection diagnostics"), diagnostics,
                true);

  mhr::cli::CalibrateOptions calibrate;
  auto* cal = app.add_subcommand("calibrate", "Calibrate the treatment effect and censoring parameters");
  add_run_flags(cal, calibrate.run, false);
  cal->add_option("--n", calibrate.params.n, "Sample size (without --config)");
  cal->add_option("--p", calibrate.params.p, "Number of covariates (without --config)");
  cal->add_option("--k", calibrate.params.k, "Overlap multiplier (without --config)");
  cal->add_option("--target-mhr", calibrate.params.target_mhr, "Target marginal hazard ratio (without --config)");
  cal->add_option("--censoring-rate", calibrate.params.censoring_rate, "Target censoring rate (without --config)");

  mhr::cli::AnalyzeOptions analyze;
  auto* an = app.add_subcommand("analyze", "Select covariates and estimate the MHR on a CSV dataset");
  an->add_option("--data", analyze.csv_path, "Input CSV")->required()->check(CLI::ExistingFile);
  an->add_option("--time-col", analyze.columns.time, "Follow-up time column")->capture_default_str();
  an->add_option("--event-col", analyze.columns.event, "Event indicator column")->capture_default_str();
  an->add_option("--treatment-col", analyze.columns.treatment, "Treatment indicator column")->capture_default_str();
  an->add_flag("--augment", analyze.analysis.augment, "Add independent noise covariates until n = P");
  an->add_option("--seed", analyze.analysis.seed, "Seed for CV folds and augmentation")->capture_default_str();
  an->add_option("--out", analyze.out_dir, "Also write full-precision CSVs here");

  CLI11_PARSE(app, argc, argv);
  std::signal(SIGINT, on_interrupt);

  if (app.got_subcommand("simulate")) return mhr::cli::cmd_simulate(simulate);
  if (app.got_subcommand("diagnostics")) return mhr::cli::cmd_diagnostics(diagnostics);
  if (app.got_subcommand("calibrate")) return mhr::cli::cmd_calibrate(calibrate);
  return mhr::cli::cmd_analyze(analyze);
}
