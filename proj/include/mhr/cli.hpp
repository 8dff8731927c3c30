#pragma once

// Subcommand implementations behind tools/mhr. Each returns a process exit
// code and writes human-readable tables to `out`, diagnostics to `err`.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "mhr/analysis.hpp"
#include "mhr/io.hpp"

namespace mhr::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitInterrupted = 130;

/// Set from the SIGINT handler; workers stop after their current replicate.
inline std::atomic<bool>& interrupt_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

/// --workers, else MHR_WORKERS, else the hardware thread count.
inline int resolve_workers(std::optional<int> flag) {
  if (flag) {
    if (*flag < 1) fail(ErrorKind::InvalidArgument, "--workers must be >= 1");
    return *flag;
  }
  if (const char* env = std::getenv("MHR_WORKERS")) {
    try {
      std::size_t used = 0;
      const int w = std::stoi(env, &used);
      if (used == std::string(env).size() && w >= 1) return w;
    } catch (const std::exception&) {
    }
    fail(ErrorKind::InvalidArgument, std::string("MHR_WORKERS must be a positive integer, got '") + env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

inline std::string fixed3(std::optional<double> v) { return v ? fixed3(*v) : "NA"; }

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Options shared by the config-driven subcommands.
struct RunOptions {
  std::string config_path;
  std::string out_dir = "mhr_out";
  std::optional<int> workers;
  std::optional<std::uint64_t> seed;  // replaces the run seed and every scenario seed
  std::optional<int> replicates;
  std::vector<std::string> scenarios;  // empty: all
  std::string cache_path;              // empty: <out_dir>/calibration_cache.json
};

/// Loads the config and applies command-line overrides and the scenario filter.
inline RunConfig prepare_config(const RunOptions& o) {
  auto run = load_config(o.config_path);
  if (o.seed) {
    run.seed = *o.seed;
    for (auto& s : run.scenarios) s.base_seed = *o.seed;
  }
  if (o.replicates) {
    if (*o.replicates < 1) fail(ErrorKind::ConfigParse, "--replicates must be >= 1");
    for (auto& s : run.scenarios) s.replicates = *o.replicates;
  }
  if (!o.scenarios.empty()) {
    std::vector<ScenarioConfig> kept;
    for (const auto& id : o.scenarios) {
      auto it = std::find_if(run.scenarios.begin(), run.scenarios.end(), [&](const auto& s) { return s.id == id; });
      if (it == run.scenarios.end()) fail(ErrorKind::ConfigParse, "scenario '" + id + "' is not defined in the config");
      kept.push_back(*it);
    }
    run.scenarios = std::move(kept);
  }
  return run;
}

inline fs::path cache_file(const RunOptions& o) {
  return o.cache_path.empty() ? fs::path(o.out_dir) / "calibration_cache.json" : fs::path(o.cache_path);
}

inline nlohmann::json calibration_json(const Calibration& c, bool cached) {
  return {{"alpha_z_star", c.alpha_z_star},
          {"theta", std::isfinite(c.theta) ? nlohmann::json(c.theta) : nlohmann::json(nullptr)},
          {"achieved_mhr", c.achieved_mhr},
          {"achieved_censoring", c.achieved_censoring},
          {"cached", cached}};
}

inline nlohmann::json manifest_base(const std::string& command, const std::string& id) {
  return {{"command", command},
          {"run_id", id},
          {"software_version", kSoftwareVersion},
          {"timestamp", utc_timestamp()}};
}

inline void write_manifest(const fs::path& dir, const nlohmann::json& manifest) {
  auto out = open_output(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
}

inline void print_summary_table(std::ostream& out, const ScenarioResult& r) {
  char line[160];
  std::snprintf(line, sizeof line, "%-14s %9s %9s %9s %9s %9s %6s\n", "estimator", "mean_mhr", "bias", "sd", "rmse",
                "coverage", "failed");
  out << line;
  for (const auto& e : r.estimators) {
    const auto& s = e.summary;
    auto field = [&](double EstimatorSummary::*m) { return fixed3(s ? std::optional((*s).*m) : std::nullopt); };
    std::snprintf(line, sizeof line, "%-14s %9s %9s %9s %9s %9s %6d\n", estimator_name(e.estimator).c_str(),
                  field(&EstimatorSummary::mean_mhr).c_str(), field(&EstimatorSummary::bias).c_str(),
                  field(&EstimatorSummary::sd).c_str(), field(&EstimatorSummary::rmse).c_str(),
                  field(&EstimatorSummary::coverage).c_str(), e.n_failed);
    out << line;
  }
}

inline void print_selection_table(std::ostream& out, const ScenarioResult& r) {
  char line[160];
  std::snprintf(line, sizeof line, "%-8s %8s %8s %8s %12s\n", "set", "avg_TP", "avg_F1", "max_F1", "cardinality");
  out << line;
  for (const auto& s : r.selection) {
    std::snprintf(line, sizeof line, "%-8s %8s %8s %8s %12s\n", s.set.c_str(), fixed3(s.avg_true_positive).c_str(),
                  fixed3(s.avg_f1).c_str(), fixed3(s.max_f1).c_str(), fixed3(s.avg_cardinality).c_str());
    out << line;
  }
}

namespace detail {

/// Shared driver of simulate and diagnostics: calibrate, run replicates,
/// aggregate. `per_scenario` writes command-specific outputs.
template <class PerScenario>
int run_scenarios(const std::string& command, const RunOptions& o, const RunConfig& run_config,
                  const std::function<void(ScenarioConfig&)>& adjust,
                  PerScenario&& per_scenario, std::ostream& out, std::ostream& err, nlohmann::json& manifest,
                  std::vector<ScenarioResult>& results) {
  const int workers = resolve_workers(o.workers);
  CalibrationCache cache(cache_file(o));
  manifest["workers"] = workers;
  manifest["scenarios"] = nlohmann::json::array();
  bool failed = false, interrupted = false;
  auto& stop = interrupt_flag();
  for (auto scenario : run_config.scenarios) {
    if (stop.load()) {
      interrupted = true;
      break;
    }
    adjust(scenario);
    nlohmann::json entry{{"id", scenario.id}, {"replicates_requested", scenario.replicates}, {"seed", scenario.base_seed}};
    const auto start = std::chrono::steady_clock::now();
    try {
      bool cached = false;
      const auto cal = calibrate_cached(scenario.params, scenario.base_seed, &cache, cached);
      cache.save();
      entry["calibration"] = calibration_json(cal, cached);
      scenario.params = apply(scenario.params, cal);
      out << "scenario " << scenario.id << ": n=" << scenario.params.n << " P=" << scenario.params.p
          << " k=" << fixed3(scenario.params.k) << " alpha_z*=" << fixed3(cal.alpha_z_star) << " ("
          << scenario.replicates << " replicates, " << workers << " workers)\n";
      const auto reps = run_replicates(scenario, workers, &stop);
      if (static_cast<int>(reps.size()) < scenario.replicates) interrupted = true;
      auto result = aggregate(reps, scenario.params.target_mhr, scenario.active_estimators(),
                              scenario.diagnostics_truth, scenario.id);
      entry["replicates_completed"] = reps.size();
      nlohmann::json failures = nlohmann::json::object();
      for (const auto& e : result.estimators) failures[estimator_name(e.estimator)] = e.n_failed;
      entry["estimator_failures"] = failures;
      entry["selection_failures"] = result.selection_failures;
      per_scenario(scenario, reps, result);
      results.push_back(std::move(result));
    } catch (const Error& e) {
      failed = true;
      entry["error"] = e.what();
      err << "error: scenario " << scenario.id << ": " << e.what() << '\n';
    }
    entry["runtime_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    manifest["scenarios"].push_back(entry);
    if (interrupted) break;
  }
  manifest["interrupted"] = interrupted;
  if (interrupted) err << command << ": interrupted; completed replicates were written\n";
  return interrupted ? kExitInterrupted : failed ? kExitFailure : kExitOk;
}

}  // namespace detail

/// simulate: results.csv, replicates.csv, selection_diagnostics.csv,
/// selected_sets.csv and manifest.json under the output directory.
inline int cmd_simulate(const RunOptions& o, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    const fs::path dir(o.out_dir);
    ensure_directory(dir);
    const auto run_config = prepare_config(o);
    const auto id = run_id(run_config);
    auto manifest = manifest_base("simulate", id);
    manifest["config"] = fs::absolute(o.config_path).string();
    manifest["config_hash"] = config_hash(run_config);
    manifest["seed"] = run_config.seed;

    auto replicates_csv = open_output(dir / "replicates.csv");
    auto sets_csv = open_output(dir / "selected_sets.csv");
    bool first = true;
    std::vector<ScenarioResult> results;
    const int code = detail::run_scenarios(
        "simulate", o, run_config, [](ScenarioConfig&) {},
        [&](const ScenarioConfig& s, const std::vector<ReplicateResult>& reps, const ScenarioResult& r) {
          write_replicates_csv(replicates_csv, id, s.id, reps, first);
          write_selected_sets_csv(sets_csv, id, s.id, reps, first);
          first = false;
          print_summary_table(out, r);
          if (!r.selection.empty()) print_selection_table(out, r);
          out << '\n';
        },
        out, err, manifest, results);
    if (first) {
      write_replicates_csv(replicates_csv, id, "", {}, true);
      write_selected_sets_csv(sets_csv, id, "", {}, true);
    }
    auto results_csv = open_output(dir / "results.csv");
    write_results_csv(results_csv, id, results);
    auto selection_csv = open_output(dir / "selection_diagnostics.csv");
    write_selection_csv(selection_csv, id, results);
    manifest["outputs"] = {"results.csv", "replicates.csv", "selection_diagnostics.csv", "selected_sets.csv"};
    write_manifest(dir, manifest);
    return code;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

/// diagnostics: plot data for treatment overlap (true propensity scores of
/// replicate 0) and the selection-quality table over all replicates.
inline int cmd_diagnostics(const RunOptions& o, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    const fs::path dir(o.out_dir);
    ensure_directory(dir);
    const auto run_config = prepare_config(o);
    const auto id = run_id(run_config);
    auto manifest = manifest_base("diagnostics", id);
    manifest["config"] = fs::absolute(o.config_path).string();
    manifest["config_hash"] = config_hash(run_config);
    manifest["seed"] = run_config.seed;

    auto overlap_csv = open_output(dir / "overlap.csv");
    overlap_csv << "run_id,scenario,subject,treatment,true_ps\n";
    auto sets_csv = open_output(dir / "selected_sets.csv");
    bool first = true;
    std::vector<ScenarioResult> results;
    const int code = detail::run_scenarios(
        "diagnostics", o, run_config,
        // One selection-based estimator is enough to trigger selection.
        [](ScenarioConfig& s) { s.estimators = {Estimator::XZhat}; },
        [&](const ScenarioConfig& s, const std::vector<ReplicateResult>& reps, const ScenarioResult& r) {
          auto rng = replicate_stream(s.base_seed, 0);
          const auto data = generate_dataset(s.params, rng);
          const Vector ps = true_propensity(data.X, s.params.k, s.params.beta_base);
          for (Eigen::Index i = 0; i < data.n(); ++i)
            overlap_csv << id << ',' << s.id << ',' << i + 1 << ',' << data.Z(i) << ',' << Fnv1a::exact(ps(i)) << '\n';
          write_selected_sets_csv(sets_csv, id, s.id, reps, first);
          first = false;
          print_selection_table(out, r);
          out << '\n';
        },
        out, err, manifest, results);
    if (first) write_selected_sets_csv(sets_csv, id, "", {}, true);
    auto selection_csv = open_output(dir / "selection_diagnostics.csv");
    write_selection_csv(selection_csv, id, results);
    manifest["outputs"] = {"overlap.csv", "selection_diagnostics.csv", "selected_sets.csv"};
    write_manifest(dir, manifest);
    return code;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

struct CalibrateOptions {
  RunOptions run;                        // used when run.config_path is set
  GeneratorParams params;                // otherwise calibrate these directly
  std::uint64_t seed = 20240501;
};

/// calibrate: calibration.json with alpha_z_star, theta and achieved values.
inline int cmd_calibrate(const CalibrateOptions& o, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    const fs::path dir(o.run.out_dir);
    ensure_directory(dir);
    std::vector<ScenarioConfig> scenarios;
    std::string id;
    auto manifest = manifest_base("calibrate", "");
    if (!o.run.config_path.empty()) {
      const auto run = prepare_config(o.run);
      scenarios = run.scenarios;
      id = run_id(run);
      manifest["config"] = fs::absolute(o.run.config_path).string();
      manifest["config_hash"] = config_hash(run);
      manifest["seed"] = run.seed;
    } else {
      o.params.validate();
      ScenarioConfig s;
      s.id = "custom";
      s.params = o.params;
      s.base_seed = o.run.seed.value_or(o.seed);
      scenarios.push_back(s);
      id = Fnv1a().add(calibration_key(s.params, s.base_seed)).add(std::string(kSoftwareVersion)).hex();
      manifest["seed"] = s.base_seed;
    }
    manifest["run_id"] = id;
    CalibrationCache cache(cache_file(o.run));
    nlohmann::json entries = nlohmann::json::array();
    char line[160];
    std::snprintf(line, sizeof line, "%-10s %12s %12s %12s %12s %7s\n", "scenario", "alpha_z*", "theta",
                  "achieved_mhr", "censoring", "cached");
    out << line;
    for (const auto& s : scenarios) {
      const auto start = std::chrono::steady_clock::now();
      bool cached = false;
      const auto c = calibrate_cached(s.params, s.base_seed, &cache, cached);
      cache.save();
      auto e = calibration_json(c, cached);
      e["scenario"] = s.id;
      e["run_id"] = id;
      e["params"] = {{"n", s.params.n}, {"p", s.params.p}, {"k", s.params.k}, {"target_mhr", s.params.target_mhr},
                     {"censoring_rate", s.params.censoring_rate}, {"eta", s.params.eta}, {"gamma", s.params.gamma}};
      e["seed"] = s.base_seed;
      e["runtime_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      entries.push_back(e);
      std::snprintf(line, sizeof line, "%-10s %12s %12s %12s %12s %7s\n", s.id.c_str(), fixed3(c.alpha_z_star).c_str(),
                    std::isfinite(c.theta) ? fixed3(c.theta).c_str() : "inf", fixed3(c.achieved_mhr).c_str(),
                    fixed3(c.achieved_censoring).c_str(), cached ? "yes" : "no");
      out << line;
    }
    auto file = open_output(dir / "calibration.json");
    file << entries.dump(2) << '\n';
    manifest["outputs"] = {"calibration.json"};
    write_manifest(dir, manifest);
    return kExitOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

struct AnalyzeOptions {
  std::string csv_path;
  CsvColumns columns;
  AnalysisOptions analysis;
  std::string out_dir;  // empty: print only
};

inline std::string join_names(const CovariateSet& set, const std::vector<std::string>& names) {
  std::string s;
  for (int k : set.indices()) s += (s.empty() ? "" : ", ") + names[static_cast<std::size_t>(k - 1)];
  return s.empty() ? "(none)" : s;
}

/// analyze: selected sets, then MHR with 95% CI for each adjustment strategy.
inline int cmd_analyze(const AnalyzeOptions& o, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    auto loaded = read_dataset_csv(o.csv_path, o.columns);
    const auto result = analyze_dataset({std::move(loaded.data), std::move(loaded.covariate_names)}, o.analysis);
    for (const auto& name : result.dropped) err << "warning: dropped constant covariate '" << name << "'\n";
    const auto& names = result.dataset.names;
    out << "n = " << result.dataset.data.n() << ", P = " << result.dataset.data.p();
    if (result.augmented > 0) out << " (" << result.augmented << " independent covariates added)";
    out << "\n\nSelected covariates\n";
    const std::pair<const char*, const CovariateSet*> sets[] = {{"Xhat_Z", &result.sets.xz_hat},
                                                                {"Xhat_Y", &result.sets.xy_hat},
                                                                {"Xhat_DS", &result.sets.ds_hat},
                                                                {"Xhat_I", &result.sets.i_hat}};
    for (const auto& [label, set] : sets)
      out << "  " << label << " (" << set->size() << "): " << join_names(*set, names) << '\n';

    char line[160];
    std::snprintf(line, sizeof line, "\n%-9s %14s %8s %8s\n", "set", "Estimated MHR", "CIL", "CIU");
    out << line;
    bool failed = false;
    for (const auto& row : result.rows) {
      if (row.outcome.ok()) {
        const auto& m = *row.outcome.estimate;
        std::snprintf(line, sizeof line, "%-9s %14s %8s %8s\n", row.set.c_str(), fixed3(m.mhr).c_str(),
                      fixed3(m.ci_lower).c_str(), fixed3(m.ci_upper).c_str());
      } else {
        failed = true;
        std::snprintf(line, sizeof line, "%-9s %14s %8s %8s\n", row.set.c_str(), "failed", "NA", "NA");
        err << "error: " << row.set << ": " << row.outcome.failure << '\n';
      }
      out << line;
    }

    if (!o.out_dir.empty()) {
      const fs::path dir(o.out_dir);
      ensure_directory(dir);
      std::ifstream raw(o.csv_path, std::ios::binary);
      std::ostringstream bytes;
      bytes << raw.rdbuf();
      const auto id = Fnv1a()
                          .add(bytes.str())
                          .add(o.columns.time)
                          .add(o.columns.event)
                          .add(o.columns.treatment)
                          .add(o.analysis.augment ? 1 : 0)
                          .add(o.analysis.seed)
                          .add(std::string(kSoftwareVersion))
                          .hex();
      auto csv = open_output(dir / "analysis.csv");
      csv << "run_id,set,mhr,alpha_z,robust_se,ci_lower,ci_upper,failure\n";
      for (const auto& row : result.rows) {
        csv << id << ',' << row.set << ',';
        if (row.outcome.ok()) {
          const auto& m = *row.outcome.estimate;
          csv << Fnv1a::exact(m.mhr) << ',' << Fnv1a::exact(m.alpha_z) << ',' << Fnv1a::exact(m.robust_se) << ','
              << Fnv1a::exact(m.ci_lower) << ',' << Fnv1a::exact(m.ci_upper) << ",\n";
        } else {
          csv << "NA,NA,NA,NA,NA," << csv_quote(row.outcome.failure) << '\n';
        }
      }
      auto sets_csv = open_output(dir / "selected_sets.csv");
      sets_csv << "run_id,set,covariates\n";
      for (const auto& [label, set] : sets) {
        std::string joined;
        for (int k : set->indices()) joined += (joined.empty() ? "" : ";") + names[static_cast<std::size_t>(k - 1)];
        sets_csv << id << ',' << label << ',' << csv_quote(joined) << '\n';
      }
      auto manifest = manifest_base("analyze", id);
      manifest["input"] = fs::absolute(o.csv_path).string();
      manifest["seed"] = o.analysis.seed;
      manifest["augmented_columns"] = result.augmented;
      manifest["dropped_columns"] = result.dropped;
      manifest["outputs"] = {"analysis.csv", "selected_sets.csv"};
      write_manifest(dir, manifest);
    }
    return failed ? kExitFailure : kExitOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace mhr::cli
