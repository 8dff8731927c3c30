#pragma once

// Dataset CSV input, result CSV output, run manifests and the calibration cache.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mhr/config.hpp"
#include "mhr/simulate.hpp"

namespace mhr {

inline constexpr const char* kSoftwareVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Dataset CSV
// ---------------------------------------------------------------------------

struct CsvColumns {
  std::string time = "time";
  std::string event = "event";
  std::string treatment = "treatment";
};

struct LoadedDataset {
  SurvivalDataset data;
  std::vector<std::string> covariate_names;  // column j of X
};

namespace detail {

/// Splits one CSV record; double quotes may enclose fields and "" escapes a quote.
inline std::vector<std::string> csv_fields(const std::string& line, int row) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false, was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"' && cur.empty() && !was_quoted) {
      quoted = was_quoted = true;
    } else if (c == ',') {
      out.push_back(was_quoted ? cur : trim(cur));
      cur.clear();
      was_quoted = false;
    } else {
      cur += c;
    }
  }
  if (quoted) fail(ErrorKind::CsvSchema, "unterminated quote on line " + std::to_string(row));
  out.push_back(was_quoted ? cur : trim(cur));
  return out;
}

inline bool is_missing(const std::string& v) {
  return v.empty() || v == "NA" || v == "NaN" || v == "nan" || v == "N/A" || v == ".";
}

inline double csv_number(const std::string& v, int row, const std::string& column) {
  if (is_missing(v))
    fail(ErrorKind::MissingValue, "missing value at row " + std::to_string(row) + ", column '" + column + "'");
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size())
    fail(ErrorKind::CsvSchema, "non-numeric value '" + v + "' at row " + std::to_string(row) + ", column '" + column + "'");
  if (!std::isfinite(x))
    fail(ErrorKind::NonFiniteValue, "non-finite value at row " + std::to_string(row) + ", column '" + column + "'");
  return x;
}

inline int csv_binary(const std::string& v, int row, const std::string& column) {
  const double x = csv_number(v, row, column);
  if (x != 0.0 && x != 1.0)
    fail(ErrorKind::CsvSchema, "column '" + column + "' must be 0 or 1 (row " + std::to_string(row) + ")");
  return static_cast<int>(x);
}

}  // namespace detail

/// Rows are data lines counted from 1 after the header.
inline LoadedDataset parse_dataset_csv(std::istream& in, const CsvColumns& columns = {}) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::CsvSchema, "empty CSV: header row required");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = detail::csv_fields(line, 0);
  int time_col = -1, event_col = -1, treat_col = -1;
  std::vector<int> covariate_cols;
  LoadedDataset out;
  std::map<std::string, int> seen;
  for (int c = 0; c < static_cast<int>(header.size()); ++c) {
    const auto& name = header[static_cast<std::size_t>(c)];
    if (name.empty()) fail(ErrorKind::CsvSchema, "empty column name at position " + std::to_string(c + 1));
    if (!seen.emplace(name, c).second) fail(ErrorKind::CsvSchema, "duplicate column '" + name + "'");
    if (name == columns.time) time_col = c;
    else if (name == columns.event) event_col = c;
    else if (name == columns.treatment) treat_col = c;
    else {
      covariate_cols.push_back(c);
      out.covariate_names.push_back(name);
    }
  }
  for (const auto& [col, name] : {std::pair{time_col, columns.time}, std::pair{event_col, columns.event},
                                  std::pair{treat_col, columns.treatment}})
    if (col < 0) fail(ErrorKind::CsvSchema, "required column '" + name + "' not found");

  std::vector<std::vector<double>> x;
  std::vector<double> t;
  std::vector<int> d, z;
  int row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto f = detail::csv_fields(line, row);
    if (f.size() != header.size())
      fail(ErrorKind::CsvSchema, "row " + std::to_string(row) + " has " + std::to_string(f.size()) +
                                     " fields, header has " + std::to_string(header.size()));
    t.push_back(detail::csv_number(f[static_cast<std::size_t>(time_col)], row, columns.time));
    d.push_back(detail::csv_binary(f[static_cast<std::size_t>(event_col)], row, columns.event));
    z.push_back(detail::csv_binary(f[static_cast<std::size_t>(treat_col)], row, columns.treatment));
    std::vector<double> xr;
    for (std::size_t k = 0; k < covariate_cols.size(); ++k)
      xr.push_back(detail::csv_number(f[static_cast<std::size_t>(covariate_cols[k])], row, out.covariate_names[k]));
    x.push_back(std::move(xr));
  }
  const auto n = static_cast<Eigen::Index>(t.size());
  const auto p = static_cast<Eigen::Index>(covariate_cols.size());
  auto& ds = out.data;
  ds.X.resize(n, p);
  ds.Z.resize(n);
  ds.T.resize(n);
  ds.D.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < p; ++j) ds.X(i, j) = x[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    ds.T(i) = t[static_cast<std::size_t>(i)];
    ds.D(i) = d[static_cast<std::size_t>(i)];
    ds.Z(i) = z[static_cast<std::size_t>(i)];
  }
  validate_dataset(ds);
  return out;
}

inline LoadedDataset read_dataset_csv(const std::string& path, const CsvColumns& columns = {}) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::CsvSchema, "cannot open " + path);
  return parse_dataset_csv(in, columns);
}

inline void write_dataset_csv(std::ostream& out, const SurvivalDataset& d, const std::vector<std::string>& names = {}) {
  out << "time,event,treatment";
  for (Eigen::Index j = 0; j < d.p(); ++j)
    out << ',' << (names.empty() ? "X" + std::to_string(j + 1) : names[static_cast<std::size_t>(j)]);
  out << '\n';
  for (Eigen::Index i = 0; i < d.n(); ++i) {
    out << Fnv1a::exact(d.T(i)) << ',' << d.D(i) << ',' << d.Z(i);
    for (Eigen::Index j = 0; j < d.p(); ++j) out << ',' << Fnv1a::exact(d.X(i, j));
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Result CSVs
// ---------------------------------------------------------------------------

/// Full-precision cell; "NA" for absent values.
inline std::string cell(std::optional<double> v) { return v ? Fnv1a::exact(*v) : "NA"; }

/// Ties every output file to its manifest: depends only on config, seed and version.
inline std::string run_id(const RunConfig& config) {
  return Fnv1a().add(config_hash(config)).add(config.seed).add(std::string(kSoftwareVersion)).hex();
}

inline void write_results_csv(std::ostream& out, const std::string& id, const std::vector<ScenarioResult>& results) {
  out << "run_id,scenario,estimator,mean_mhr,bias,rel_bias,sd,rmse,coverage,n_ok,n_failed\n";
  for (const auto& r : results)
    for (const auto& e : r.estimators) {
      const auto& s = e.summary;
      out << id << ',' << r.scenario << ',' << estimator_name(e.estimator) << ','
          << cell(s ? std::optional(s->mean_mhr) : std::nullopt) << ','
          << cell(s ? std::optional(s->bias) : std::nullopt) << ','
          << cell(s ? std::optional(s->rel_bias) : std::nullopt) << ','
          << cell(s ? std::optional(s->sd) : std::nullopt) << ','
          << cell(s ? std::optional(s->rmse) : std::nullopt) << ','
          << cell(s ? std::optional(s->coverage) : std::nullopt) << ',' << e.raw_mhr.size() << ','
          << e.n_failed << '\n';
    }
}

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + '"';
}

inline void write_replicates_csv(std::ostream& out, const std::string& id, const std::string& scenario,
                                 const std::vector<ReplicateResult>& reps, bool header = true) {
  if (header) out << "run_id,scenario,replicate,estimator,mhr,alpha_z,robust_se,ci_lower,ci_upper,covers,failure\n";
  for (const auto& r : reps)
    for (const auto& e : r.estimates) {
      out << id << ',' << scenario << ',' << r.replicate << ',' << estimator_name(e.estimator) << ',';
      if (e.outcome.ok()) {
        const auto& m = *e.outcome.estimate;
        out << Fnv1a::exact(m.mhr) << ',' << Fnv1a::exact(m.alpha_z) << ',' << Fnv1a::exact(m.robust_se) << ','
            << Fnv1a::exact(m.ci_lower) << ',' << Fnv1a::exact(m.ci_upper) << ',' << (e.covers ? 1 : 0) << ",\n";
      } else {
        out << "NA,NA,NA,NA,NA,NA," << csv_quote(e.outcome.failure) << '\n';
      }
    }
}

inline void write_selection_csv(std::ostream& out, const std::string& id, const std::vector<ScenarioResult>& results) {
  out << "run_id,scenario,set,avg_true_positive,avg_f1,max_f1,avg_cardinality,replicates,selection_failures\n";
  for (const auto& r : results)
    for (const auto& s : r.selection)
      out << id << ',' << r.scenario << ',' << s.set << ',' << Fnv1a::exact(s.avg_true_positive) << ','
          << Fnv1a::exact(s.avg_f1) << ',' << Fnv1a::exact(s.max_f1) << ',' << Fnv1a::exact(s.avg_cardinality)
          << ',' << s.replicates << ',' << r.selection_failures << '\n';
}

inline void write_selected_sets_csv(std::ostream& out, const std::string& id, const std::string& scenario,
                                    const std::vector<ReplicateResult>& reps, bool header = true) {
  if (header) out << "run_id,scenario,replicate,set,indices\n";
  auto join = [](const CovariateSet& s) {
    std::string t;
    for (int i : s.indices()) t += (t.empty() ? "" : ";") + std::to_string(i);
    return t;
  };
  for (const auto& r : reps) {
    if (!r.sets) continue;
    out << id << ',' << scenario << ',' << r.replicate << ",Xhat_Z," << join(r.sets->xz_hat) << '\n';
    out << id << ',' << scenario << ',' << r.replicate << ",Xhat_Y," << join(r.sets->xy_hat) << '\n';
    out << id << ',' << scenario << ',' << r.replicate << ",Xhat_DS," << join(r.sets->ds_hat) << '\n';
    out << id << ',' << scenario << ',' << r.replicate << ",Xhat_I," << join(r.sets->i_hat) << '\n';
  }
}

/// Opens `path` for writing or throws OutputUnwritable.
inline std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::OutputUnwritable, "cannot write " + path.string());
  return out;
}

inline void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir))
    fail(ErrorKind::OutputUnwritable, "cannot create output directory " + dir.string());
}

// ---------------------------------------------------------------------------
// Calibration cache
// ---------------------------------------------------------------------------

/// JSON file of calibrations keyed by calibration_key().
class CalibrationCache {
 public:
  explicit CalibrationCache(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(path_);
    if (!in) return;
    try {
      in >> entries_;
    } catch (const nlohmann::json::exception&) {
      entries_ = nlohmann::json::object();  // unreadable cache: recalibrate
    }
    if (!entries_.is_object()) entries_ = nlohmann::json::object();
  }

  std::optional<Calibration> find(const std::string& key) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    try {
      Calibration c;
      c.alpha_z_star = it->at("alpha_z_star").get<double>();
      c.theta = it->at("theta").is_null() ? std::numeric_limits<double>::infinity() : it->at("theta").get<double>();
      c.achieved_mhr = it->at("achieved_mhr").get<double>();
      c.achieved_censoring = it->at("achieved_censoring").get<double>();
      return c;
    } catch (const nlohmann::json::exception&) {
      return std::nullopt;
    }
  }

  void store(const std::string& key, const Calibration& c, const GeneratorParams& p) {
    nlohmann::json e;
    e["alpha_z_star"] = c.alpha_z_star;
    e["theta"] = std::isfinite(c.theta) ? nlohmann::json(c.theta) : nlohmann::json(nullptr);
    e["achieved_mhr"] = c.achieved_mhr;
    e["achieved_censoring"] = c.achieved_censoring;
    e["params"] = {{"n", p.n}, {"p", p.p}, {"k", p.k}, {"target_mhr", p.target_mhr},
                   {"censoring_rate", p.censoring_rate}};
    entries_[key] = e;
  }

  void save() const {
    if (path_.has_parent_path()) ensure_directory(path_.parent_path());
    auto out = open_output(path_);
    out << entries_.dump(2) << '\n';
  }

 private:
  std::filesystem::path path_;
  nlohmann::json entries_ = nlohmann::json::object();
};

/// Calibrates through `cache` when given; `cached` reports a hit.
inline Calibration calibrate_cached(const GeneratorParams& params, std::uint64_t seed, CalibrationCache* cache,
                                    bool& cached, const CalibrationOptions& options = {}) {
  const auto key = calibration_key(params, seed, options);
  cached = false;
  if (cache)
    if (auto hit = cache->find(key)) {
      cached = true;
      return *hit;
    }
  const auto c = calibrate(params, seed, options);
  if (cache) cache->store(key, c, params);
  return c;
}

}  // namespace mhr
