#pragma once

// Scenario configuration files.
//
//   # comment
//   [defaults]
//   replicates = 200
//   seed = 20240501
//   estimators = all            (or a comma-separated list of estimator names)
//
//   [scenario 1]
//   n = 1000
//   p = 500
//   k = 1
//   target_mhr = 2
//   censoring_rate = 0
//
// Scenario sections accept every [defaults] key as an override plus the
// generator keys n, p, k, target_mhr, censoring_rate, eta, gamma.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mhr/simulate.hpp"

namespace mhr {

struct RunConfig {
  std::vector<ScenarioConfig> scenarios;
  std::uint64_t seed = 20240501;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

[[noreturn]] inline void config_error(int line, const std::string& msg) {
  fail(ErrorKind::ConfigParse, "line " + std::to_string(line) + ": " + msg);
}

inline double parse_real(const std::string& v, int line) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    config_error(line, "expected a number, got '" + v + "'");
  }
  if (used != v.size() || !std::isfinite(x)) config_error(line, "expected a number, got '" + v + "'");
  return x;
}

inline long long parse_integer(const std::string& v, int line) {
  std::size_t used = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &used);
  } catch (const std::exception&) {
    config_error(line, "expected an integer, got '" + v + "'");
  }
  if (used != v.size()) config_error(line, "expected an integer, got '" + v + "'");
  return x;
}

inline std::vector<Estimator> parse_estimator_list(const std::string& v, int line) {
  if (v == "all") return {kAllEstimators.begin(), kAllEstimators.end()};
  std::vector<Estimator> out;
  for (const auto& name : split(v, ',')) {
    try {
      out.push_back(parse_estimator(name));
    } catch (const Error& e) {
      config_error(line, e.detail());
    }
  }
  if (out.empty()) config_error(line, "estimator list is empty");
  return out;
}

}  // namespace detail

inline RunConfig parse_config(const std::string& text) {
  struct Pending {
    ScenarioConfig config;
    std::set<std::string> keys;
    int line = 0;
  };
  RunConfig run;
  ScenarioConfig defaults;
  defaults.replicates = 1000;
  std::vector<Pending> sections;
  bool in_defaults = false;
  std::set<std::string> default_keys;

  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string s = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') detail::config_error(line, "unterminated section header");
      const std::string name = detail::trim(s.substr(1, s.size() - 2));
      if (name == "defaults") {
        if (!sections.empty()) detail::config_error(line, "[defaults] must precede every scenario");
        in_defaults = true;
        continue;
      }
      if (name.rfind("scenario", 0) != 0) detail::config_error(line, "unknown section '" + name + "'");
      const std::string id = detail::trim(name.substr(8));
      if (id.empty()) detail::config_error(line, "scenario section needs an id");
      for (const auto& p : sections)
        if (p.config.id == id) detail::config_error(line, "duplicate scenario '" + id + "'");
      in_defaults = false;
      Pending p{defaults, {}, line};
      p.config.id = id;
      sections.push_back(std::move(p));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) detail::config_error(line, "expected key = value");
    const std::string key = detail::trim(s.substr(0, eq));
    const std::string value = detail::trim(s.substr(eq + 1));
    if (value.empty()) detail::config_error(line, "empty value for '" + key + "'");

    if (in_defaults) {
      if (!default_keys.insert(key).second) detail::config_error(line, "duplicate key '" + key + "'");
      if (key == "replicates") defaults.replicates = static_cast<int>(detail::parse_integer(value, line));
      else if (key == "seed") run.seed = static_cast<std::uint64_t>(detail::parse_integer(value, line));
      else if (key == "estimators") defaults.estimators = detail::parse_estimator_list(value, line);
      else detail::config_error(line, "unknown key '" + key + "' in [defaults]");
      continue;
    }
    if (sections.empty()) detail::config_error(line, "key outside of any section");
    auto& cur = sections.back();
    if (!cur.keys.insert(key).second) detail::config_error(line, "duplicate key '" + key + "'");
    auto& c = cur.config;
    if (key == "n") c.params.n = static_cast<int>(detail::parse_integer(value, line));
    else if (key == "p") c.params.p = static_cast<int>(detail::parse_integer(value, line));
    else if (key == "k") c.params.k = detail::parse_real(value, line);
    else if (key == "target_mhr") c.params.target_mhr = detail::parse_real(value, line);
    else if (key == "censoring_rate") c.params.censoring_rate = detail::parse_real(value, line);
    else if (key == "eta") c.params.eta = detail::parse_real(value, line);
    else if (key == "gamma") c.params.gamma = detail::parse_real(value, line);
    else if (key == "replicates") c.replicates = static_cast<int>(detail::parse_integer(value, line));
    else if (key == "estimators") c.estimators = detail::parse_estimator_list(value, line);
    else if (key == "seed") c.base_seed = static_cast<std::uint64_t>(detail::parse_integer(value, line));
    else detail::config_error(line, "unknown key '" + key + "'");
  }
  if (sections.empty()) fail(ErrorKind::ConfigParse, "config defines no scenarios");
  for (auto& p : sections) {
    // Scenario-level seeds override; otherwise every scenario uses the run seed.
    if (!p.keys.count("seed")) p.config.base_seed = run.seed;
    try {
      p.config.validate();
    } catch (const Error& e) {
      detail::config_error(p.line, "scenario " + p.config.id + ": " + e.detail());
    }
    run.scenarios.push_back(std::move(p.config));
  }
  return run;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::ConfigParse, "cannot open config file " + path);
  std::ostringstream text;
  text << in.rdbuf();
  try {
    return parse_config(text.str());
  } catch (const Error& e) {
    fail(ErrorKind::ConfigParse, path + ": " + e.detail());
  }
}

// ---------------------------------------------------------------------------
// Hashes identifying configurations and calibration inputs
// ---------------------------------------------------------------------------

class Fnv1a {
 public:
  Fnv1a& add(const std::string& s) {
    for (unsigned char c : s) {
      h_ ^= c;
      h_ *= 0x100000001b3ull;
    }
    h_ ^= 0xff;  // field separator
    h_ *= 0x100000001b3ull;
    return *this;
  }
  Fnv1a& add(double v) { return add(exact(v)); }
  Fnv1a& add(long long v) { return add(std::to_string(v)); }
  Fnv1a& add(std::uint64_t v) { return add(std::to_string(v)); }
  Fnv1a& add(int v) { return add(std::to_string(v)); }

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
    return buf;
  }

  /// Round-trip exact text for a double.
  static std::string exact(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ull;
};

/// Hash of everything calibration depends on.
inline std::string calibration_key(const GeneratorParams& p, std::uint64_t seed, const CalibrationOptions& o = {}) {
  Fnv1a h;
  h.add(std::string("calibration-v1")).add(p.n).add(p.p).add(p.k).add(p.eta).add(p.gamma);
  h.add(p.target_mhr).add(p.censoring_rate).add(seed);
  for (double b : p.beta_base) h.add(b);
  h.add(std::string("|"));
  for (double a : p.alpha) h.add(a);
  h.add(o.population).add(o.mhr_tolerance).add(o.rate_tolerance).add(o.max_iterations);
  h.add(o.bracket_low).add(o.bracket_high);
  return h.hex();
}

/// Hash of the parsed configuration (formatting and comments do not matter).
inline std::string config_hash(const RunConfig& run) {
  Fnv1a h;
  h.add(run.seed);
  for (const auto& s : run.scenarios) {
    h.add(s.id).add(s.replicates).add(s.base_seed);
    h.add(s.params.n).add(s.params.p).add(s.params.k).add(s.params.target_mhr).add(s.params.censoring_rate);
    h.add(s.params.eta).add(s.params.gamma);
    for (auto e : s.estimators) h.add(estimator_name(e));
  }
  return h.hex();
}

}  // namespace mhr
