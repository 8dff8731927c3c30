#pragma once

// End-to-end analysis of an observed dataset: clean the covariates, optionally
// pad them with independent noise columns until n = P, select, and estimate.

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "mhr/pipeline.hpp"

namespace mhr {

inline constexpr std::uint64_t kAnalysisStream = 0xA7A1000000000000ull;
inline constexpr std::uint64_t kAugmentStream = 0xA06E000000000000ull;

struct NamedDataset {
  SurvivalDataset data;
  std::vector<std::string> names;  // one per column of X
};

/// Removes covariate columns with a single distinct value; returns their names.
inline std::vector<std::string> drop_constant_columns(NamedDataset& d) {
  std::vector<Eigen::Index> keep;
  std::vector<std::string> dropped, kept_names;
  const auto& X = d.data.X;
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    const bool constant = X.rows() == 0 || (X.col(j).array() == X(0, j)).all();
    if (constant) {
      dropped.push_back(d.names[static_cast<std::size_t>(j)]);
    } else {
      keep.push_back(j);
      kept_names.push_back(d.names[static_cast<std::size_t>(j)]);
    }
  }
  if (dropped.empty()) return dropped;
  Matrix reduced(X.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t c = 0; c < keep.size(); ++c) reduced.col(static_cast<Eigen::Index>(c)) = X.col(keep[c]);
  d.data.X = std::move(reduced);
  d.names = std::move(kept_names);
  return dropped;
}

/// Appends n - P independent columns named X1..Xk: the first ceil(k/2) are
/// N(0, 1), the rest Bernoulli(0.5). Returns k (0 when P >= n).
inline int augment_to_square(NamedDataset& d, std::uint64_t seed) {
  const auto n = d.data.n(), p = d.data.p();
  if (p >= n) return 0;
  const auto k = n - p;
  std::vector<std::string> added;
  for (Eigen::Index j = 0; j < k; ++j) {
    auto name = "X" + std::to_string(j + 1);
    if (std::find(d.names.begin(), d.names.end(), name) != d.names.end())
      fail(ErrorKind::CsvSchema, "augmentation column '" + name + "' clashes with an existing covariate");
    added.push_back(std::move(name));
  }
  const auto normals = (k + 1) / 2;
  auto rng = spawn_stream(seed, kAugmentStream);
  Matrix X(n, n);
  X.leftCols(p) = d.data.X;
  for (Eigen::Index j = 0; j < k; ++j)
    for (Eigen::Index i = 0; i < n; ++i) X(i, p + j) = j < normals ? rng.normal() : rng.bernoulli(0.5);
  d.data.X = std::move(X);
  d.names.insert(d.names.end(), added.begin(), added.end());
  return static_cast<int>(k);
}

struct AnalysisOptions {
  bool augment = false;
  std::uint64_t seed = 20240501;  // drives CV folds and augmentation
  CvOptions cv{};
};

struct AnalysisRow {
  std::string set;  // Xhat_Z, Xhat_Y, Xhat_DS, Xhat_Rob
  EstimateOutcome outcome;
};

struct AnalysisResult {
  NamedDataset dataset;  // after dropping and augmentation
  std::vector<std::string> dropped;
  int augmented = 0;
  SelectedSets sets;
  std::vector<AnalysisRow> rows;
};

/// Selection uses spawn_stream(seed, kAnalysisStream) on the cleaned data.
inline AnalysisResult analyze_dataset(NamedDataset input, const AnalysisOptions& options = {}) {
  AnalysisResult out;
  out.dataset = std::move(input);
  out.dropped = drop_constant_columns(out.dataset);
  if (options.augment) out.augmented = augment_to_square(out.dataset, options.seed);
  const auto& data = out.dataset.data;
  validate_dataset(data);
  auto rng = spawn_stream(options.seed, kAnalysisStream);
  out.sets = run_selection(data, rng, options.cv).sets;
  out.rows.push_back({"Xhat_Z", estimate_iptw(data, out.sets.xz_hat)});
  out.rows.push_back({"Xhat_Y", estimate_iptw(data, out.sets.xy_hat)});
  out.rows.push_back({"Xhat_DS", estimate_iptw(data, out.sets.ds_hat)});
  out.rows.push_back({"Xhat_Rob", estimate_multiply_robust(data, robust_model_sets(out.sets))});
  return out;
}

}  // namespace mhr
