#pragma once

// Shared data model: datasets, covariate index sets, weight vectors and
// seeded random streams.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mhr/error.hpp"

namespace mhr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using IntVector = Eigen::VectorXi;

/// Covariates X (n x P), treatment Z, observed time T and event indicator D.
struct SurvivalDataset {
  Matrix X;
  IntVector Z;
  Vector T;
  IntVector D;

  Eigen::Index n() const { return T.size(); }
  Eigen::Index p() const { return X.cols(); }

  Eigen::Index treated_count() const { return Z.sum(); }
  Eigen::Index event_count() const { return D.sum(); }

  /// Rows for which `keep(i)` holds, in original order.
  template <class Pred>
  SurvivalDataset subset(Pred keep) const {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < n(); ++i)
      if (keep(i)) rows.push_back(i);
    SurvivalDataset out;
    const auto m = static_cast<Eigen::Index>(rows.size());
    out.X.resize(m, p());
    out.Z.resize(m);
    out.T.resize(m);
    out.D.resize(m);
    for (Eigen::Index r = 0; r < m; ++r) {
      out.X.row(r) = X.row(rows[r]);
      out.Z(r) = Z(rows[r]);
      out.T(r) = T(rows[r]);
      out.D(r) = D(rows[r]);
    }
    return out;
  }
};

/// Checks every dataset invariant; returns the dataset unchanged when they hold.
inline const SurvivalDataset& validate_dataset(const SurvivalDataset& data) {
  const auto n = data.T.size();
  if (data.Z.size() != n || data.D.size() != n || data.X.rows() != n)
    fail(ErrorKind::InvalidArgument, "length mismatch between X, Z, T and D");
  if (n < 2) fail(ErrorKind::InvalidArgument, "dataset needs at least two rows");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::isnan(data.T(i)))
      fail(ErrorKind::MissingValue, "time missing at row " + std::to_string(i + 1));
    if (!std::isfinite(data.T(i)))
      fail(ErrorKind::NonFiniteValue, "time not finite at row " + std::to_string(i + 1));
    if (data.T(i) <= 0.0)
      fail(ErrorKind::NonPositiveTime, "time must be > 0 at row " + std::to_string(i + 1));
    if (data.Z(i) != 0 && data.Z(i) != 1)
      fail(ErrorKind::InvalidArgument, "treatment not in {0,1} at row " + std::to_string(i + 1));
    if (data.D(i) != 0 && data.D(i) != 1)
      fail(ErrorKind::InvalidArgument, "event not in {0,1} at row " + std::to_string(i + 1));
  }
  for (Eigen::Index j = 0; j < data.X.cols(); ++j)
    for (Eigen::Index i = 0; i < n; ++i)
      if (!std::isfinite(data.X(i, j)))
        fail(std::isnan(data.X(i, j)) ? ErrorKind::MissingValue : ErrorKind::NonFiniteValue,
             "covariate not finite at row " + std::to_string(i + 1) + ", column " +
                 std::to_string(j + 1));
  const auto treated = data.treated_count();
  if (treated == 0 || treated == n)
    fail(ErrorKind::SingleArm, "need at least one treated and one untreated subject");
  if (data.event_count() == 0) fail(ErrorKind::NoEvents, "no events observed");
  return data;
}

/// Sorted, duplicate-free set of 1-based covariate indices.
class CovariateSet {
 public:
  CovariateSet() = default;
  CovariateSet(std::initializer_list<int> indices) : CovariateSet(std::vector<int>(indices)) {}
  explicit CovariateSet(std::vector<int> indices) : indices_(std::move(indices)) {
    std::sort(indices_.begin(), indices_.end());
    indices_.erase(std::unique(indices_.begin(), indices_.end()), indices_.end());
    if (!indices_.empty() && indices_.front() < 1)
      fail(ErrorKind::InvalidArgument, "covariate indices are 1-based");
  }

  /// {1, ..., count}
  static CovariateSet range(int count) {
    std::vector<int> idx(static_cast<std::size_t>(std::max(count, 0)));
    for (int k = 0; k < count; ++k) idx[static_cast<std::size_t>(k)] = k + 1;
    return CovariateSet(std::move(idx));
  }

  const std::vector<int>& indices() const { return indices_; }
  std::size_t size() const { return indices_.size(); }
  bool empty() const { return indices_.empty(); }
  bool contains(int index) const {
    return std::binary_search(indices_.begin(), indices_.end(), index);
  }

  /// 0-based column numbers.
  std::vector<Eigen::Index> columns() const {
    std::vector<Eigen::Index> cols;
    cols.reserve(indices_.size());
    for (int k : indices_) cols.push_back(k - 1);
    return cols;
  }

  void check_bounds(Eigen::Index p) const {
    if (!indices_.empty() && indices_.back() > p)
      fail(ErrorKind::InvalidArgument, "covariate index " + std::to_string(indices_.back()) +
                                           " exceeds column count " + std::to_string(p));
  }

  friend CovariateSet set_union(const CovariateSet& a, const CovariateSet& b) {
    std::vector<int> out;
    std::set_union(a.indices_.begin(), a.indices_.end(), b.indices_.begin(), b.indices_.end(),
                   std::back_inserter(out));
    return CovariateSet(std::move(out));
  }
  friend CovariateSet set_intersection(const CovariateSet& a, const CovariateSet& b) {
    std::vector<int> out;
    std::set_intersection(a.indices_.begin(), a.indices_.end(), b.indices_.begin(),
                          b.indices_.end(), std::back_inserter(out));
    return CovariateSet(std::move(out));
  }
  bool is_subset_of(const CovariateSet& other) const {
    return std::includes(other.indices_.begin(), other.indices_.end(), indices_.begin(),
                         indices_.end());
  }

  friend bool operator==(const CovariateSet&, const CovariateSet&) = default;

  std::string to_string() const {
    std::string s = "{";
    for (std::size_t k = 0; k < indices_.size(); ++k) {
      if (k) s += ",";
      s += std::to_string(indices_[k]);
    }
    return s + "}";
  }

 private:
  std::vector<int> indices_;
};

/// Columns of `X` named by `set`, in index order.
inline Matrix select_columns(const Matrix& X, const CovariateSet& set) {
  set.check_bounds(X.cols());
  const auto cols = set.columns();
  Matrix out(X.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = X.col(cols[k]);
  return out;
}

enum class WeightKind { IPTW, MultiplyRobust };

struct WeightVector {
  Vector w;
  WeightKind kind = WeightKind::IPTW;

  static WeightVector unit(Eigen::Index n) { return {Vector::Ones(n), WeightKind::IPTW}; }
};

/// Checks finiteness, nonnegativity and, for multiply robust weights, the per-arm
/// normalization.
inline void validate_weights(const WeightVector& weights, const IntVector& Z) {
  if (weights.w.size() != Z.size()) fail(ErrorKind::InvalidArgument, "weight length mismatch");
  double treated_sum = 0.0, untreated_sum = 0.0;
  for (Eigen::Index i = 0; i < weights.w.size(); ++i) {
    const double w = weights.w(i);
    if (!std::isfinite(w) || w < 0.0)
      fail(ErrorKind::InvalidArgument, "weight at row " + std::to_string(i + 1) +
                                           " is negative or not finite");
    (Z(i) == 1 ? treated_sum : untreated_sum) += w;
  }
  if (weights.kind == WeightKind::MultiplyRobust &&
      (std::abs(treated_sum - 1.0) > 1e-8 || std::abs(untreated_sum - 1.0) > 1e-8))
    fail(ErrorKind::InvalidArgument, "multiply robust weights must sum to 1 within each arm");
}

/// Seeded random stream. Identical (seed, id) pairs reproduce identical draws.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t id) : seed_(seed), id_(id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(id), static_cast<std::uint32_t>(id >> 32),
                      0x6d68725fu};
    engine_.seed(seq);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t id() const { return id_; }

  std::uint64_t next() { return engine_(); }

  /// Uniform on the open interval (0, 1).
  double uniform() {
    double u;
    do {
      u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    } while (u == 0.0);
    return u;
  }

  /// Standard normal by the Marsaglia polar method.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double a, b, s;
    do {
      a = 2.0 * uniform() - 1.0;
      b = 2.0 * uniform() - 1.0;
      s = a * a + b * b;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = b * f;
    has_spare_ = true;
    return a * f;
  }

  int bernoulli(double p) { return uniform() < p ? 1 : 0; }

  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound) {
    std::uniform_int_distribution<std::uint64_t> dist(0, bound - 1);
    return dist(engine_);
  }

  template <class It>
  void shuffle(It first, It last) {
    for (auto k = last - first; k > 1; --k) {
      auto j = static_cast<decltype(k)>(below(static_cast<std::uint64_t>(k)));
      std::iter_swap(first + (k - 1), first + j);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t id_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline RngStream spawn_stream(std::uint64_t seed, std::uint64_t id) { return RngStream(seed, id); }

inline double expit(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace mhr
