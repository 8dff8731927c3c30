#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mhr/lasso.hpp"
#include "mhr/survival.hpp"
#include "support/oracles.hpp"

namespace {

using namespace mhr;

struct LogisticProblem {
  Matrix X;
  IntVector y;
};

LogisticProblem logistic_problem(int n, int p, std::uint64_t seed, double signal = 1.0) {
  auto rng = spawn_stream(seed, 0);
  LogisticProblem out{Matrix(n, p), IntVector(n)};
  for (int i = 0; i < n; ++i) {
    double eta = -0.3;
    for (int j = 0; j < p; ++j) {
      out.X(i, j) = j % 3 == 1 ? rng.bernoulli(0.4) : 2.0 * rng.normal() + 1.0;
      if (j < 3) eta += signal * (j == 1 ? 1.0 : 0.4) * out.X(i, j) * (j == 2 ? -1 : 1);
    }
    out.y(i) = rng.bernoulli(expit(eta));
  }
  return out;
}

struct CoxProblem {
  Matrix X;
  Vector T;
  IntVector D;
};

CoxProblem cox_problem(int n, int p, std::uint64_t seed, double censor = 0.3) {
  auto rng = spawn_stream(seed, 1);
  CoxProblem out{Matrix(n, p), Vector(n), IntVector(n)};
  for (int i = 0; i < n; ++i) {
    double lp = 0.0;
    for (int j = 0; j < p; ++j) {
      out.X(i, j) = j % 2 ? rng.bernoulli(0.5) : rng.normal();
      if (j < 3) lp += (j == 0 ? 0.7 : -0.5) * out.X(i, j);
    }
    const double y = -std::log(rng.uniform()) / std::exp(lp);
    const bool censored = rng.uniform() < censor;
    const double c = censored ? y * rng.uniform() : y + 1.0;
    out.T(i) = std::min(y, c);
    out.D(i) = y <= c ? 1 : 0;
  }
  return out;
}

Vector linear_predictor(const Matrix& X, const LassoFit& fit) {
  Vector eta = X * fit.coefficients;
  eta.array() += fit.intercept;
  return eta;
}

// --- unpenalized logistic ----------------------------------------------------

TEST(FitLogistic, InterceptOnlyIsLogitOfTheMean) {
  IntVector y(10);
  y << 1, 0, 0, 1, 0, 1, 0, 0, 1, 0;
  const auto fit = fit_logistic(Matrix(10, 0), y);
  EXPECT_NEAR(fit.intercept, -0.405465, 1e-6);
  for (double p : fit.fitted) EXPECT_NEAR(p, 0.4, 1e-9);
}

TEST(FitLogistic, IndependentResponseGivesNearZeroSlope) {
  auto rng = spawn_stream(77, 0);
  Matrix X(10000, 1);
  IntVector y(10000);
  for (int i = 0; i < 10000; ++i) {
    X(i, 0) = rng.normal();
    y(i) = rng.bernoulli(0.5);
  }
  const auto fit = fit_logistic(X, y);
  EXPECT_LT(std::abs(fit.coefficients(0)), 0.07);
}

TEST(FitLogistic, SolvesTheScoreEquations) {
  const auto pr = logistic_problem(400, 4, 3);
  const auto fit = fit_logistic(pr.X, pr.y);
  const Vector r = fit.fitted - pr.y.cast<double>();
  EXPECT_LE(std::abs(r.sum()), 1e-8);
  EXPECT_LE((pr.X.transpose() * r).lpNorm<Eigen::Infinity>(), 1e-8);
  EXPECT_GT(fit.fitted.minCoeff(), 0.0);
  EXPECT_LT(fit.fitted.maxCoeff(), 1.0);
}

TEST(FitLogistic, PerfectSeparationIsFlagged) {
  Matrix X(20, 1);
  IntVector y(20);
  for (int i = 0; i < 20; ++i) X(i, 0) = y(i) = i % 2;
  try {
    fit_logistic(X, y);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Separation);
  }
}

TEST(FitLogistic, GlmCompatibleModeReturnsUnderSeparation) {
  Matrix X(20, 1);
  IntVector y(20);
  for (int i = 0; i < 20; ++i) X(i, 0) = y(i) = i % 2;
  LogisticOptions o;
  o.mode = LogisticMode::GlmCompatible;
  const auto fit = fit_logistic(X, y, o);
  EXPECT_GT(fit.coefficients(0), 10.0);
}

TEST(FitLogistic, DuplicatedColumnIsRankDeficient) {
  auto pr = logistic_problem(100, 3, 4);
  pr.X.col(2) = pr.X.col(0);
  try {
    fit_logistic(pr.X, pr.y);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::RankDeficient);
  }
}

// --- logistic lasso -----------------------------------------------------------

TEST(LogisticLasso, LambdaMaxMatchesItsDefinition) {
  const auto pr = logistic_problem(150, 6, 5);
  const Matrix Xs = oracle::standardize(pr.X);
  const Vector r = pr.y.cast<double>().array() - pr.y.cast<double>().mean();
  const double expected = (Xs.transpose() * r).cwiseAbs().maxCoeff() / 150.0;
  EXPECT_NEAR(logistic_lambda_max(pr.X, pr.y), expected, 1e-12);
}

TEST(LogisticLasso, AtOrAboveLambdaMaxEverythingIsZero) {
  const auto pr = logistic_problem(150, 6, 5);
  const double lmax = logistic_lambda_max(pr.X, pr.y);
  for (double f : {1.0, 1.5}) {
    const auto fit = fit_logistic_lasso(pr.X, pr.y, f * lmax);
    EXPECT_TRUE(fit.active().empty());
    EXPECT_NEAR(fit.intercept, logit(pr.y.cast<double>().mean()), 1e-9);
  }
}

TEST(LogisticLasso, ZeroPenaltyMatchesUnpenalizedFit) {
  const auto pr = logistic_problem(300, 4, 6);
  const auto lasso = fit_logistic_lasso(pr.X, pr.y, 0.0);
  const auto glm = fit_logistic(pr.X, pr.y);
  EXPECT_LE((lasso.coefficients - glm.coefficients).lpNorm<Eigen::Infinity>(), 1e-4);
  EXPECT_NEAR(lasso.intercept, glm.intercept, 1e-4);
}

TEST(LogisticLasso, SingleColumnMatchesGoldenSectionOracle) {
  const auto pr = logistic_problem(200, 1, 7, 1.0);
  const double lmax = logistic_lambda_max(pr.X, pr.y);
  for (double f : {0.7, 0.3, 0.05}) {
    const auto fit = fit_logistic_lasso(pr.X, pr.y, f * lmax);
    EXPECT_NEAR(fit.std_coefficients(0), oracle::logistic_lasso_1d(pr.X.col(0), pr.y, f * lmax), 1e-5) << f;
  }
}

TEST(LogisticLasso, KktHoldsAtEveryPathPoint) {
  for (std::uint64_t seed : {11u, 12u}) {
    const auto pr = logistic_problem(120, 25, seed);
    const double lmax = logistic_lambda_max(pr.X, pr.y);
    const auto grid = lambda_grid(lmax, 120, 25, 30);
    LassoOptions o;
    o.early_stop = false;
    const auto path = logistic_lasso_path(pr.X, pr.y, grid, o);
    const Matrix Xs = oracle::standardize(pr.X);
    ASSERT_EQ(path.size(), 30);
    for (Eigen::Index k = 0; k < path.size(); ++k) {
      Vector eta = pr.X * path.coefficients.col(k);
      eta.array() += path.intercepts[static_cast<std::size_t>(k)];
      const Vector g = oracle::logistic_gradient(Xs, pr.y, eta);
      EXPECT_LE(oracle::kkt(g, path.std_coefficients.col(k), grid[static_cast<std::size_t>(k)]).worst, 1e-7);
      double intercept_score = 0;
      for (Eigen::Index i = 0; i < eta.size(); ++i) intercept_score += expit(eta(i)) - pr.y(i);
      EXPECT_LE(std::abs(intercept_score) / 120.0, 1e-7);
    }
  }
}

TEST(LogisticLasso, PathStartsEmptyAndRejectsNonDecreasingLambdas) {
  const auto pr = logistic_problem(100, 8, 13);
  const double lmax = logistic_lambda_max(pr.X, pr.y);
  const auto path = logistic_lasso_path(pr.X, pr.y, lambda_grid(lmax, 100, 8, 20));
  EXPECT_TRUE(path.active(0).empty());
  for (std::size_t k = 1; k < path.lambdas.size(); ++k) EXPECT_LT(path.lambdas[k], path.lambdas[k - 1]);
  EXPECT_THROW(logistic_lasso_path(pr.X, pr.y, {0.1, 0.1}), Error);
  EXPECT_THROW(logistic_lasso_path(pr.X, pr.y, {0.05, 0.1}), Error);
}

TEST(LogisticLasso, OneDimensionalPathFollowsTheOracle) {
  const auto pr = logistic_problem(150, 1, 14);
  const double lmax = logistic_lambda_max(pr.X, pr.y);
  LassoOptions o;
  o.early_stop = false;
  const auto grid = lambda_grid(lmax, 150, 1, 12);
  const auto path = logistic_lasso_path(pr.X, pr.y, grid, o);
  for (Eigen::Index k = 0; k < path.size(); k += 3)
    EXPECT_NEAR(path.std_coefficients(0, k), oracle::logistic_lasso_1d(pr.X.col(0), pr.y, grid[static_cast<std::size_t>(k)]), 1e-5);
}

TEST(LogisticLasso, AffineRescalingLeavesFittedValuesUnchanged) {
  const auto pr = logistic_problem(200, 6, 15);
  Matrix shifted = pr.X;
  for (Eigen::Index j = 0; j < shifted.cols(); ++j) shifted.col(j) = (3.0 + j) * shifted.col(j).array() - 2.0 * j;
  const double lambda = 0.2 * logistic_lambda_max(pr.X, pr.y);
  EXPECT_NEAR(logistic_lambda_max(shifted, pr.y), logistic_lambda_max(pr.X, pr.y), 1e-12);
  const auto a = fit_logistic_lasso(pr.X, pr.y, lambda);
  const auto b = fit_logistic_lasso(shifted, pr.y, lambda);
  EXPECT_LE((linear_predictor(pr.X, a) - linear_predictor(shifted, b)).lpNorm<Eigen::Infinity>(), 1e-8);
  EXPECT_LE((a.std_coefficients - b.std_coefficients).lpNorm<Eigen::Infinity>(), 1e-8);
}

TEST(LogisticLasso, ConstantColumnStaysInactive) {
  auto pr = logistic_problem(100, 4, 16);
  pr.X.col(3).setConstant(2.5);
  const auto fit = fit_logistic_lasso(pr.X, pr.y, 0.01 * logistic_lambda_max(pr.X, pr.y));
  EXPECT_EQ(fit.coefficients(3), 0.0);
}

TEST(LogisticLasso, ResponseNeedsBothClasses) {
  const auto pr = logistic_problem(50, 2, 17);
  EXPECT_THROW(fit_logistic_lasso(pr.X, IntVector::Zero(50), 0.1), Error);
}

// --- Cox lasso ---------------------------------------------------------------

TEST(CoxLasso, LambdaMaxIsTheNullScoreOverN) {
  const auto pr = cox_problem(120, 5, 21);
  const Matrix Xs = oracle::standardize(pr.X);
  const double expected = oracle::cox_gradient(Xs, pr.T, pr.D, Vector::Zero(5)).cwiseAbs().maxCoeff();
  EXPECT_NEAR(cox_lambda_max(pr.X, pr.T, pr.D), expected, 1e-12);
  const auto fit = fit_cox_lasso(pr.X, pr.T, pr.D, 1.01 * expected);
  EXPECT_TRUE(fit.active().empty());
}

TEST(CoxLasso, ZeroPenaltyMatchesNewtonCox) {
  const auto pr = cox_problem(200, 2, 22, 0.0);
  const auto lasso = fit_cox_lasso(pr.X, pr.T, pr.D, 0.0);
  SurvivalDataset d{pr.X, IntVector::Zero(200), pr.T, pr.D};
  const auto cox = fit_weighted_cox(d, CoxTerms::of({1, 2}), WeightVector::unit(200));
  EXPECT_LE((lasso.coefficients - cox.coefficients).lpNorm<Eigen::Infinity>(), 1e-4);
}

TEST(CoxLasso, DuplicatedColumnSplitsTheCoefficient) {
  const auto pr = cox_problem(200, 3, 23);
  const double lambda = 0.3 * cox_lambda_max(pr.X, pr.T, pr.D);
  const auto single = fit_cox_lasso(pr.X, pr.T, pr.D, lambda);
  Matrix dup(200, 4);
  dup << pr.X, pr.X.col(0);
  const auto split = fit_cox_lasso(dup, pr.T, pr.D, lambda);
  EXPECT_NEAR(split.coefficients(0) + split.coefficients(3), single.coefficients(0), 1e-4);
  EXPECT_LE(std::abs(split.coefficients(0)), std::abs(single.coefficients(0)) + 1e-8);
  EXPECT_LE(std::abs(split.coefficients(3)), std::abs(single.coefficients(0)) + 1e-8);
}

TEST(CoxLasso, KktHoldsWithTiesAndCensoring) {
  auto pr = cox_problem(150, 20, 24, 0.4);
  for (auto& t : pr.T) t = std::ceil(t * 4.0) / 4.0;  // induce ties
  const double lmax = cox_lambda_max(pr.X, pr.T, pr.D);
  const Matrix Xs = oracle::standardize(pr.X);
  for (double f : {0.8, 0.4, 0.15, 0.05}) {
    const auto fit = fit_cox_lasso(pr.X, pr.T, pr.D, f * lmax);
    const Vector g = oracle::cox_gradient(Xs, pr.T, pr.D, fit.std_coefficients);
    EXPECT_LE(oracle::kkt(g, fit.std_coefficients, f * lmax).worst, 1e-7) << f;
  }
}

TEST(CoxLasso, WideDesignKkt) {
  const auto pr = cox_problem(60, 100, 25, 0.2);
  const double lmax = cox_lambda_max(pr.X, pr.T, pr.D);
  const Matrix Xs = oracle::standardize(pr.X);
  for (double f : {0.5, 0.1}) {
    const auto fit = fit_cox_lasso(pr.X, pr.T, pr.D, f * lmax);
    const Vector g = oracle::cox_gradient(Xs, pr.T, pr.D, fit.std_coefficients);
    EXPECT_LE(oracle::kkt(g, fit.std_coefficients, f * lmax).worst, 1e-7) << f;
  }
}

TEST(CoxLasso, NoEventsIsAnError) {
  const auto pr = cox_problem(40, 3, 26);
  try {
    fit_cox_lasso(pr.X, pr.T, IntVector::Zero(40), 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NoEvents);
  }
}

// --- grids and cross-validation ---------------------------------------------

TEST(LambdaGrid, LogSpacedWithRatioDependingOnShape) {
  const auto tall = lambda_grid(2.0, 100, 10);
  ASSERT_EQ(tall.size(), 100u);
  EXPECT_DOUBLE_EQ(tall.front(), 2.0);
  EXPECT_NEAR(tall.back(), 0.02, 1e-14);
  EXPECT_NEAR(tall[1] / tall[0], tall[50] / tall[49], 1e-12);
  EXPECT_NEAR(lambda_grid(2.0, 100, 100).back(), 0.1, 1e-14);
  EXPECT_TRUE(lambda_grid(0.0, 10, 2).empty());
}

void expect_one_se_rule(const CvResult& cv) {
  EXPECT_GE(cv.lambda_1se, cv.lambda_min);
  const CvPoint* best = nullptr;
  for (const auto& pt : cv.cv_curve)
    if (!best || pt.mean_loss < best->mean_loss) best = &pt;
  ASSERT_NE(best, nullptr);
  EXPECT_EQ(best->lambda, cv.lambda_min);
  double largest = 0;
  for (const auto& pt : cv.cv_curve)
    if (pt.mean_loss <= best->mean_loss + best->se_loss) largest = std::max(largest, pt.lambda);
  EXPECT_EQ(cv.lambda_1se, largest);
  EXPECT_EQ(cv.path.lambdas[static_cast<std::size_t>(cv.index_1se())], cv.lambda_1se);
}

TEST(CrossValidate, LogisticOneSeRuleAndFoldDeterminism) {
  const auto pr = logistic_problem(200, 15, 31);
  auto r1 = spawn_stream(5, 5), r2 = spawn_stream(5, 5);
  const auto a = cross_validate_logistic(pr.X, pr.y, r1);
  const auto b = cross_validate_logistic(pr.X, pr.y, r2);
  expect_one_se_rule(a);
  EXPECT_EQ(a.folds, b.folds);
  EXPECT_EQ(a.lambda_1se, b.lambda_1se);
  EXPECT_EQ(a.lambda_min, b.lambda_min);
  ASSERT_EQ(a.cv_curve.size(), b.cv_curve.size());
  for (std::size_t k = 0; k < a.cv_curve.size(); ++k) EXPECT_EQ(a.cv_curve[k].mean_loss, b.cv_curve[k].mean_loss);
  std::vector<int> sizes(10, 0);
  for (int f : a.folds) ++sizes[static_cast<std::size_t>(f)];
  for (int s : sizes) EXPECT_EQ(s, 20);
}

TEST(CrossValidate, CoxOneSeRuleAndStratifiedFolds) {
  const auto pr = cox_problem(200, 12, 32);
  auto r1 = spawn_stream(6, 6), r2 = spawn_stream(6, 6);
  const auto a = cross_validate_cox(pr.X, pr.T, pr.D, r1);
  const auto b = cross_validate_cox(pr.X, pr.T, pr.D, r2);
  expect_one_se_rule(a);
  EXPECT_EQ(a.folds, b.folds);
  EXPECT_EQ(a.lambda_1se, b.lambda_1se);
  std::vector<int> events(10, 0);
  for (int i = 0; i < 200; ++i) events[static_cast<std::size_t>(a.folds[static_cast<std::size_t>(i)])] += pr.D(i);
  const auto [lo, hi] = std::minmax_element(events.begin(), events.end());
  EXPECT_LE(*hi - *lo, 1);
  for (const auto& pt : a.cv_curve) {
    EXPECT_LE(pt.mean_loss, 0.0);
    EXPECT_GE(pt.mean_loss, -1.0);
  }
}

TEST(CrossValidate, ZeroColumnsGiveAFlatCurve) {
  const auto pr = logistic_problem(60, 0, 33);
  auto rng = spawn_stream(1, 1);
  const auto cv = cross_validate_logistic(pr.X, pr.y, rng);
  ASSERT_EQ(cv.cv_curve.size(), 1u);
  EXPECT_EQ(cv.lambda_1se, cv.cv_curve.front().lambda);
  EXPECT_EQ(cv.lambda_1se, cv.lambda_min);
  EXPECT_TRUE(cv.path.active(cv.index_1se()).empty());
}

TEST(CrossValidate, PureNoiseSelectsNothingMostOfTheTime) {
  int empty = 0, at_top = 0;
  const int seeds = 20;
  for (int s = 0; s < seeds; ++s) {
    auto rng = spawn_stream(900 + s, 0);
    Matrix X(500, 50);
    IntVector y(500);
    for (int i = 0; i < 500; ++i) {
      for (int j = 0; j < 50; ++j) X(i, j) = rng.normal();
      y(i) = rng.bernoulli(0.5);
    }
    const auto cv = cross_validate_logistic(X, y, rng);
    empty += cv.path.active(cv.index_1se()).empty();
    at_top += cv.lambda_1se == cv.cv_curve.front().lambda;
  }
  EXPECT_GE(empty, 18);
  EXPECT_GE(at_top, 18);
}

TEST(CrossValidate, TooFewRowsOrEventsAreErrors) {
  const auto small = logistic_problem(15, 3, 34);
  auto rng = spawn_stream(1, 2);
  EXPECT_THROW(cross_validate_logistic(small.X, small.y, rng), Error);
  auto pr = cox_problem(60, 3, 35);
  pr.D.setZero();
  pr.D.head(3).setOnes();
  try {
    cross_validate_cox(pr.X, pr.T, pr.D, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::FoldWithoutEvents);
  }
}

}  // namespace
