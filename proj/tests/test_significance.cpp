#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "mcbias/reporting.hpp"
#include "mcbias/significance.hpp"

using namespace mcbias;

namespace {

Grid fixture() { return ingest_published_grid(MCBIAS_DATA_DIR "/published_grid.csv"); }

Grid only_dataset(const Grid& g, std::string_view ds) {
  Grid out;
  for (const auto& c : g)
    if (c.dataset == ds) out.push_back(c);
  return out;
}

// Balanced grid: every group sees all 48 formats once.
Grid simulated(unsigned seed, std::size_t groups, double s2u, double s2e,
               const std::vector<double>& beta) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> u(0.0, std::sqrt(s2u)), e(0.0, std::sqrt(s2e));
  const BaseLevels base;
  Grid g;
  for (std::size_t k = 0; k < groups; ++k) {
    const double uk = u(rng);
    for (const auto& f : enumerate_formats()) {
      EvalCell c;
      c.model = "m" + std::to_string(k);
      c.dataset = "d";
      c.format = f;
      g.push_back(c);
    }
    const auto d = build_design(Grid(g.end() - 48, g.end()), base);
    for (Eigen::Index i = 0; i < 48; ++i) {
      double y = uk + e(rng);
      for (Eigen::Index j = 0; j < d.x.cols(); ++j) y += d.x(i, j) * beta[static_cast<std::size_t>(j)];
      g[g.size() - 48 + static_cast<std::size_t>(i)].accuracy = y / 100.0;
    }
  }
  return g;
}

struct DenseFit {
  Eigen::VectorXd beta;
  double sigma2;
  double deviance;
};

// Explicit covariance V = I + lambda Z Z^T, no per-group shortcuts.
DenseFit dense_ml(const LmmDesign& d, double lambda) {
  const auto n = d.x.rows();
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (d.group[static_cast<std::size_t>(i)] == d.group[static_cast<std::size_t>(j)]) v(i, j) += lambda;
  Eigen::LLT<Eigen::MatrixXd> llt(v);
  const Eigen::MatrixXd vx = llt.solve(d.x);
  const Eigen::VectorXd vy = llt.solve(d.y);
  DenseFit f;
  f.beta = (d.x.transpose() * vx).ldlt().solve(d.x.transpose() * vy);
  const Eigen::VectorXd r = d.y - d.x * f.beta;
  f.sigma2 = r.dot(llt.solve(r)) / static_cast<double>(n);
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  f.deviance = static_cast<double>(n) * std::log(2.0 * std::numbers::pi * f.sigma2) + logdet +
               static_cast<double>(n);
  return f;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

const std::vector<double> kBeta = {60, 5, -8, 1, 0, 0.5, -6, 1.5, 0.8};

}  // namespace

TEST_CASE("design shape and dummy coding") {
  const auto d = build_design(fixture());
  CHECK(d.x.rows() == 1680);
  CHECK(d.x.cols() == 9);
  CHECK(d.group_names.size() == 35);
  CHECK(d.columns == std::vector<std::string>{"intercept", "uppercase", "numbers", "roman", "dot",
                                              "colon", "double_brackets", "line_break", "semicolon"});
  const Grid g = fixture();
  for (Eigen::Index i = 0; i < d.x.rows(); ++i) {
    const auto& c = g[static_cast<std::size_t>(i)];
    CHECK(d.x(i, 0) == 1.0);
    // Exactly one dummy per factor unless the factor sits at its base.
    CHECK(d.x.row(i).segment(1, 3).sum() == (c.format.id_set == OptionIdSet::Lowercase ? 0.0 : 1.0));
    CHECK(d.x.row(i).segment(4, 3).sum() == (c.format.delimiter == OptionDelimiter::Bracket ? 0.0 : 1.0));
    CHECK(d.x.row(i).segment(7, 2).sum() == (c.format.separator == OptionSeparator::Comma ? 0.0 : 1.0));
    CHECK(d.y(i) == doctest::Approx(100.0 * c.accuracy));
  }
}

TEST_CASE("lambda zero is ordinary least squares") {
  const auto d = build_design(simulated(3, 6, 4.0, 1.0, kBeta));
  const auto fit = fit_at_lambda(d, 0.0);
  const Eigen::MatrixXd xtx = d.x.transpose() * d.x;
  const Eigen::VectorXd ols = xtx.ldlt().solve(d.x.transpose() * d.y);
  CHECK((fit.beta - ols).cwiseAbs().maxCoeff() <= 1e-8);
  const double s2 = (d.y - d.x * ols).squaredNorm() / static_cast<double>(d.x.rows());
  const Eigen::VectorXd se = (s2 * xtx.inverse()).diagonal().cwiseSqrt();
  CHECK((fit.se - se).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("per-group closed form agrees with the dense likelihood") {
  const auto d = build_design(only_dataset(fixture(), "HRBench-4K"));
  for (double lambda : {0.0, 0.3, 2.0, 40.0}) {
    const auto fit = fit_at_lambda(d, lambda);
    const auto dense = dense_ml(d, lambda);
    CHECK((fit.beta - dense.beta).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK(fit.sigma2_e == doctest::Approx(dense.sigma2).epsilon(1e-10));
    CHECK(fit.deviance == doctest::Approx(dense.deviance).epsilon(1e-10));
  }
  const auto best = fit_lmm(d);
  CHECK(best.unimodal);
  for (double f : {0.9, 0.99, 1.01, 1.1})
    CHECK(dense_ml(d, best.lambda * f).deviance >= best.deviance - 1e-7);
}

TEST_CASE("constant response") {
  Grid g = simulated(1, 4, 1.0, 1.0, kBeta);
  for (auto& c : g) c.accuracy = 0.42;
  const auto fit = fit_lmm(build_design(g));
  CHECK(fit.beta(0) == doctest::Approx(42.0));
  CHECK(fit.beta.tail(8).cwiseAbs().maxCoeff() <= 1e-9);
  CHECK(fit.se.cwiseAbs().maxCoeff() <= 1e-9);
  CHECK(!fit.diagnostics.empty());
}

TEST_CASE("shifting the response moves only the intercept") {
  Grid g = simulated(2, 8, 4.0, 1.0, kBeta);
  const auto a = fit_lmm(build_design(g));
  for (auto& c : g) c.accuracy += 0.05;
  const auto b = fit_lmm(build_design(g));
  CHECK(b.beta(0) - a.beta(0) == doctest::Approx(5.0).epsilon(1e-6));
  CHECK((b.beta.tail(8) - a.beta.tail(8)).cwiseAbs().maxCoeff() <= 1e-6);
  CHECK(b.sigma2_u == doctest::Approx(a.sigma2_u).epsilon(1e-6));
  CHECK(b.sigma2_e == doctest::Approx(a.sigma2_e).epsilon(1e-6));
}

TEST_CASE("rank-deficient designs are rejected") {
  Grid g;
  for (const auto& c : simulated(4, 5, 1.0, 1.0, kBeta))
    if (c.format.id_set == OptionIdSet::Uppercase) g.push_back(c);
  CHECK_THROWS_AS(fit_lmm(build_design(g)), LmmError);
  CHECK_THROWS_AS(build_design(Grid{}), LmmError);
}

TEST_CASE("single group falls back to lambda zero") {
  const auto fit = fit_lmm(build_design(simulated(5, 1, 4.0, 1.0, kBeta)));
  CHECK(fit.lambda == 0.0);
  CHECK(fit.groups == 1);
  CHECK(!fit.diagnostics.empty());
}

TEST_CASE("wald intervals") {
  const auto ci = wald_ci(10.0, 2.0);
  CHECK(ci.lo == doctest::Approx(6.08).epsilon(1e-3));
  CHECK(ci.hi == doctest::Approx(13.92).epsilon(1e-3));
  CHECK(ci.lo == doctest::Approx(10.0 - 2.0 * kZ95));
  const auto ci90 = wald_ci(0.0, 1.0, 0.90);
  CHECK(ci90.hi == doctest::Approx(1.644854).epsilon(1e-6));
  CHECK(wald_ci(3.0, 0.0).lo == 3.0);
  CHECK_THROWS_AS(wald_ci(1.0, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(wald_ci(1.0, 1.0, 1.0), std::invalid_argument);
}

TEST_CASE("variance components recovered by simulation") {
  std::vector<double> s2u, s2e;
  for (unsigned seed = 1; seed <= 100; ++seed) {
    const auto d = build_design(simulated(seed, 35, 4.0, 1.0, kBeta));
    const auto ml = fit_lmm(d);
    s2u.push_back(ml.sigma2_u);
    s2e.push_back(ml.sigma2_e);

    // Balanced one-way layout: REML agrees with the ANOVA moment estimates.
    const auto n = d.x.rows();
    const Eigen::Index groups = 35, per = 48;
    Eigen::MatrixXd full(n, d.x.cols() - 1 + groups);
    full << d.x.rightCols(d.x.cols() - 1), Eigen::MatrixXd::Zero(n, groups);
    for (Eigen::Index i = 0; i < n; ++i)
      full(i, d.x.cols() - 1 + static_cast<Eigen::Index>(d.group[static_cast<std::size_t>(i)])) = 1.0;
    const Eigen::VectorXd b = full.colPivHouseholderQr().solve(d.y);
    const double mse =
        (d.y - full * b).squaredNorm() / static_cast<double>(n - full.cols());
    Eigen::VectorXd means = Eigen::VectorXd::Zero(groups);
    for (Eigen::Index i = 0; i < n; ++i) means(static_cast<Eigen::Index>(d.group[static_cast<std::size_t>(i)])) += d.y(i) / per;
    const double msb = per * (means.array() - means.mean()).square().sum() / (groups - 1);
    const double mom_u = (msb - mse) / per;
    FitOptions reml;
    reml.criterion = Criterion::REML;
    const auto r = fit_lmm(d, reml);
    CHECK(r.sigma2_e == doctest::Approx(mse).epsilon(1e-6));
    if (mom_u > 0) CHECK(r.sigma2_u == doctest::Approx(mom_u).epsilon(1e-5));
    for (Eigen::Index j = 1; j < d.x.cols(); ++j)
      CHECK(r.beta(j) == doctest::Approx(b(j - 1)).epsilon(1e-6));
  }
  CHECK(std::abs(median(s2u) - 4.0) <= 1.0);
  CHECK(std::abs(median(s2e) - 1.0) <= 0.25);
}

TEST_CASE("fixture fit matches the external reference") {
  const auto fit = fit_lmm(build_design(fixture()));
  const auto fx = fixed_effects(fit);
  auto effect = [&](std::string_view name) {
    return *std::find_if(fx.begin(), fx.end(), [&](const auto& e) { return e.level == name; });
  };
  CHECK(effect("numbers").estimate == doctest::Approx(-9.811).epsilon(1e-3));
  CHECK(effect("uppercase").estimate == doctest::Approx(6.041).epsilon(1e-3));
  CHECK(effect("double_brackets").estimate == doctest::Approx(-5.921).epsilon(1e-3));
  CHECK(effect("double_brackets").se == doctest::Approx(0.946).epsilon(1e-3));
  CHECK(effect("numbers").significant);
  CHECK(!effect("colon").significant);
  CHECK(fit.unimodal);
  const auto csv = write_effects_csv(fx);
  CHECK(csv.starts_with("level,estimate_pp,se,ci_lo,ci_hi,significant\nintercept,"));
}
