#include "mcbias/significance.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include <fmt/format.h>

namespace mcbias {

LmmDesign build_design(const Grid& grid, const BaseLevels& base) {
  if (grid.empty()) throw LmmError("cannot build a design from an empty grid");
  LmmDesign d;
  d.columns.push_back("intercept");
  for (auto v : kIdSetOrder)
    if (v != base.id_set) d.columns.emplace_back(to_string(v));
  for (auto v : kDelimiterOrder)
    if (v != base.delimiter) d.columns.emplace_back(to_string(v));
  for (auto v : kSeparatorOrder)
    if (v != base.separator) d.columns.emplace_back(to_string(v));

  const auto n = static_cast<Eigen::Index>(grid.size());
  d.y.resize(n);
  d.x = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(d.columns.size()));
  std::map<std::string, std::size_t> groups;
  for (const auto& c : grid) groups.emplace(c.model + ":" + c.dataset, 0);
  for (auto& [name, idx] : groups) {
    idx = d.group_names.size();
    d.group_names.push_back(name);
  }
  auto column = [&](std::string_view name) {
    return static_cast<Eigen::Index>(
        std::find(d.columns.begin(), d.columns.end(), name) - d.columns.begin());
  };
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& c = grid[static_cast<std::size_t>(i)];
    if (!std::isfinite(c.accuracy)) throw LmmError("non-finite accuracy in grid");
    d.y(i) = 100.0 * c.accuracy;
    d.x(i, 0) = 1.0;
    if (c.format.id_set != base.id_set) d.x(i, column(to_string(c.format.id_set))) = 1.0;
    if (c.format.delimiter != base.delimiter)
      d.x(i, column(to_string(c.format.delimiter))) = 1.0;
    if (c.format.separator != base.separator)
      d.x(i, column(to_string(c.format.separator))) = 1.0;
    d.group.push_back(groups.at(c.model + ":" + c.dataset));
  }
  return d;
}

namespace {

struct GroupStats {
  std::vector<std::vector<Eigen::Index>> rows;
  std::vector<Eigen::MatrixXd> xtx;
  std::vector<Eigen::VectorXd> xty;
  std::vector<Eigen::VectorXd> xt1;
  std::vector<double> ty;
};

GroupStats group_stats(const LmmDesign& d) {
  GroupStats s;
  std::size_t g_count = 0;
  for (auto g : d.group) g_count = std::max(g_count, g + 1);
  s.rows.resize(g_count);
  for (std::size_t i = 0; i < d.group.size(); ++i)
    s.rows[d.group[i]].push_back(static_cast<Eigen::Index>(i));
  const auto p = d.x.cols();
  for (const auto& rows : s.rows) {
    Eigen::MatrixXd xg(static_cast<Eigen::Index>(rows.size()), p);
    Eigen::VectorXd yg(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      xg.row(static_cast<Eigen::Index>(r)) = d.x.row(rows[r]);
      yg(static_cast<Eigen::Index>(r)) = d.y(rows[r]);
    }
    s.xtx.push_back(xg.transpose() * xg);
    s.xty.push_back(xg.transpose() * yg);
    s.xt1.push_back(xg.colwise().sum().transpose());
    s.ty.push_back(yg.sum());
  }
  return s;
}

void check_design(const LmmDesign& d) {
  const auto n = d.x.rows();
  const auto p = d.x.cols();
  if (d.y.size() != n || static_cast<Eigen::Index>(d.group.size()) != n)
    throw LmmError("design rows, response and group index differ in length");
  if (n < p)
    throw LmmError(fmt::format("design has {} rows for {} fixed-effect columns", n, p));
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(d.x);
  if (qr.rank() < p)
    throw LmmError(fmt::format("fixed-effect matrix is rank deficient (rank {} of {})",
                               qr.rank(), p));
}

bool constant_response(const Eigen::VectorXd& y) {
  const double scale = std::max(1.0, y.cwiseAbs().maxCoeff());
  return y.maxCoeff() - y.minCoeff() <= 1e-12 * scale;
}

LmmFit evaluate(const LmmDesign& d, const GroupStats& s, double lambda, Criterion criterion) {
  const auto n = d.x.rows();
  const auto p = d.x.cols();
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
  double logdet_v = 0.0;
  std::vector<double> w(s.rows.size());
  for (std::size_t g = 0; g < s.rows.size(); ++g) {
    const double ng = static_cast<double>(s.rows[g].size());
    w[g] = lambda / (1.0 + lambda * ng);
    a += s.xtx[g] - w[g] * s.xt1[g] * s.xt1[g].transpose();
    b += s.xty[g] - w[g] * s.ty[g] * s.xt1[g];
    logdet_v += std::log1p(lambda * ng);
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
  LmmFit fit;
  fit.columns = d.columns;
  fit.beta = ldlt.solve(b);
  fit.lambda = lambda;
  fit.criterion = criterion;
  fit.rows = static_cast<std::size_t>(n);
  fit.groups = s.rows.size();

  const Eigen::VectorXd e = d.y - d.x * fit.beta;
  double quad = 0.0;
  for (std::size_t g = 0; g < s.rows.size(); ++g) {
    double sum = 0.0, sq = 0.0;
    for (auto r : s.rows[g]) {
      sum += e(r);
      sq += e(r) * e(r);
    }
    quad += sq - w[g] * sum * sum;
  }
  quad = std::max(quad, 0.0);
  const double dof = criterion == Criterion::ML ? static_cast<double>(n)
                                                : static_cast<double>(n - p);
  fit.sigma2_e = quad / dof;
  fit.sigma2_u = lambda * fit.sigma2_e;
  fit.deviance = dof * (std::log(2.0 * std::numbers::pi * fit.sigma2_e) + 1.0) + logdet_v;
  if (criterion == Criterion::REML) {
    const auto& dd = ldlt.vectorD();
    for (Eigen::Index i = 0; i < dd.size(); ++i) fit.deviance += std::log(dd(i));
  }
  fit.covariance = fit.sigma2_e * ldlt.solve(Eigen::MatrixXd::Identity(p, p));
  fit.se = fit.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  return fit;
}

LmmFit constant_fit(const LmmDesign& d, Criterion criterion, std::size_t groups) {
  LmmFit fit;
  fit.columns = d.columns;
  const auto p = d.x.cols();
  fit.beta = Eigen::VectorXd::Zero(p);
  fit.beta(0) = d.y(0);
  fit.se = Eigen::VectorXd::Zero(p);
  fit.covariance = Eigen::MatrixXd::Zero(p, p);
  fit.criterion = criterion;
  fit.rows = static_cast<std::size_t>(d.x.rows());
  fit.groups = groups;
  fit.deviance = -std::numeric_limits<double>::infinity();
  fit.diagnostics.push_back("constant response: effects are 0 and variance components are 0");
  return fit;
}

}  // namespace

LmmFit fit_at_lambda(const LmmDesign& design, double lambda, Criterion criterion) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw std::invalid_argument("variance ratio must be finite and non-negative");
  check_design(design);
  const auto stats = group_stats(design);
  if (constant_response(design.y)) return constant_fit(design, criterion, stats.rows.size());
  return evaluate(design, stats, lambda, criterion);
}

LmmFit fit_lmm(const LmmDesign& design, const FitOptions& options) {
  check_design(design);
  const auto stats = group_stats(design);
  if (constant_response(design.y))
    return constant_fit(design, options.criterion, stats.rows.size());

  std::size_t nonempty = 0;
  for (const auto& r : stats.rows)
    if (!r.empty()) ++nonempty;
  if (nonempty < 2) {
    auto fit = evaluate(design, stats, 0.0, options.criterion);
    fit.diagnostics.push_back(
        "single group: random intercept variance is not identifiable, fitted with lambda = 0");
    return fit;
  }

  const double lo = options.log10_lambda_lo;
  const double hi = options.log10_lambda_hi;
  if (!(lo < hi)) throw std::invalid_argument("empty log10(lambda) search bracket");
  auto deviance = [&](double t) {
    return evaluate(design, stats, std::pow(10.0, t), options.criterion).deviance;
  };

  // Coarse scan for the unimodality check.
  constexpr int kScan = 65;
  std::vector<double> scan(kScan);
  for (int i = 0; i < kScan; ++i) scan[i] = deviance(lo + (hi - lo) * i / (kScan - 1));
  int direction_changes = 0;
  int last_sign = 0;
  for (int i = 1; i < kScan; ++i) {
    const double delta = scan[i] - scan[i - 1];
    if (std::abs(delta) <= options.tolerance) continue;
    const int sign = delta > 0 ? 1 : -1;
    if (last_sign != 0 && sign != last_sign) ++direction_changes;
    last_sign = sign;
  }
  const bool unimodal = direction_changes <= 1 && !(direction_changes == 1 && last_sign < 0);

  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - inv_phi * (b - a), dd = a + inv_phi * (b - a);
  double fc = deviance(c), fd = deviance(dd);
  std::size_t iter = 0;
  bool converged = false;
  for (; iter < options.max_iterations; ++iter) {
    if (b - a < 1e-9 || (std::abs(fc - fd) < options.tolerance && b - a < 1e-6)) {
      converged = true;
      break;
    }
    if (fc <= fd) {
      b = dd;
      dd = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = deviance(c);
    } else {
      a = c;
      c = dd;
      fc = fd;
      dd = a + inv_phi * (b - a);
      fd = deviance(dd);
    }
  }
  if (!converged)
    throw LmmError(fmt::format("log10(lambda) search did not converge; bracket [{}, {}]", a, b));

  double t = 0.5 * (a + b);
  // The bracket ends are candidates too: the optimum may sit on the boundary.
  const double f_mid = deviance(t);
  if (scan.front() < f_mid) t = lo;
  if (scan.back() < std::min(f_mid, scan.front())) t = hi;

  auto fit = evaluate(design, stats, std::pow(10.0, t), options.criterion);
  fit.iterations = iter;
  fit.unimodal = unimodal;
  if (!unimodal)
    fit.diagnostics.push_back("deviance is not unimodal on the log10(lambda) bracket");
  if (t - lo < 1e-3)
    fit.diagnostics.push_back(fmt::format(
        "variance ratio at the lower search bound (log10 lambda = {}): group variance ~ 0", lo));
  if (hi - t < 1e-3)
    fit.diagnostics.push_back(fmt::format(
        "variance ratio at the upper search bound (log10 lambda = {}): residual variance ~ 0",
        hi));
  return fit;
}

namespace {

double z_for_level(double level) {
  if (!(level > 0.0 && level < 1.0))
    throw std::invalid_argument("confidence level must lie in (0, 1)");
  if (level == 0.95) return kZ95;
  // Solve erfc(z / sqrt 2) = 1 - level by bisection.
  double lo = 0.0, hi = 40.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (std::erfc(mid / std::numbers::sqrt2) > 1.0 - level) lo = mid;
    else hi = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

Interval wald_ci(double estimate, double se, double level) {
  if (!(se >= 0.0)) throw std::invalid_argument("standard error must be non-negative");
  const double z = z_for_level(level);
  return {estimate - z * se, estimate + z * se};
}

std::vector<FixedEffectEstimate> fixed_effects(const LmmFit& fit, double level) {
  std::vector<FixedEffectEstimate> out;
  for (std::size_t i = 0; i < fit.columns.size(); ++i) {
    FixedEffectEstimate e;
    e.level = fit.columns[i];
    e.estimate = fit.beta(static_cast<Eigen::Index>(i));
    e.se = fit.se(static_cast<Eigen::Index>(i));
    e.ci = wald_ci(e.estimate, e.se, level);
    e.significant = !e.ci.contains(0.0);
    out.push_back(e);
  }
  return out;
}

std::string write_effects_csv(const std::vector<FixedEffectEstimate>& effects) {
  std::string out = "level,estimate_pp,se,ci_lo,ci_hi,significant\n";
  for (const auto& e : effects)
    out += fmt::format("{},{:.6f},{:.6f},{:.6f},{:.6f},{}\n", e.level, e.estimate, e.se,
                       e.ci.lo, e.ci.hi, e.significant ? "true" : "false");
  return out;
}

}  // namespace mcbias
