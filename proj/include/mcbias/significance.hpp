#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mcbias/metrics.hpp"
#include "mcbias/prompt_grammar.hpp"

namespace mcbias {

class LmmError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BaseLevels {
  OptionIdSet id_set = OptionIdSet::Lowercase;
  OptionDelimiter delimiter = OptionDelimiter::Bracket;
  OptionSeparator separator = OptionSeparator::Comma;
};

// Response in percentage points, intercept plus one dummy column per
// non-base level, and a group index per row.
struct LmmDesign {
  Eigen::VectorXd y;
  Eigen::MatrixXd x;
  std::vector<std::size_t> group;
  std::vector<std::string> group_names;
  std::vector<std::string> columns;  // "intercept", then level names
};

/// One row per cell, grouped by "model:dataset". Column order: ID sets,
/// delimiters, separators, each in enumeration order with the base omitted.
LmmDesign build_design(const Grid& grid, const BaseLevels& base = {});

enum class Criterion { ML, REML };

struct FitOptions {
  Criterion criterion = Criterion::ML;
  double log10_lambda_lo = -8.0;
  double log10_lambda_hi = 8.0;
  double tolerance = 1e-10;
  std::size_t max_iterations = 500;
};

struct LmmFit {
  std::vector<std::string> columns;
  Eigen::VectorXd beta;
  Eigen::VectorXd se;
  Eigen::MatrixXd covariance;
  double lambda = 0.0;  // sigma2_u / sigma2_e
  double sigma2_e = 0.0;
  double sigma2_u = 0.0;
  double deviance = 0.0;  // -2 log-likelihood (restricted for REML)
  Criterion criterion = Criterion::ML;
  std::size_t rows = 0;
  std::size_t groups = 0;
  std::size_t iterations = 0;
  bool unimodal = true;
  std::vector<std::string> diagnostics;

  double log_likelihood() const { return -0.5 * deviance; }
};

/// GLS fit with the variance ratio held at `lambda` (>= 0).
LmmFit fit_at_lambda(const LmmDesign& design, double lambda,
                     Criterion criterion = Criterion::ML);

/// Profiled fit: golden-section search of the deviance over log10(lambda).
/// Throws LmmError for a rank-deficient design, fewer rows than columns or
/// a search that fails to converge.
LmmFit fit_lmm(const LmmDesign& design, const FitOptions& options = {});

inline constexpr double kZ95 = 1.959964;

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double v) const { return lo <= v && v <= hi; }
};

/// estimate +/- z * se. Throws std::invalid_argument for se < 0 or a level
/// outside (0, 1).
Interval wald_ci(double estimate, double se, double level = 0.95);

struct FixedEffectEstimate {
  std::string level;
  double estimate = 0.0;  // pp
  double se = 0.0;
  Interval ci;
  bool significant = false;  // interval excludes 0
};

std::vector<FixedEffectEstimate> fixed_effects(const LmmFit& fit, double level = 0.95);

/// level,estimate_pp,se,ci_lo,ci_hi,significant
std::string write_effects_csv(const std::vector<FixedEffectEstimate>& effects);

}  // namespace mcbias
