#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mcbias/metrics.hpp"
#include "mcbias/model_backend.hpp"
#include "mcbias/significance.hpp"

namespace mcbias {

class FixtureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kFixtureModels = 7;

/// Reads a published grid (percent scale) and checks that every dataset has
/// exactly 7 models x 48 formats with values in [0, 100]. When a sibling
/// "<file>.fnv1a64" exists its digest must match the file contents.
Grid ingest_published_grid(const std::filesystem::path& path);

/// FNV-1a digest of the file bytes, as written to the checksum sidecar.
std::string fixture_digest(const std::filesystem::path& path);

// Five-number summary with R type-7 quartiles.
struct BoxStats {
  double min = 0.0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double max = 0.0;
};

/// Linear-interpolation quantile (R type 7) of unsorted values.
double quantile7(std::vector<double> values, double p);
BoxStats box_stats(std::span<const double> values);

struct ModelRankBox {
  std::string model;
  std::vector<int> ranks;  // one per format
  BoxStats box;
};

std::vector<ModelRankBox> rank_boxes(const Grid& grid, std::string_view dataset);
std::string rank_boxplot_svg(const Grid& grid, std::string_view dataset);

// Model x level deviations from each model's mean accuracy, in pp.
struct DeviationMatrix {
  std::string dataset;
  std::vector<std::string> models;
  std::vector<FormatLevel> levels;
  std::vector<std::vector<std::optional<double>>> values;  // [model][level]
  bool coverage_filtered = false;
};

/// Unfiltered matrices require complete model grids; filtered ones drop
/// cells below the coverage threshold first and leave empty levels unset.
DeviationMatrix deviation_matrix(const Grid& grid, std::string_view dataset,
                                 bool coverage_filtered);
std::string deviation_heatmap_svg(const DeviationMatrix& m);

/// dataset,model,level,deviation_pp (NA for unset entries)
std::string write_deviation_csv(const DeviationMatrix& m);
/// dataset,model,separator,delimiter,id_set,rank
std::string write_rank_csv(const Grid& grid, std::string_view dataset);

/// Horizontal bars with 95% interval whiskers; the intercept is omitted.
std::string effects_bar_svg(std::span<const FixedEffectEstimate> effects);

}  // namespace mcbias
