#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mcbias/model_backend.hpp"
#include "mcbias/prompt_grammar.hpp"

namespace mcbias {

// Aggregate statistics of one (model, dataset, format) evaluation. Accuracy
// and coverage are fractions in [0, 1]. Position vectors are indexed by
// option position and may be empty for cells imported from published grids.
struct EvalCell {
  std::string model;
  std::string dataset;
  PromptFormat format;
  std::size_t n = 0;
  double accuracy = 0.0;
  double coverage = 0.0;
  std::vector<std::size_t> position_selected;  // s_i
  std::vector<std::size_t> position_present;   // n_i
  std::vector<std::size_t> position_correct;   // C_i
};

using Grid = std::vector<EvalCell>;

// Whitespace-trimmed view of a model output.
std::string_view trim_output(std::string_view output);

/// True iff the trimmed output equals the gold ID byte for byte.
bool exact_match(std::string_view output, std::string_view gold_id);

/// Fraction of trimmed outputs that are members of `ids`. Throws
/// std::invalid_argument for an empty output list.
double coverage(std::span<const std::string> outputs,
                std::span<const std::string> ids);

// Normalized answer frequencies over option positions. Positions that never
// appear (n_i = 0) hold nullopt. When no position was ever selected all
// present entries are 0 and no_valid_answers is set.
struct AnswerFrequencies {
  std::vector<std::optional<double>> normalized;
  bool no_valid_answers = false;
};

AnswerFrequencies answer_frequencies(std::span<const std::size_t> selected,
                                     std::span<const std::size_t> present);

/// "1224" competition ranks, higher score ranks better (1).
std::vector<int> competition_ranks(std::span<const double> scores);

// Sorted, de-duplicated model / dataset names in a grid.
std::vector<std::string> grid_models(const Grid& grid);
std::vector<std::string> grid_datasets(const Grid& grid);

// Cells of (model, dataset), indexed by format_index(); missing formats are
// nullptr.
std::vector<const EvalCell*> cells_by_format(const Grid& grid,
                                             std::string_view model,
                                             std::string_view dataset);

class MissingCellsError : public std::runtime_error {
 public:
  MissingCellsError(const std::string& what, std::vector<std::string> missing)
      : std::runtime_error(what), missing_(std::move(missing)) {}
  const std::vector<std::string>& missing() const { return missing_; }

 private:
  std::vector<std::string> missing_;
};

// Throws MissingCellsError naming every absent format.
std::vector<const EvalCell*> complete_cells(const Grid& grid,
                                            std::string_view model,
                                            std::string_view dataset);

struct LevelDeviation {
  FormatLevel level;
  // Mean accuracy of the level's cells minus the overall mean, in pp.
  // nullopt when no cell of the level is available.
  std::optional<double> deviation_pp;
  std::size_t cells = 0;
};

/// Per-level deviation from the 48-cell mean accuracy, in all_levels()
/// order. Requires all 48 cells.
std::vector<LevelDeviation> deviation_from_mean(const Grid& grid,
                                                std::string_view model,
                                                std::string_view dataset);

/// Same over whichever cells are present (e.g. after coverage filtering).
std::vector<LevelDeviation> deviation_from_mean_available(const Grid& grid,
                                                          std::string_view model,
                                                          std::string_view dataset);

struct CoverageFilterResult {
  Grid kept;
  Grid removed;
};

inline constexpr double kCoverageThreshold = 0.75;

/// Removes cells whose coverage is strictly below `threshold`.
CoverageFilterResult coverage_filter(const Grid& grid,
                                     double threshold = kCoverageThreshold);

// Competition ranks of every model, per format, for one dataset.
struct RankTable {
  std::vector<std::string> models;
  // ranks[format_index][model_index]
  std::vector<std::vector<int>> ranks;
};

RankTable rank_table(const Grid& grid, std::string_view dataset);

// Grid text interchange: header row naming model, dataset, separator,
// delimiter, id_set, accuracy, coverage (any column order); accuracy and
// coverage in percent.
std::string write_grid_csv(const Grid& grid);
Grid read_grid_csv(std::string_view text);
Grid read_grid_csv_file(const std::string& path);

// Splits one line of comma-delimited text (no quoting).
std::vector<std::string_view> split_csv_line(std::string_view line);

}  // namespace mcbias
