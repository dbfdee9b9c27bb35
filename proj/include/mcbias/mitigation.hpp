#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mcbias/dataset.hpp"
#include "mcbias/metrics.hpp"
#include "mcbias/model_backend.hpp"
#include "mcbias/run_matrix.hpp"

namespace mcbias {

// Raised for inputs a method cannot handle, e.g. PriDe or PIA on a dataset
// whose questions have different option counts.
class UnsupportedDatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kPriorFloor = 1e-12;

/// Position-invariant accuracy: (1/M) sum_i (C_i / Pr_i)(C_i / N). A term
/// with Pr_i = 0 contributes 0. Throws std::invalid_argument when some
/// C_i > Pr_i, sum C_i > N or M < 2.
double pia(std::span<const std::size_t> position_correct,
           std::span<const std::size_t> position_selected, std::size_t n,
           std::size_t m);

struct PriorVector {
  std::vector<double> p;
};

/// Mean of the per-ID observed probability vectors (one per calibration
/// question and rotation), floored at `floor` and renormalized. Throws
/// UnsupportedDatasetError when the vectors differ in length.
PriorVector pride_prior(std::span<const std::vector<double>> observed,
                        double floor = kPriorFloor);

/// argmax_i observed_i / prior_i, lowest index on ties.
std::size_t pride_debias(std::span<const double> observed, const PriorVector& prior);

/// exp(-mean(logprobs)).
double perplexity(std::span<const double> token_logprobs);

/// argmin, lowest index on ties.
std::size_t cp_ln_select(std::span<const double> per_option_ppl);

// Per-model mean accuracy over all 48 formats and its competition ranks.
struct PseudoGroundTruth {
  std::string dataset;
  std::vector<std::string> models;
  std::vector<double> mean_accuracy;  // fraction
  std::vector<int> ranks;
};

PseudoGroundTruth pseudo_gt(const Grid& grid, std::string_view dataset);

/// Spearman correlation of two rankings. Uses 1 - 6 sum d^2 / (n(n^2-1))
/// when neither side has ties, otherwise Pearson correlation of average
/// ranks.
double spearman(std::span<const double> ranks_a, std::span<const double> ranks_b);
double spearman(std::span<const int> ranks_a, std::span<const int> ranks_b);

std::size_t correctly_ranked(std::span<const int> method_ranks,
                             std::span<const int> reference_ranks);

// ---------------------------------------------------------------------------
// Scorecard

enum class Method { PseudoGt, Vanilla, Pia, PriDe, CpLn };

std::string_view to_string(Method m);
std::optional<Method> parse_method(std::string_view s);

// Forward passes per method for N questions with `circular` rotated
// instances under P formats.
std::size_t method_complexity(Method m, std::size_t questions, std::size_t circular,
                              std::size_t formats = kFormatCount);
std::string_view complexity_class(Method m);

struct MethodColumn {
  Method method = Method::Vanilla;
  // Per model, in scorecard model order; nullopt when unsupported.
  std::vector<std::optional<double>> accuracy;
  std::vector<std::optional<int>> ranks;
  std::optional<std::size_t> complexity;  // forward passes
  std::string complexity_class;
  std::optional<double> correlation;        // vs pseudo GT
  std::optional<std::size_t> correctly_ranked;
  std::string note;
};

struct Scorecard {
  std::string dataset;
  std::vector<std::string> models;
  MethodColumn reference;  // pseudo GT
  std::vector<MethodColumn> methods;
};

/// Ranks each method's accuracies and compares them with the reference.
/// Methods with any missing accuracy get no ranks or comparison.
Scorecard build_scorecard(std::string dataset, std::vector<std::string> models,
                          std::vector<double> reference_accuracy,
                          std::vector<MethodColumn> methods);

/// dataset,method,model,accuracy,rank,complexity,forward_passes,correlation,
/// correctly_ranked,note
std::string write_scorecard_csv(const Scorecard& card);

// Published per-method accuracies: dataset,method,model,accuracy,rank.
struct PublishedMethodTable {
  // dataset -> method -> model -> (accuracy pp, printed rank)
  std::map<std::string, std::map<Method, std::map<std::string, std::pair<double, int>>>> rows;
};

PublishedMethodTable read_published_methods(std::string_view csv_text);
PublishedMethodTable read_published_methods_file(const std::string& path);

// ---------------------------------------------------------------------------
// Live mitigation from run records.

/// Normalized probabilities of each ID's first token at the first generated
/// position, read from the top alternatives; uniform when none is listed.
std::vector<double> observed_id_probabilities(const RunRecord& record,
                                              std::span<const std::string> ids);

/// Accuracy with only the unrotated instance of each question (N requests).
double vanilla_accuracy(std::span<const RunRecord> records, const Dataset& dataset,
                        std::string_view model, const PromptFormat& format);

/// PIA of a circularly evaluated cell. Throws UnsupportedDatasetError for
/// cells mixing option counts.
double pia_accuracy(const EvalCell& cell);

/// Prior from all rotations of the calibration dataset.
PriorVector pride_prior_from_records(std::span<const RunRecord> records,
                                     const Dataset& calibration, std::string_view model,
                                     const PromptFormat& format,
                                     std::optional<std::size_t> max_questions = std::nullopt,
                                     double floor = kPriorFloor);

/// Debiased accuracy on the unrotated instances of `dataset`.
double pride_accuracy(std::span<const RunRecord> records, const Dataset& dataset,
                      std::string_view model, const PromptFormat& format,
                      const PriorVector& prior);

/// Cloze prompt is the question alone; each option text is scored as its
/// continuation and the lowest-perplexity option is selected.
double cp_ln_accuracy(const Backend& backend, const Dataset& dataset);

}  // namespace mcbias
