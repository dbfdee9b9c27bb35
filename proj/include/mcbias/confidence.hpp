#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mcbias/dataset.hpp"
#include "mcbias/prompt_grammar.hpp"
#include "mcbias/run_matrix.hpp"

namespace mcbias {

enum class ConfidenceBin { Top20, Middle60, Bottom20 };

std::string_view to_string(ConfidenceBin b);

/// Log-probability of the gold ID's first token at the first generated
/// position, -inf when the ID is not among the listed alternatives. Throws
/// BackendError(CapabilityMissing) when the record has no log-probabilities.
double gold_confidence(const RunRecord& record, std::string_view gold_id);

struct QuestionConfidence {
  std::string id;
  double confidence = 0.0;
  ConfidenceBin bin = ConfidenceBin::Middle60;
};

struct ConfidenceBinning {
  PromptFormat reference;
  std::vector<QuestionConfidence> questions;  // most confident first

  std::size_t count(ConfidenceBin b) const;
  std::map<std::string, ConfidenceBin> bins() const;
};

/// Descending by confidence, ties by id; the first ceil(n/5) are Top20, the
/// last floor(n/5) Bottom20. Throws std::invalid_argument for n < 5.
ConfidenceBinning bin_questions(const std::map<std::string, double>& confidences,
                                const PromptFormat& reference = {});

/// Gold confidence of each question's unrotated instance under `reference`.
std::map<std::string, double> question_confidences(std::span<const RunRecord> records,
                                                   const Dataset& dataset,
                                                   std::string_view model,
                                                   const PromptFormat& reference);

struct BinAccuracy {
  ConfidenceBin bin = ConfidenceBin::Middle60;
  PromptFormat format;
  std::size_t n = 0;  // rotated instances
  std::size_t correct = 0;
  double accuracy = 0.0;
};

/// Fraction correct over all rotations of each bin's questions, per format.
/// Throws std::invalid_argument when an instance has no successful record.
std::vector<BinAccuracy> per_bin_accuracy(const ConfidenceBinning& binning,
                                          std::span<const RunRecord> records,
                                          const Dataset& dataset, std::string_view model,
                                          std::span<const PromptFormat> formats);

/// bin,format,n,accuracy
std::string write_bin_report_csv(std::span<const BinAccuracy> rows);

}  // namespace mcbias
