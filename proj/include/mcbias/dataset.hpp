#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mcbias/prompt_grammar.hpp"

namespace mcbias {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct QuestionRecord {
  std::string id;
  std::optional<std::string> image_ref;
  std::string question;
  std::vector<std::string> options;
  std::size_t gold_index = 0;

  friend bool operator==(const QuestionRecord&, const QuestionRecord&) = default;
};

// Options rotated left by `rotation`; gold_position tracks the answer.
struct RotatedInstance {
  std::string source_id;
  std::size_t rotation = 0;
  std::vector<std::string> options;
  std::size_t gold_position = 0;
};

// Published statistics of a benchmark, used for sanity reporting.
struct DatasetMetadata {
  std::optional<std::size_t> expected_single;
  std::optional<std::size_t> expected_circular;
  std::optional<PromptFormat> standard_format;
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(std::string name, std::vector<QuestionRecord> records,
          DatasetMetadata metadata = {});

  const std::string& name() const { return name_; }
  const std::vector<QuestionRecord>& records() const { return records_; }
  const DatasetMetadata& metadata() const { return metadata_; }
  std::size_t size() const { return records_.size(); }

  const QuestionRecord* find(std::string_view id) const;
  // Index of the record in records(), if present.
  std::optional<std::size_t> index_of(std::string_view id) const;

  // True when every record has the same number of options.
  bool uniform_option_count() const;

 private:
  std::string name_;
  std::vector<QuestionRecord> records_;
  DatasetMetadata metadata_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

/// Throws DatasetError when a record violates its invariants.
void validate_record(const QuestionRecord& record);

/// Reads one JSON object per line: id, image (optional), question, options,
/// answer_index. Blank lines are skipped. Errors carry the 1-based line.
/// The dataset name defaults to the file stem.
Dataset load_dataset(const std::filesystem::path& path,
                     std::optional<std::string> name = std::nullopt);

Dataset parse_dataset(std::string_view text, std::string name);

std::string serialize_record(const QuestionRecord& record);

RotatedInstance rotate(const QuestionRecord& record, std::size_t rotation);

/// All k left rotations of the option list, rotation 0 first.
std::vector<RotatedInstance> circular_expand(const QuestionRecord& record);

std::size_t expanded_count(const Dataset& dataset);

/// Statistics and standard prompt format of the five benchmarks in the
/// published study, keyed by the names used in the fixture grid.
std::optional<DatasetMetadata> known_benchmark(std::string_view name);

}  // namespace mcbias
