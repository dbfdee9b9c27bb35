#pragma once

#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mcbias/dataset.hpp"
#include "mcbias/metrics.hpp"
#include "mcbias/model_backend.hpp"
#include "mcbias/prompt_grammar.hpp"

namespace mcbias {

struct PlannedCell {
  std::string model;
  std::string dataset;
  PromptFormat format;
  std::size_t instances = 0;
};

struct RunPlan {
  std::vector<PlannedCell> cells;
  std::size_t total_requests = 0;
};

struct DatasetSize {
  std::string name;
  std::size_t circular_instances = 0;
};

/// Cells in model, dataset, format order; one request per rotated instance.
RunPlan plan_runs(std::span<const std::string> models,
                  std::span<const DatasetSize> datasets,
                  std::span<const PromptFormat> formats);

RunPlan plan_runs(std::span<const std::string> models,
                  std::span<const Dataset* const> datasets,
                  std::span<const PromptFormat> formats);

// One model response for one rotated instance under one format. Error
// records carry the failure class and are superseded by a later success.
struct RunRecord {
  std::string model;
  std::string dataset;
  PromptFormat format;
  std::string source_id;
  std::size_t rotation = 0;
  std::string prompt_digest;
  std::string output;
  std::optional<std::vector<TokenLogprob>> token_logprobs;
  std::string timestamp;
  std::optional<ErrorClass> error;
  std::string error_message;
  std::size_t attempts = 1;

  bool ok() const { return !error.has_value(); }
};

std::string record_key(const RunRecord& r);
std::string record_key(std::string_view model, std::string_view dataset,
                       const PromptFormat& format, std::string_view source_id,
                       std::size_t rotation);

// Field-wise equality, optionally ignoring the timestamp.
bool same_record(const RunRecord& a, const RunRecord& b, bool ignore_timestamp = true);

std::string serialize_run_record(const RunRecord& r);
RunRecord parse_run_record(std::string_view line);

/// Append-only line-delimited record store in a directory.
class RunCache {
 public:
  explicit RunCache(std::filesystem::path dir);
  ~RunCache();
  RunCache(const RunCache&) = delete;
  RunCache& operator=(const RunCache&) = delete;

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path records_path() const { return dir_ / "records.jsonl"; }

  // Unparseable lines (a torn final write after a crash) are skipped and
  // counted.
  std::vector<RunRecord> load(std::size_t* skipped_lines = nullptr) const;

  void append(const RunRecord& r);
  void flush();

  // Rewrites the store with one record per key in key order, preferring
  // successes over failures and later lines over earlier ones.
  void compact();

 private:
  void open_for_append();

  std::filesystem::path dir_;
  std::FILE* out_ = nullptr;
};

struct CellStatus {
  std::string model;
  std::string dataset;
  PromptFormat format;
  std::size_t planned = 0;
  std::size_t succeeded = 0;
  std::size_t failed = 0;

  bool complete() const { return succeeded == planned; }
};

struct ExecuteReport {
  std::size_t skipped = 0;  // already present in the cache
  std::size_t issued = 0;
  std::size_t succeeded = 0;
  std::size_t failed = 0;
  std::vector<CellStatus> cells;
  bool stopped = false;

  std::vector<CellStatus> incomplete_cells() const;
  bool complete() const { return !stopped && incomplete_cells().empty(); }
};

struct ExecuteOptions {
  std::size_t max_inflight = 4;
  std::size_t max_attempts = 2;  // per request, retryable errors only
  PromptLayout layout;
  bool compact = true;
  // Polled by workers before each request; true stops new requests.
  std::function<bool()> should_stop;
  std::function<std::string()> clock;  // timestamp source; UTC ISO-8601 by default
};

/// Issues every planned request not already in the cache. A bounded pool of
/// workers calls the backends; this thread is the only cache writer.
ExecuteReport execute(const RunPlan& plan, std::span<const Dataset* const> datasets,
                      const BackendRegistry& backends, RunCache& cache,
                      const ExecuteOptions& options = {},
                      const std::function<void(const RunRecord&)>& on_record = {});

struct AggregateResult {
  Grid cells;
  std::vector<CellStatus> incomplete;
};

/// Groups successful records into one EvalCell per (model, dataset, format).
/// Cells missing any rotated instance of their dataset are excluded and
/// reported.
AggregateResult aggregate(std::span<const RunRecord> records,
                          std::span<const Dataset* const> datasets);

std::string utc_timestamp();

}  // namespace mcbias
