#pragma once

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mcbias/dataset.hpp"
#include "mcbias/prompt_grammar.hpp"

namespace mcbias {

enum class ErrorClass { Transport, Refusal, CapabilityMissing, Protocol };

std::string_view to_string(ErrorClass c);

class BackendError : public std::runtime_error {
 public:
  BackendError(ErrorClass kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorClass kind() const { return kind_; }
  bool retryable() const { return kind_ == ErrorClass::Transport; }

 private:
  ErrorClass kind_;
};

struct TokenLogprob {
  std::string token;
  double logprob = 0.0;
  // Most likely alternatives at this position, including the emitted token
  // when the backend reports it.
  std::vector<std::pair<std::string, double>> top;

  friend bool operator==(const TokenLogprob&, const TokenLogprob&) = default;
};

struct Generation {
  std::string text;
  std::optional<std::vector<TokenLogprob>> token_logprobs;
};

struct Capabilities {
  bool generation = true;
  bool continuation_scoring = false;
};

// Inference contract. Implementations must be safe to call from several
// threads at once.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual Capabilities capabilities() const = 0;

  // Greedy, deterministic generation of at most max_new_tokens tokens.
  virtual Generation generate(std::string_view prompt,
                              const std::optional<std::string>& image_ref,
                              int max_new_tokens) const = 0;

  // One log-probability per continuation token, each conditioned on the
  // prompt and the preceding continuation tokens.
  virtual std::vector<double> score_continuation(
      std::string_view prompt, const std::optional<std::string>& image_ref,
      std::string_view continuation) const = 0;

  virtual std::size_t tokenizer_probe(std::string_view text) const = 0;
};

/// Largest token count over the first `count` IDs of `set`.
std::size_t max_required_tokens(const Backend& backend, OptionIdSet set,
                                std::size_t count);

// ---------------------------------------------------------------------------
// Scripted stub models.

enum class FormatFactor { IdSet, Delimiter, Separator };

// A single level of one of the three format factors.
struct FormatLevel {
  FormatFactor factor = FormatFactor::Delimiter;
  int value = 0;  // underlying enum value

  static FormatLevel of(OptionIdSet v) { return {FormatFactor::IdSet, static_cast<int>(v)}; }
  static FormatLevel of(OptionDelimiter v) { return {FormatFactor::Delimiter, static_cast<int>(v)}; }
  static FormatLevel of(OptionSeparator v) { return {FormatFactor::Separator, static_cast<int>(v)}; }

  bool matches(const PromptFormat& f) const;
  std::string name() const;
  static std::optional<FormatLevel> parse(std::string_view name);

  friend bool operator==(const FormatLevel&, const FormatLevel&) = default;
};

// The 11 factor levels in grid table order: ID sets, delimiters, separators.
std::vector<FormatLevel> all_levels();

struct FormatRule {
  FormatLevel level;
  // Fraction of questions, taken from the most confident down, that the
  // stub gets wrong under `level`.
  double top_fraction = 1.0;
};

struct StubProfile {
  enum class Kind { Oracle, PositionBiased, IdBiased, Refuser, FormatSensitive, Failing };

  Kind kind = Kind::Oracle;
  std::size_t position = 0;
  std::string text;
  FormatRule rule;

  static StubProfile oracle() { return {}; }
  static StubProfile position_biased(std::size_t p) { return {Kind::PositionBiased, p, {}, {}}; }
  static StubProfile id_biased(std::string id) { return {Kind::IdBiased, 0, std::move(id), {}}; }
  static StubProfile refuser(std::string text) { return {Kind::Refuser, 0, std::move(text), {}}; }
  static StubProfile format_sensitive(FormatRule rule) { return {Kind::FormatSensitive, 0, {}, rule}; }
  static StubProfile failing() { return {Kind::Failing, 0, {}, {}}; }

  // "oracle", "position:N", "id:X", "refuse:TEXT", "format:LEVEL[@FRACTION]",
  // "fail".
  static StubProfile parse(std::string_view spec);
  std::string describe() const;
};

struct StubOptions {
  // Probability of the gold ID is 1/k for every question instead of a
  // per-question value derived from the question id.
  bool uniform_confidence = false;
  std::size_t vocab_size = 4;
  bool continuation_scoring = true;
  std::chrono::milliseconds latency{0};
  PromptLayout layout;
};

/// Deterministic model double. Answers are a pure function of the prompt:
/// the stub recognizes prompts rendered from the datasets it was built with.
class StubBackend final : public Backend {
 public:
  StubBackend(StubProfile profile, const std::vector<const Dataset*>& datasets,
              StubOptions options = {});

  Capabilities capabilities() const override;
  Generation generate(std::string_view prompt,
                      const std::optional<std::string>& image_ref,
                      int max_new_tokens) const override;
  std::vector<double> score_continuation(
      std::string_view prompt, const std::optional<std::string>& image_ref,
      std::string_view continuation) const override;
  // Character-level tokenizer.
  std::size_t tokenizer_probe(std::string_view text) const override;

  const StubProfile& profile() const { return profile_; }

  // Probability mass the stub places on the gold ID of `question_id`.
  double gold_probability(std::string_view question_id,
                          std::size_t option_count) const;

 private:
  struct PromptFacts {
    PromptFormat format;
    std::size_t option_count = 0;
    std::size_t gold_position = 0;
    std::string question_id;
  };
  struct ClozeFacts {
    std::string question_id;
    std::string gold_text;
    std::size_t option_count = 0;
  };

  std::string choose_output(const PromptFacts& facts) const;
  std::vector<TokenLogprob> token_logprobs(const PromptFacts* facts,
                                           std::string_view text) const;

  StubProfile profile_;
  StubOptions options_;
  std::unordered_map<std::string, PromptFacts> prompts_;
  std::unordered_map<std::string, ClozeFacts> cloze_;
  std::unordered_map<std::string, bool> rule_targets_;  // question id -> fails
};

// ---------------------------------------------------------------------------
// OpenAI-compatible HTTP backend.

struct BackendConfig {
  std::string endpoint = "http://127.0.0.1:8000";
  std::string model;
  std::string api_key_env = "OPENAI_API_KEY";
  double timeout_s = 120.0;
  std::size_t max_inflight = 4;
  std::size_t max_retries = 3;
  double backoff_initial_s = 0.5;
  double backoff_max_s = 8.0;
  int top_logprobs = 5;
};

/// Reads "key = value" lines; '#' starts a comment. Unknown keys throw.
BackendConfig load_backend_config(const std::filesystem::path& path);
void apply_config_entry(BackendConfig& config, std::string_view key,
                        std::string_view value);

// Blocking counting semaphore with a runtime bound.
class InflightLimiter {
 public:
  explicit InflightLimiter(std::size_t limit) : available_(limit ? limit : 1) {}

  void acquire();
  void release();

  class Guard {
   public:
    explicit Guard(InflightLimiter& l) : l_(l) { l_.acquire(); }
    ~Guard() { l_.release(); }
    Guard(const Guard&) = delete;
    Guard& operator=(const Guard&) = delete;

   private:
    InflightLimiter& l_;
  };

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::size_t available_;
};

class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(BackendConfig config);

  Capabilities capabilities() const override;
  Generation generate(std::string_view prompt,
                      const std::optional<std::string>& image_ref,
                      int max_new_tokens) const override;
  std::vector<double> score_continuation(
      std::string_view prompt, const std::optional<std::string>& image_ref,
      std::string_view continuation) const override;
  std::size_t tokenizer_probe(std::string_view text) const override;

  const BackendConfig& config() const { return config_; }

  // Request bodies, exposed for wire-format tests.
  std::string chat_request_body(std::string_view prompt,
                                const std::optional<std::string>& image_ref,
                                int max_new_tokens) const;
  std::string echo_request_body(std::string_view text) const;

 private:
  std::string post(const std::string& path, const std::string& body) const;

  BackendConfig config_;
  std::string scheme_host_port_;
  std::string base_path_;
  mutable InflightLimiter limiter_;
};

/// data: URI for a local image file; http(s) and data: references pass
/// through unchanged.
std::string image_data_uri(const std::string& image_ref);

// ---------------------------------------------------------------------------

/// Model id -> backend. Ids starting with "stub:" build a StubBackend from
/// the rest of the id; any other id is sent to the configured endpoint as
/// the model name.
class BackendRegistry {
 public:
  void add(std::string model_id, std::shared_ptr<const Backend> backend);
  std::shared_ptr<const Backend> get(std::string_view model_id) const;
  bool contains(std::string_view model_id) const;

  static BackendRegistry build(const std::vector<std::string>& model_ids,
                               const std::vector<const Dataset*>& datasets,
                               const BackendConfig& remote,
                               const StubOptions& stub_options = {});

 private:
  std::unordered_map<std::string, std::shared_ptr<const Backend>> backends_;
};

// 64-bit FNV-1a; stable across platforms.
std::uint64_t fnv1a64(std::string_view data);
std::string hex_digest(std::string_view data);

}  // namespace mcbias
