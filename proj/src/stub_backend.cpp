#include <algorithm>
#include <cmath>
#include <map>
#include <thread>

#include <fmt/format.h>

#include "mcbias/model_backend.hpp"

namespace mcbias {

std::string_view to_string(ErrorClass c) {
  switch (c) {
    case ErrorClass::Transport: return "transport";
    case ErrorClass::Refusal: return "refusal";
    case ErrorClass::CapabilityMissing: return "capability_missing";
    case ErrorClass::Protocol: return "protocol";
  }
  return "unknown";
}

std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex_digest(std::string_view data) {
  return fmt::format("{:016x}", fnv1a64(data));
}

std::size_t max_required_tokens(const Backend& backend, OptionIdSet set,
                                std::size_t count) {
  if (count < kMinOptions || count > kMaxOptions)
    throw std::invalid_argument(fmt::format("option count {} outside 2..5", count));
  std::size_t best = 0;
  for (const auto& id : option_ids(set, count))
    best = std::max(best, backend.tokenizer_probe(id));
  return best;
}

// ---------------------------------------------------------------------------

bool FormatLevel::matches(const PromptFormat& f) const {
  switch (factor) {
    case FormatFactor::IdSet: return static_cast<int>(f.id_set) == value;
    case FormatFactor::Delimiter: return static_cast<int>(f.delimiter) == value;
    case FormatFactor::Separator: return static_cast<int>(f.separator) == value;
  }
  return false;
}

std::string FormatLevel::name() const {
  switch (factor) {
    case FormatFactor::IdSet: return std::string(to_string(static_cast<OptionIdSet>(value)));
    case FormatFactor::Delimiter: return std::string(to_string(static_cast<OptionDelimiter>(value)));
    case FormatFactor::Separator: return std::string(to_string(static_cast<OptionSeparator>(value)));
  }
  return "?";
}

std::optional<FormatLevel> FormatLevel::parse(std::string_view name) {
  if (auto v = parse_id_set(name)) return of(*v);
  if (auto v = parse_delimiter(name)) return of(*v);
  if (auto v = parse_separator(name)) return of(*v);
  return std::nullopt;
}

std::vector<FormatLevel> all_levels() {
  std::vector<FormatLevel> out;
  for (auto v : kIdSetOrder) out.push_back(FormatLevel::of(v));
  for (auto v : kDelimiterOrder) out.push_back(FormatLevel::of(v));
  for (auto v : kSeparatorOrder) out.push_back(FormatLevel::of(v));
  return out;
}

StubProfile StubProfile::parse(std::string_view spec) {
  const auto colon = spec.find(':');
  const auto head = spec.substr(0, colon);
  const auto arg = colon == std::string_view::npos ? std::string_view{}
                                                   : spec.substr(colon + 1);
  if (head == "oracle") return oracle();
  if (head == "fail") return failing();
  if (head == "position") {
    try {
      return position_biased(std::stoul(std::string(arg)));
    } catch (const std::exception&) {
      throw std::invalid_argument(fmt::format("bad stub position '{}'", arg));
    }
  }
  if (head == "id" && !arg.empty()) return id_biased(std::string(arg));
  if (head == "refuse") return refuser(std::string(arg));
  if (head == "format") {
    const auto at = arg.find('@');
    auto level = FormatLevel::parse(arg.substr(0, at));
    if (!level)
      throw std::invalid_argument(fmt::format("unknown format level '{}'", arg));
    FormatRule rule{*level, 1.0};
    if (at != std::string_view::npos) {
      rule.top_fraction = std::stod(std::string(arg.substr(at + 1)));
      if (!(rule.top_fraction > 0.0 && rule.top_fraction <= 1.0))
        throw std::invalid_argument("format rule fraction must be in (0, 1]");
    }
    return format_sensitive(rule);
  }
  throw std::invalid_argument(fmt::format("unknown stub profile '{}'", spec));
}

std::string StubProfile::describe() const {
  switch (kind) {
    case Kind::Oracle: return "oracle";
    case Kind::PositionBiased: return fmt::format("position:{}", position);
    case Kind::IdBiased: return "id:" + text;
    case Kind::Refuser: return "refuse:" + text;
    case Kind::FormatSensitive:
      return rule.top_fraction == 1.0
                 ? "format:" + rule.level.name()
                 : fmt::format("format:{}@{}", rule.level.name(), rule.top_fraction);
    case Kind::Failing: return "fail";
  }
  return "?";
}

// ---------------------------------------------------------------------------

StubBackend::StubBackend(StubProfile profile,
                         const std::vector<const Dataset*>& datasets,
                         StubOptions options)
    : profile_(std::move(profile)), options_(std::move(options)) {
  const auto formats = enumerate_formats();
  for (const Dataset* ds : datasets) {
    for (const auto& rec : ds->records()) {
      cloze_.emplace(rec.question,
                     ClozeFacts{rec.id, rec.options[rec.gold_index], rec.options.size()});
      for (const auto& inst : circular_expand(rec)) {
        for (const auto& f : formats) {
          prompts_.emplace(
              render_prompt(rec.question, inst.options, f, options_.layout),
              PromptFacts{f, inst.options.size(), inst.gold_position, rec.id});
        }
      }
    }
    if (profile_.kind == StubProfile::Kind::FormatSensitive) {
      std::vector<std::pair<double, std::string>> ranked;
      for (const auto& rec : ds->records())
        ranked.emplace_back(gold_probability(rec.id, rec.options.size()), rec.id);
      std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
      });
      const auto cut = static_cast<std::size_t>(
          std::ceil(profile_.rule.top_fraction * static_cast<double>(ranked.size()) - 1e-9));
      for (std::size_t i = 0; i < ranked.size(); ++i)
        rule_targets_[ranked[i].second] = i < cut;
    }
  }
}

Capabilities StubBackend::capabilities() const {
  return Capabilities{true, options_.continuation_scoring};
}

double StubBackend::gold_probability(std::string_view question_id,
                                     std::size_t option_count) const {
  if (options_.uniform_confidence) return 1.0 / static_cast<double>(option_count);
  const auto bucket = fnv1a64(question_id) % 10007;
  return 0.4 + 0.55 * static_cast<double>(bucket) / 10006.0;
}

std::string StubBackend::choose_output(const PromptFacts& facts) const {
  const auto ids = facts.format.id_set;
  switch (profile_.kind) {
    case StubProfile::Kind::Oracle:
      return option_id(ids, facts.gold_position);
    case StubProfile::Kind::PositionBiased:
      return option_id(ids, std::min(profile_.position, facts.option_count - 1));
    case StubProfile::Kind::IdBiased:
    case StubProfile::Kind::Refuser:
      return profile_.text;
    case StubProfile::Kind::FormatSensitive: {
      auto it = rule_targets_.find(facts.question_id);
      const bool fails = profile_.rule.level.matches(facts.format) &&
                         it != rule_targets_.end() && it->second;
      const auto pos = fails ? (facts.gold_position + 1) % facts.option_count
                             : facts.gold_position;
      return option_id(ids, pos);
    }
    case StubProfile::Kind::Failing:
      break;
  }
  throw BackendError(ErrorClass::Transport, "stub backend configured to fail");
}

std::vector<TokenLogprob> StubBackend::token_logprobs(const PromptFacts* facts,
                                                      std::string_view text) const {
  std::vector<TokenLogprob> out;
  const double uniform = -std::log(static_cast<double>(options_.vocab_size));
  // First-token mass per leading character of each option ID.
  std::map<std::string, double> first;
  if (facts) {
    const auto k = facts->option_count;
    const double gold = gold_probability(facts->question_id, k);
    for (std::size_t i = 0; i < k; ++i) {
      const auto id = option_id(facts->format.id_set, i);
      first[id.substr(0, 1)] +=
          i == facts->gold_position ? gold : (1.0 - gold) / static_cast<double>(k - 1);
    }
  }
  for (std::size_t i = 0; i < text.size(); ++i) {
    TokenLogprob t;
    t.token = std::string(1, text[i]);
    if (!facts) {
      t.logprob = uniform;
    } else if (i == 0) {
      auto it = first.find(t.token);
      t.logprob = it != first.end() ? std::log(it->second) : std::log(1e-6);
      for (const auto& [tok, p] : first) t.top.emplace_back(tok, std::log(p));
      std::stable_sort(t.top.begin(), t.top.end(),
                       [](const auto& a, const auto& b) { return a.second > b.second; });
    } else {
      t.logprob = 0.0;
      t.top.emplace_back(t.token, 0.0);
    }
    out.push_back(std::move(t));
  }
  return out;
}

Generation StubBackend::generate(std::string_view prompt,
                                 const std::optional<std::string>& /*image_ref*/,
                                 int max_new_tokens) const {
  if (max_new_tokens < 1)
    throw std::invalid_argument("max_new_tokens must be at least 1");
  if (options_.latency.count() > 0) std::this_thread::sleep_for(options_.latency);
  if (profile_.kind == StubProfile::Kind::Failing)
    throw BackendError(ErrorClass::Transport, "stub backend configured to fail");

  auto it = prompts_.find(std::string(prompt));
  const PromptFacts* facts = it == prompts_.end() ? nullptr : &it->second;
  std::string text;
  if (facts) {
    text = choose_output(*facts);
  } else if (profile_.kind == StubProfile::Kind::IdBiased ||
             profile_.kind == StubProfile::Kind::Refuser) {
    text = profile_.text;
  }
  if (text.size() > static_cast<std::size_t>(max_new_tokens))
    text.resize(static_cast<std::size_t>(max_new_tokens));
  Generation g;
  g.token_logprobs = token_logprobs(facts, text);
  g.text = std::move(text);
  return g;
}

std::vector<double> StubBackend::score_continuation(
    std::string_view prompt, const std::optional<std::string>& /*image_ref*/,
    std::string_view continuation) const {
  if (!options_.continuation_scoring)
    throw BackendError(ErrorClass::CapabilityMissing,
                       "stub backend has continuation scoring disabled");
  if (continuation.empty())
    throw std::invalid_argument("continuation must not be empty");
  if (profile_.kind == StubProfile::Kind::Failing)
    throw BackendError(ErrorClass::Transport, "stub backend configured to fail");

  double lp = -std::log(static_cast<double>(options_.vocab_size));
  const bool knows_answers = profile_.kind == StubProfile::Kind::Oracle ||
                             profile_.kind == StubProfile::Kind::FormatSensitive;
  if (knows_answers) {
    auto it = cloze_.find(std::string(prompt));
    if (it != cloze_.end() && it->second.gold_text == continuation)
      lp = std::log(gold_probability(it->second.question_id, it->second.option_count));
  }
  return std::vector<double>(continuation.size(), lp);
}

std::size_t StubBackend::tokenizer_probe(std::string_view text) const {
  return text.size();
}

// ---------------------------------------------------------------------------

void BackendRegistry::add(std::string model_id,
                          std::shared_ptr<const Backend> backend) {
  backends_[std::move(model_id)] = std::move(backend);
}

std::shared_ptr<const Backend> BackendRegistry::get(std::string_view model_id) const {
  auto it = backends_.find(std::string(model_id));
  if (it == backends_.end())
    throw std::out_of_range(fmt::format("no backend for model '{}'", model_id));
  return it->second;
}

bool BackendRegistry::contains(std::string_view model_id) const {
  return backends_.count(std::string(model_id)) > 0;
}

BackendRegistry BackendRegistry::build(const std::vector<std::string>& model_ids,
                                       const std::vector<const Dataset*>& datasets,
                                       const BackendConfig& remote,
                                       const StubOptions& stub_options) {
  BackendRegistry reg;
  for (const auto& id : model_ids) {
    if (id.rfind("stub:", 0) == 0) {
      reg.add(id, std::make_shared<StubBackend>(StubProfile::parse(id.substr(5)),
                                                datasets, stub_options));
    } else {
      auto cfg = remote;
      cfg.model = id;
      reg.add(id, std::make_shared<HttpBackend>(std::move(cfg)));
    }
  }
  return reg;
}

}  // namespace mcbias
