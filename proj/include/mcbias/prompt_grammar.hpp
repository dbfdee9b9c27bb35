#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mcbias {

// Prompt-format space: option ID set x option delimiter x option separator.

enum class OptionIdSet { Uppercase, Lowercase, Numbers, RomanNumbers };
enum class OptionDelimiter { Dot, Colon, Bracket, DoubleBrackets };
enum class OptionSeparator { LineBreak, Comma, Semicolon };

inline constexpr std::size_t kMaxOptions = 5;
inline constexpr std::size_t kMinOptions = 2;
inline constexpr std::size_t kFormatCount = 48;

// Table order of the published result grids.
inline constexpr std::array<OptionIdSet, 4> kIdSetOrder = {
    OptionIdSet::Uppercase, OptionIdSet::Lowercase, OptionIdSet::Numbers,
    OptionIdSet::RomanNumbers};
inline constexpr std::array<OptionDelimiter, 4> kDelimiterOrder = {
    OptionDelimiter::Dot, OptionDelimiter::Colon, OptionDelimiter::Bracket,
    OptionDelimiter::DoubleBrackets};
inline constexpr std::array<OptionSeparator, 3> kSeparatorOrder = {
    OptionSeparator::Comma, OptionSeparator::LineBreak,
    OptionSeparator::Semicolon};

struct PromptFormat {
  OptionIdSet id_set = OptionIdSet::Uppercase;
  OptionDelimiter delimiter = OptionDelimiter::Dot;
  OptionSeparator separator = OptionSeparator::Comma;

  friend bool operator==(const PromptFormat&, const PromptFormat&) = default;
  friend auto operator<=>(const PromptFormat&, const PromptFormat&) = default;
};

// Canonical snake_case names, as used in the grid files.
std::string_view to_string(OptionIdSet v);
std::string_view to_string(OptionDelimiter v);
std::string_view to_string(OptionSeparator v);

std::optional<OptionIdSet> parse_id_set(std::string_view s);
std::optional<OptionDelimiter> parse_delimiter(std::string_view s);
std::optional<OptionSeparator> parse_separator(std::string_view s);

// "comma/dot/uppercase" style key, separator first.
std::string format_key(const PromptFormat& f);
// Accepts the format_key() form; also "," or "+" as field separators.
PromptFormat parse_format(std::string_view key);

// Position of `f` in enumerate_formats(); 0..47.
std::size_t format_index(const PromptFormat& f);

/// All 48 formats: separator-major, then delimiter, then ID set.
std::vector<PromptFormat> enumerate_formats();

/// Uppercase Roman numeral in subtractive form. Throws std::domain_error
/// outside 1..20.
std::string roman_numeral(int n);

/// ID of the option at 0-based `index`. Throws std::domain_error for
/// index >= kMaxOptions.
std::string option_id(OptionIdSet set, std::size_t index);

/// First `count` IDs of the set.
std::vector<std::string> option_ids(OptionIdSet set, std::size_t count);

/// "{id}.", "{id}:", "{id})" or "({id})".
std::string delimit_id(OptionDelimiter delimiter, std::string_view id);

std::string_view separator_text(OptionSeparator separator);

// Knobs for the parts of the layout the published material leaves
// ambiguous. Defaults reproduce the golden corpus.
struct PromptLayout {
  std::string block_separator = "\n";
  std::string id_text_separator = " ";
};

std::string render_option_block(const PromptFormat& format,
                                std::span<const std::string> options,
                                const PromptLayout& layout = {});

std::string build_instruction(OptionIdSet set, std::size_t count);

/// Question, option block and instruction, joined by the layout's block
/// separator. Throws std::invalid_argument on an empty question or an
/// invalid option list.
std::string render_prompt(std::string_view question,
                          std::span<const std::string> options,
                          const PromptFormat& format,
                          const PromptLayout& layout = {});

}  // namespace mcbias
