#include "mcbias/prompt_grammar.hpp"

#include <stdexcept>

#include <fmt/format.h>

namespace mcbias {

std::string_view to_string(OptionIdSet v) {
  switch (v) {
    case OptionIdSet::Uppercase: return "uppercase";
    case OptionIdSet::Lowercase: return "lowercase";
    case OptionIdSet::Numbers: return "numbers";
    case OptionIdSet::RomanNumbers: return "roman";
  }
  return "?";
}

std::string_view to_string(OptionDelimiter v) {
  switch (v) {
    case OptionDelimiter::Dot: return "dot";
    case OptionDelimiter::Colon: return "colon";
    case OptionDelimiter::Bracket: return "bracket";
    case OptionDelimiter::DoubleBrackets: return "double_brackets";
  }
  return "?";
}

std::string_view to_string(OptionSeparator v) {
  switch (v) {
    case OptionSeparator::LineBreak: return "line_break";
    case OptionSeparator::Comma: return "comma";
    case OptionSeparator::Semicolon: return "semicolon";
  }
  return "?";
}

std::optional<OptionIdSet> parse_id_set(std::string_view s) {
  for (auto v : kIdSetOrder)
    if (to_string(v) == s) return v;
  if (s == "upper") return OptionIdSet::Uppercase;
  if (s == "lower") return OptionIdSet::Lowercase;
  if (s == "roman_numbers") return OptionIdSet::RomanNumbers;
  return std::nullopt;
}

std::optional<OptionDelimiter> parse_delimiter(std::string_view s) {
  for (auto v : kDelimiterOrder)
    if (to_string(v) == s) return v;
  return std::nullopt;
}

std::optional<OptionSeparator> parse_separator(std::string_view s) {
  for (auto v : kSeparatorOrder)
    if (to_string(v) == s) return v;
  return std::nullopt;
}

std::string format_key(const PromptFormat& f) {
  return fmt::format("{}/{}/{}", to_string(f.separator), to_string(f.delimiter),
                     to_string(f.id_set));
}

PromptFormat parse_format(std::string_view key) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= key.size(); ++i) {
    if (i == key.size() || key[i] == '/' || key[i] == ',' || key[i] == '+') {
      parts.push_back(key.substr(start, i - start));
      start = i + 1;
    }
  }
  if (parts.size() != 3)
    throw std::invalid_argument(
        fmt::format("format '{}' must have three fields", key));
  auto sep = parse_separator(parts[0]);
  auto del = parse_delimiter(parts[1]);
  auto ids = parse_id_set(parts[2]);
  if (!sep || !del || !ids)
    throw std::invalid_argument(fmt::format("unknown format '{}'", key));
  return PromptFormat{*ids, *del, *sep};
}

std::size_t format_index(const PromptFormat& f) {
  std::size_t s = 0, d = 0, i = 0;
  while (kSeparatorOrder[s] != f.separator) ++s;
  while (kDelimiterOrder[d] != f.delimiter) ++d;
  while (kIdSetOrder[i] != f.id_set) ++i;
  return s * 16 + d * 4 + i;
}

std::vector<PromptFormat> enumerate_formats() {
  std::vector<PromptFormat> out;
  out.reserve(kFormatCount);
  for (auto sep : kSeparatorOrder)
    for (auto del : kDelimiterOrder)
      for (auto ids : kIdSetOrder) out.push_back(PromptFormat{ids, del, sep});
  return out;
}

std::string roman_numeral(int n) {
  if (n < 1 || n > 20)
    throw std::domain_error(fmt::format("roman numeral {} out of range", n));
  static constexpr std::array<std::pair<int, const char*>, 4> table = {
      {{10, "X"}, {9, "IX"}, {5, "V"}, {4, "IV"}}};
  std::string out;
  for (const auto& [value, glyph] : table) {
    while (n >= value) {
      out += glyph;
      n -= value;
    }
  }
  out.append(static_cast<std::size_t>(n), 'I');
  return out;
}

std::string option_id(OptionIdSet set, std::size_t index) {
  if (index >= kMaxOptions)
    throw std::domain_error(fmt::format("option index {} out of range", index));
  const auto i = static_cast<char>(index);
  switch (set) {
    case OptionIdSet::Uppercase: return std::string(1, static_cast<char>('A' + i));
    case OptionIdSet::Lowercase: return std::string(1, static_cast<char>('a' + i));
    case OptionIdSet::Numbers: return std::string(1, static_cast<char>('1' + i));
    case OptionIdSet::RomanNumbers: return roman_numeral(static_cast<int>(index) + 1);
  }
  throw std::domain_error("unknown option id set");
}

std::vector<std::string> option_ids(OptionIdSet set, std::size_t count) {
  std::vector<std::string> ids;
  ids.reserve(count);
  for (std::size_t i = 0; i < count; ++i) ids.push_back(option_id(set, i));
  return ids;
}

std::string delimit_id(OptionDelimiter delimiter, std::string_view id) {
  switch (delimiter) {
    case OptionDelimiter::Dot: return fmt::format("{}.", id);
    case OptionDelimiter::Colon: return fmt::format("{}:", id);
    case OptionDelimiter::Bracket: return fmt::format("{})", id);
    case OptionDelimiter::DoubleBrackets: return fmt::format("({})", id);
  }
  return std::string(id);
}

std::string_view separator_text(OptionSeparator separator) {
  switch (separator) {
    case OptionSeparator::LineBreak: return "\n";
    case OptionSeparator::Comma: return ", ";
    case OptionSeparator::Semicolon: return "; ";
  }
  return "";
}

namespace {

void check_option_count(std::size_t count) {
  if (count < kMinOptions || count > kMaxOptions)
    throw std::invalid_argument(
        fmt::format("option count {} outside {}..{}", count, kMinOptions,
                    kMaxOptions));
}

std::string_view id_noun(OptionIdSet set) {
  switch (set) {
    case OptionIdSet::Uppercase:
    case OptionIdSet::Lowercase: return "letter";
    case OptionIdSet::Numbers: return "number";
    case OptionIdSet::RomanNumbers: return "roman number";
  }
  return "letter";
}

}  // namespace

std::string render_option_block(const PromptFormat& format,
                                std::span<const std::string> options,
                                const PromptLayout& layout) {
  check_option_count(options.size());
  const auto sep = separator_text(format.separator);
  std::string out;
  for (std::size_t i = 0; i < options.size(); ++i) {
    if (options[i].empty())
      throw std::invalid_argument(fmt::format("option {} is empty", i));
    if (i > 0) out += sep;
    out += delimit_id(format.delimiter, option_id(format.id_set, i));
    out += layout.id_text_separator;
    out += options[i];
  }
  return out;
}

std::string build_instruction(OptionIdSet set, std::size_t count) {
  check_option_count(count);
  const auto ids = option_ids(set, count);
  std::string examples;
  if (count == 2) {
    examples = fmt::format("{}, or {}", ids[0], ids[1]);
  } else {
    for (std::size_t i = 0; i + 1 < count; ++i) {
      if (i > 0) examples += ", ";
      examples += ids[i];
    }
    examples += " or " + ids.back();
  }
  return fmt::format(
      "Select the best answer to the above multiple-choice question based on "
      "the image. Respond with only the {} (e.g., {}) of the correct option "
      "and no bracket, colon, or dot.",
      id_noun(set), examples);
}

std::string render_prompt(std::string_view question,
                          std::span<const std::string> options,
                          const PromptFormat& format,
                          const PromptLayout& layout) {
  if (question.empty()) throw std::invalid_argument("question is empty");
  std::string out(question);
  out += layout.block_separator;
  out += render_option_block(format, options, layout);
  out += layout.block_separator;
  out += build_instruction(format.id_set, options.size());
  return out;
}

}  // namespace mcbias
