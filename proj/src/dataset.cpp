#include "mcbias/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <fmt/format.h>
#include "json.hpp"

namespace mcbias {

using nlohmann::json;

Dataset::Dataset(std::string name, std::vector<QuestionRecord> records,
                 DatasetMetadata metadata)
    : name_(std::move(name)),
      records_(std::move(records)),
      metadata_(std::move(metadata)) {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    validate_record(records_[i]);
    if (!by_id_.emplace(records_[i].id, i).second)
      throw DatasetError(
          fmt::format("duplicate record id '{}'", records_[i].id));
  }
}

const QuestionRecord* Dataset::find(std::string_view id) const {
  auto idx = index_of(id);
  return idx ? &records_[*idx] : nullptr;
}

std::optional<std::size_t> Dataset::index_of(std::string_view id) const {
  auto it = by_id_.find(std::string(id));
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

bool Dataset::uniform_option_count() const {
  if (records_.empty()) return true;
  const auto k = records_.front().options.size();
  return std::all_of(records_.begin(), records_.end(),
                     [k](const auto& r) { return r.options.size() == k; });
}

void validate_record(const QuestionRecord& r) {
  if (r.id.empty()) throw DatasetError("record id is empty");
  if (r.question.empty())
    throw DatasetError(fmt::format("record '{}': question is empty", r.id));
  const auto k = r.options.size();
  if (k < kMinOptions || k > kMaxOptions)
    throw DatasetError(fmt::format("record '{}': {} options, expected {}..{}",
                                   r.id, k, kMinOptions, kMaxOptions));
  if (r.gold_index >= k)
    throw DatasetError(fmt::format(
        "record '{}': answer_index {} out of range for {} options", r.id,
        r.gold_index, k));
  std::unordered_set<std::string_view> seen;
  for (const auto& o : r.options) {
    if (o.empty())
      throw DatasetError(fmt::format("record '{}': empty option text", r.id));
    if (!seen.insert(o).second)
      throw DatasetError(
          fmt::format("record '{}': duplicate option '{}'", r.id, o));
  }
}

namespace {

QuestionRecord record_from_json(const json& j) {
  if (!j.is_object()) throw DatasetError("expected a JSON object");
  QuestionRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    if (auto it = j.find("image"); it != j.end() && !it->is_null())
      r.image_ref = it->get<std::string>();
    r.question = j.at("question").get<std::string>();
    r.options = j.at("options").get<std::vector<std::string>>();
    const auto answer = j.at("answer_index").get<long long>();
    if (answer < 0)
      throw DatasetError(fmt::format("record '{}': negative answer_index", r.id));
    r.gold_index = static_cast<std::size_t>(answer);
  } catch (const json::exception& e) {
    throw DatasetError(e.what());
  }
  return r;
}

}  // namespace

Dataset parse_dataset(std::string_view text, std::string name) {
  std::vector<QuestionRecord> records;
  std::unordered_set<std::string> ids;
  std::size_t line_no = 0;
  for (std::size_t pos = 0; pos < text.size();) {
    auto end = std::min(text.find('\n', pos), text.size());
    auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      auto r = record_from_json(json::parse(line));
      validate_record(r);
      if (!ids.insert(r.id).second)
        throw DatasetError(fmt::format("duplicate record id '{}'", r.id));
      records.push_back(std::move(r));
    } catch (const json::parse_error& e) {
      throw DatasetError(fmt::format("{}:{}: malformed record: {}", name,
                                     line_no, e.what()));
    } catch (const DatasetError& e) {
      throw DatasetError(fmt::format("{}:{}: {}", name, line_no, e.what()));
    }
  }
  auto meta = known_benchmark(name).value_or(DatasetMetadata{});
  return Dataset(std::move(name), std::move(records), std::move(meta));
}

Dataset load_dataset(const std::filesystem::path& path,
                     std::optional<std::string> name) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError(fmt::format("cannot open {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_dataset(ss.str(), name.value_or(path.stem().string()));
}

std::string serialize_record(const QuestionRecord& r) {
  json j;
  j["id"] = r.id;
  if (r.image_ref) j["image"] = *r.image_ref;
  j["question"] = r.question;
  j["options"] = r.options;
  j["answer_index"] = r.gold_index;
  return j.dump();
}

RotatedInstance rotate(const QuestionRecord& record, std::size_t rotation) {
  const auto k = record.options.size();
  rotation %= k;
  RotatedInstance inst;
  inst.source_id = record.id;
  inst.rotation = rotation;
  inst.options.reserve(k);
  for (std::size_t i = 0; i < k; ++i)
    inst.options.push_back(record.options[(i + rotation) % k]);
  inst.gold_position = (record.gold_index + k - rotation) % k;
  return inst;
}

std::vector<RotatedInstance> circular_expand(const QuestionRecord& record) {
  std::vector<RotatedInstance> out;
  out.reserve(record.options.size());
  for (std::size_t r = 0; r < record.options.size(); ++r)
    out.push_back(rotate(record, r));
  return out;
}

std::size_t expanded_count(const Dataset& dataset) {
  std::size_t n = 0;
  for (const auto& r : dataset.records()) n += r.options.size();
  return n;
}

std::optional<DatasetMetadata> known_benchmark(std::string_view name) {
  using S = OptionSeparator;
  using D = OptionDelimiter;
  using I = OptionIdSet;
  struct Row {
    std::string_view name;
    std::size_t single, circular;
    PromptFormat format;
  };
  static const Row rows[] = {
      {"A-OKVQA", 1145, 4580, {I::Lowercase, D::DoubleBrackets, S::LineBreak}},
      {"HRBench-4K", 200, 800, {I::Uppercase, D::Dot, S::LineBreak}},
      {"MMBench", 1292, 4876, {I::Uppercase, D::Dot, S::Semicolon}},
      {"MME-RW-Lite", 1919, 9595, {I::Uppercase, D::DoubleBrackets, S::LineBreak}},
      {"VStarBench", 192, 596, {I::Uppercase, D::Dot, S::LineBreak}},
  };
  for (const auto& row : rows)
    if (row.name == name)
      return DatasetMetadata{row.single, row.circular, row.format};
  return std::nullopt;
}

}  // namespace mcbias
