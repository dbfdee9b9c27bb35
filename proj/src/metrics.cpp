#include "mcbias/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <fmt/format.h>

namespace mcbias {

std::string_view trim_output(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n\v\f");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n\v\f");
  return s.substr(b, e - b + 1);
}

bool exact_match(std::string_view output, std::string_view gold_id) {
  return trim_output(output) == gold_id;
}

double coverage(std::span<const std::string> outputs,
                std::span<const std::string> ids) {
  if (outputs.empty()) throw std::invalid_argument("coverage of an empty evaluation set");
  std::size_t in_scheme = 0;
  for (const auto& o : outputs) {
    const auto t = trim_output(o);
    if (std::find(ids.begin(), ids.end(), t) != ids.end()) ++in_scheme;
  }
  return static_cast<double>(in_scheme) / static_cast<double>(outputs.size());
}

AnswerFrequencies answer_frequencies(std::span<const std::size_t> selected,
                                     std::span<const std::size_t> present) {
  if (selected.size() != present.size())
    throw std::invalid_argument("selected and present counts differ in length");
  AnswerFrequencies out;
  out.normalized.resize(selected.size());
  double total = 0.0;
  for (std::size_t i = 0; i < selected.size(); ++i) {
    if (present[i] == 0) continue;
    const double f = static_cast<double>(selected[i]) / static_cast<double>(present[i]);
    out.normalized[i] = f;
    total += f;
  }
  if (total == 0.0) {
    out.no_valid_answers = true;
    return out;
  }
  for (auto& v : out.normalized)
    if (v) *v /= total;
  return out;
}

std::vector<int> competition_ranks(std::span<const double> scores) {
  std::vector<int> ranks(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    int better = 0;
    for (double other : scores)
      if (other > scores[i]) ++better;
    ranks[i] = better + 1;
  }
  return ranks;
}

std::vector<std::string> grid_models(const Grid& grid) {
  std::set<std::string> s;
  for (const auto& c : grid) s.insert(c.model);
  return {s.begin(), s.end()};
}

std::vector<std::string> grid_datasets(const Grid& grid) {
  std::set<std::string> s;
  for (const auto& c : grid) s.insert(c.dataset);
  return {s.begin(), s.end()};
}

std::vector<const EvalCell*> cells_by_format(const Grid& grid,
                                             std::string_view model,
                                             std::string_view dataset) {
  std::vector<const EvalCell*> out(kFormatCount, nullptr);
  for (const auto& c : grid)
    if (c.model == model && c.dataset == dataset) out[format_index(c.format)] = &c;
  return out;
}

std::vector<const EvalCell*> complete_cells(const Grid& grid,
                                            std::string_view model,
                                            std::string_view dataset) {
  auto cells = cells_by_format(grid, model, dataset);
  std::vector<std::string> missing;
  const auto formats = enumerate_formats();
  for (std::size_t i = 0; i < cells.size(); ++i)
    if (!cells[i]) missing.push_back(format_key(formats[i]));
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw MissingCellsError(fmt::format("{} / {}: {} of 48 cells missing: {}", model,
                                        dataset, missing.size(), list),
                            std::move(missing));
  }
  return cells;
}

namespace {

std::vector<LevelDeviation> deviations(std::span<const EvalCell* const> cells) {
  const auto formats = enumerate_formats();
  double total = 0.0;
  std::size_t count = 0;
  for (const auto* c : cells) {
    if (!c) continue;
    total += c->accuracy;
    ++count;
  }
  std::vector<LevelDeviation> out;
  for (const auto& level : all_levels()) {
    LevelDeviation d{level, std::nullopt, 0};
    double sum = 0.0;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (!cells[i] || !level.matches(formats[i])) continue;
      sum += cells[i]->accuracy;
      ++d.cells;
    }
    if (d.cells > 0 && count > 0)
      d.deviation_pp = 100.0 * (sum / static_cast<double>(d.cells) -
                                total / static_cast<double>(count));
    out.push_back(d);
  }
  return out;
}

}  // namespace

std::vector<LevelDeviation> deviation_from_mean(const Grid& grid,
                                                std::string_view model,
                                                std::string_view dataset) {
  return deviations(complete_cells(grid, model, dataset));
}

std::vector<LevelDeviation> deviation_from_mean_available(const Grid& grid,
                                                          std::string_view model,
                                                          std::string_view dataset) {
  return deviations(cells_by_format(grid, model, dataset));
}

CoverageFilterResult coverage_filter(const Grid& grid, double threshold) {
  CoverageFilterResult r;
  for (const auto& c : grid) (c.coverage < threshold ? r.removed : r.kept).push_back(c);
  return r;
}

RankTable rank_table(const Grid& grid, std::string_view dataset) {
  RankTable t;
  Grid subset;
  for (const auto& c : grid)
    if (c.dataset == dataset) subset.push_back(c);
  t.models = grid_models(subset);
  std::vector<std::vector<const EvalCell*>> per_model;
  for (const auto& m : t.models) per_model.push_back(complete_cells(subset, m, dataset));
  t.ranks.resize(kFormatCount);
  for (std::size_t f = 0; f < kFormatCount; ++f) {
    std::vector<double> acc;
    for (const auto& cells : per_model) acc.push_back(cells[f]->accuracy);
    t.ranks[f] = competition_ranks(acc);
  }
  return t;
}

// ---------------------------------------------------------------------------

std::vector<std::string_view> split_csv_line(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

std::string write_grid_csv(const Grid& grid) {
  std::string out = "model,dataset,separator,delimiter,id_set,accuracy,coverage\n";
  for (const auto& c : grid) {
    out += fmt::format("{},{},{},{},{},{:.6f},{:.6f}\n", c.model, c.dataset,
                       to_string(c.format.separator), to_string(c.format.delimiter),
                       to_string(c.format.id_set), 100.0 * c.accuracy,
                       100.0 * c.coverage);
  }
  return out;
}

namespace {

double parse_number(std::string_view s, std::size_t line_no) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw std::invalid_argument(fmt::format("line {}: bad number '{}'", line_no, s));
  return v;
}

}  // namespace

Grid read_grid_csv(std::string_view text) {
  Grid grid;
  std::map<std::string, std::size_t, std::less<>> col;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  const char* required[] = {"model", "dataset", "separator", "delimiter",
                            "id_set", "accuracy", "coverage"};
  while (pos < text.size()) {
    auto end = std::min(text.find('\n', pos), text.size());
    auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (trim_output(line).empty()) continue;
    auto fields = split_csv_line(line);
    if (col.empty()) {
      for (std::size_t i = 0; i < fields.size(); ++i) col[std::string(trim_output(fields[i]))] = i;
      for (const char* name : required)
        if (!col.count(name))
          throw std::invalid_argument(fmt::format("grid header lacks column '{}'", name));
      continue;
    }
    if (fields.size() != col.size())
      throw std::invalid_argument(fmt::format("line {}: expected {} fields, got {}",
                                              line_no, col.size(), fields.size()));
    auto field = [&](const char* name) { return trim_output(fields[col.find(name)->second]); };
    EvalCell c;
    c.model = field("model");
    c.dataset = field("dataset");
    auto sep = parse_separator(field("separator"));
    auto del = parse_delimiter(field("delimiter"));
    auto ids = parse_id_set(field("id_set"));
    if (!sep || !del || !ids)
      throw std::invalid_argument(fmt::format("line {}: unknown format level", line_no));
    c.format = PromptFormat{*ids, *del, *sep};
    c.accuracy = parse_number(field("accuracy"), line_no) / 100.0;
    c.coverage = parse_number(field("coverage"), line_no) / 100.0;
    grid.push_back(std::move(c));
  }
  return grid;
}

Grid read_grid_csv_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open {}", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  return read_grid_csv(ss.str());
}

}  // namespace mcbias
