#include "mcbias/reporting.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "mcbias/svg.hpp"

namespace mcbias {

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FixtureError(fmt::format("cannot open {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string label(double v) {
  const double r = std::round(v * 10.0) / 10.0;
  return fmt::format("{:.1f}", r == 0.0 ? 0.0 : r);
}

}  // namespace

std::string fixture_digest(const std::filesystem::path& path) {
  return hex_digest(read_file(path));
}

Grid ingest_published_grid(const std::filesystem::path& path) {
  const auto text = read_file(path);
  auto sidecar = path;
  sidecar += ".fnv1a64";
  if (std::filesystem::exists(sidecar)) {
    auto expected = read_file(sidecar);
    expected = std::string(trim_output(expected));
    const auto actual = hex_digest(text);
    if (expected != actual)
      throw FixtureError(fmt::format("{}: checksum {} does not match {}", path.string(), actual,
                                     expected));
  }
  Grid grid;
  try {
    grid = read_grid_csv(text);
  } catch (const std::invalid_argument& e) {
    throw FixtureError(fmt::format("{}: {}", path.string(), e.what()));
  }
  std::map<std::string, std::set<std::pair<std::string, std::size_t>>> seen;
  for (const auto& c : grid) {
    if (!(c.accuracy >= 0.0 && c.accuracy <= 1.0) || !(c.coverage >= 0.0 && c.coverage <= 1.0))
      throw FixtureError(fmt::format("{} / {} / {}: value outside [0, 100]", c.dataset, c.model,
                                     format_key(c.format)));
    if (!seen[c.dataset].emplace(c.model, format_index(c.format)).second)
      throw FixtureError(fmt::format("{} / {} / {}: duplicate row", c.dataset, c.model,
                                     format_key(c.format)));
  }
  for (const auto& d : grid_datasets(grid)) {
    const auto& rows = seen[d];
    std::set<std::string> models;
    for (const auto& [m, f] : rows) models.insert(m);
    if (models.size() != kFixtureModels || rows.size() != kFixtureModels * kFormatCount)
      throw FixtureError(fmt::format("{}: {} rows for {} models, expected {} x {}", d,
                                     rows.size(), models.size(), kFixtureModels, kFormatCount));
  }
  return grid;
}

double quantile7(std::vector<double> v, double p) {
  if (v.empty()) throw std::invalid_argument("quantile of an empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("quantile level outside [0, 1]");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

BoxStats box_stats(std::span<const double> values) {
  std::vector<double> v(values.begin(), values.end());
  return {quantile7(v, 0.0), quantile7(v, 0.25), quantile7(v, 0.5), quantile7(v, 0.75),
          quantile7(v, 1.0)};
}

std::vector<ModelRankBox> rank_boxes(const Grid& grid, std::string_view dataset) {
  const auto table = rank_table(grid, dataset);
  std::vector<ModelRankBox> out;
  for (std::size_t m = 0; m < table.models.size(); ++m) {
    ModelRankBox b;
    b.model = table.models[m];
    std::vector<double> r;
    for (const auto& row : table.ranks) {
      b.ranks.push_back(row[m]);
      r.push_back(row[m]);
    }
    b.box = box_stats(r);
    out.push_back(std::move(b));
  }
  return out;
}

std::string rank_boxplot_svg(const Grid& grid, std::string_view dataset) {
  const auto boxes = rank_boxes(grid, dataset);
  const double left = 60, top = 50, plot_h = 300, step = 90;
  const double width = left + step * static_cast<double>(boxes.size()) + 30;
  svg::Document doc(width, top + plot_h + 100);
  doc.title(fmt::format("Rank distribution across prompt formats: {}", dataset));
  const int max_rank = static_cast<int>(std::max<std::size_t>(boxes.size(), 2));
  auto y = [&](double r) { return top + (r - 1.0) / (max_rank - 1.0) * plot_h; };
  for (int r = 1; r <= max_rank; ++r) {
    doc.line(left, y(r), width - 20, y(r), "#e0e0e0");
    doc.text(left - 8, y(r) + 4, std::to_string(r), 11, "end");
  }
  doc.text(18, top + plot_h / 2, "Rank", 12, "middle", -90);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& b = boxes[i].box;
    const double cx = left + step * (static_cast<double>(i) + 0.5);
    doc.line(cx, y(b.min), cx, y(b.q1), "#333333");
    doc.line(cx, y(b.q3), cx, y(b.max), "#333333");
    doc.line(cx - 12, y(b.min), cx + 12, y(b.min), "#333333");
    doc.line(cx - 12, y(b.max), cx + 12, y(b.max), "#333333");
    doc.rect(cx - 25, y(b.q1), 50, y(b.q3) - y(b.q1), "#9ecae1", "#333333");
    doc.line(cx - 25, y(b.median), cx + 25, y(b.median), "#08306b", 2.0);
    doc.text(cx, top + plot_h + 20, boxes[i].model, 11, "end", -30);
  }
  return doc.str();
}

DeviationMatrix deviation_matrix(const Grid& grid, std::string_view dataset,
                                 bool coverage_filtered) {
  DeviationMatrix m;
  m.dataset = dataset;
  m.coverage_filtered = coverage_filtered;
  m.levels = all_levels();
  Grid subset;
  for (const auto& c : grid)
    if (c.dataset == dataset) subset.push_back(c);
  if (subset.empty()) throw std::invalid_argument(fmt::format("no cells for dataset '{}'", dataset));
  m.models = grid_models(subset);
  const Grid used = coverage_filtered ? coverage_filter(subset).kept : subset;
  for (const auto& model : m.models) {
    const auto devs = coverage_filtered ? deviation_from_mean_available(used, model, dataset)
                                        : deviation_from_mean(used, model, dataset);
    std::vector<std::optional<double>> row;
    for (const auto& d : devs) row.push_back(d.deviation_pp);
    m.values.push_back(std::move(row));
  }
  return m;
}

std::string deviation_heatmap_svg(const DeviationMatrix& m) {
  const double left = 120, top = 110, cw = 72, ch = 28;
  const double width = left + cw * static_cast<double>(m.levels.size()) + 30;
  const double height = top + ch * static_cast<double>(m.models.size()) + 40;
  svg::Document doc(width, height);
  doc.title(fmt::format("Deviation from mean accuracy (pp): {}{}", m.dataset,
                        m.coverage_filtered ? ", coverage >= 75%" : ""));
  double scale = 0.0;
  for (const auto& row : m.values)
    for (const auto& v : row)
      if (v) scale = std::max(scale, std::abs(*v));
  if (scale == 0.0) scale = 1.0;
  for (std::size_t j = 0; j < m.levels.size(); ++j)
    doc.text(left + cw * (static_cast<double>(j) + 0.5), top - 8, m.levels[j].name(), 11, "start",
             -45);
  for (std::size_t i = 0; i < m.models.size(); ++i) {
    const double y = top + ch * static_cast<double>(i);
    doc.text(left - 8, y + ch / 2 + 4, m.models[i], 11, "end");
    for (std::size_t j = 0; j < m.levels.size(); ++j) {
      const double x = left + cw * static_cast<double>(j);
      const auto& v = m.values[i][j];
      if (!v) {
        doc.rect(x, y, cw, ch, "#bdbdbd", "#ffffff");
        continue;
      }
      doc.rect(x, y, cw, ch, svg::diverging(*v / scale), "#ffffff");
      doc.text(x + cw / 2, y + ch / 2 + 4, label(*v), 10, "middle");
    }
  }
  return doc.str();
}

std::string write_deviation_csv(const DeviationMatrix& m) {
  std::string out = "dataset,model,level,deviation_pp\n";
  for (std::size_t i = 0; i < m.models.size(); ++i)
    for (std::size_t j = 0; j < m.levels.size(); ++j) {
      const auto& v = m.values[i][j];
      out += fmt::format("{},{},{},{}\n", m.dataset, m.models[i], m.levels[j].name(),
                         v ? fmt::format("{:.6f}", *v) : "NA");
    }
  return out;
}

std::string write_rank_csv(const Grid& grid, std::string_view dataset) {
  const auto table = rank_table(grid, dataset);
  const auto formats = enumerate_formats();
  std::string out = "dataset,model,separator,delimiter,id_set,rank\n";
  for (std::size_t f = 0; f < formats.size(); ++f)
    for (std::size_t m = 0; m < table.models.size(); ++m)
      out += fmt::format("{},{},{},{},{},{}\n", dataset, table.models[m],
                         to_string(formats[f].separator), to_string(formats[f].delimiter),
                         to_string(formats[f].id_set), table.ranks[f][m]);
  return out;
}

std::string effects_bar_svg(std::span<const FixedEffectEstimate> effects) {
  std::vector<FixedEffectEstimate> rows;
  for (const auto& e : effects)
    if (e.level != "intercept") rows.push_back(e);
  const double left = 140, top = 50, row_h = 30, plot_w = 420;
  svg::Document doc(left + plot_w + 40, top + row_h * static_cast<double>(rows.size()) + 60);
  doc.title("Fixed effects vs base format (pp, 95% CI)");
  double span = 1.0;
  for (const auto& e : rows)
    span = std::max({span, std::abs(e.ci.lo), std::abs(e.ci.hi), std::abs(e.estimate)});
  span = std::ceil(span * 1.1);
  auto x = [&](double v) { return left + plot_w * (v + span) / (2.0 * span); };
  const double bottom = top + row_h * static_cast<double>(rows.size());
  for (int t = -static_cast<int>(span); t <= static_cast<int>(span);
       t += std::max(1, static_cast<int>(span) / 4)) {
    doc.line(x(t), top - 5, x(t), bottom, "#e0e0e0");
    doc.text(x(t), bottom + 18, std::to_string(t), 10, "middle");
  }
  doc.line(x(0), top - 5, x(0), bottom, "#000000", 1.5);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& e = rows[i];
    const double cy = top + row_h * (static_cast<double>(i) + 0.5);
    const char* fill = !e.significant ? "#bdbdbd" : (e.estimate < 0 ? "#4393c3" : "#d6604d");
    doc.rect(std::min(x(0), x(e.estimate)), cy - 9, std::abs(x(e.estimate) - x(0)), 18, fill);
    doc.line(x(e.ci.lo), cy, x(e.ci.hi), cy, "#000000", 1.2);
    doc.line(x(e.ci.lo), cy - 5, x(e.ci.lo), cy + 5, "#000000", 1.2);
    doc.line(x(e.ci.hi), cy - 5, x(e.ci.hi), cy + 5, "#000000", 1.2);
    doc.text(left - 8, cy + 4, e.level, 11, "end");
  }
  doc.text(left + plot_w / 2, bottom + 40, "Effect on accuracy (pp)", 12, "middle");
  return doc.str();
}

}  // namespace mcbias
