#include "mcbias/mitigation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

namespace mcbias {

double pia(std::span<const std::size_t> correct, std::span<const std::size_t> selected,
           std::size_t n, std::size_t m) {
  if (m < 2) throw std::invalid_argument("PIA needs at least two options");
  if (correct.size() != m || selected.size() != m)
    throw std::invalid_argument("PIA count vectors must have one entry per option");
  if (n == 0) throw std::invalid_argument("PIA needs at least one question");
  const auto total_correct = std::accumulate(correct.begin(), correct.end(), std::size_t{0});
  if (total_correct > n)
    throw std::invalid_argument("PIA: more correct answers than questions");
  double sum = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (correct[i] > selected[i])
      throw std::invalid_argument(
          fmt::format("PIA: option {} correct {} times but selected {} times", i, correct[i],
                      selected[i]));
    if (selected[i] == 0) continue;
    const double c = static_cast<double>(correct[i]);
    sum += (c / static_cast<double>(selected[i])) * (c / static_cast<double>(n));
  }
  return sum / static_cast<double>(m);
}

PriorVector pride_prior(std::span<const std::vector<double>> observed, double floor) {
  if (observed.empty()) throw std::invalid_argument("PriDe calibration set is empty");
  const auto k = observed.front().size();
  for (const auto& v : observed)
    if (v.size() != k)
      throw UnsupportedDatasetError(
          "PriDe prior requires calibration questions with one option count");
  PriorVector prior;
  prior.p.assign(k, 0.0);
  for (const auto& v : observed)
    for (std::size_t i = 0; i < k; ++i) prior.p[i] += v[i];
  double total = 0.0;
  for (auto& x : prior.p) {
    x = std::max(x / static_cast<double>(observed.size()), floor);
    total += x;
  }
  for (auto& x : prior.p) x /= total;
  return prior;
}

std::size_t pride_debias(std::span<const double> observed, const PriorVector& prior) {
  if (observed.size() != prior.p.size())
    throw std::invalid_argument(fmt::format("PriDe: {} observed probabilities, prior has {}",
                                            observed.size(), prior.p.size()));
  if (observed.empty()) throw std::invalid_argument("PriDe: no options");
  std::size_t best = 0;
  double best_score = observed[0] / prior.p[0];
  for (std::size_t i = 1; i < observed.size(); ++i) {
    const double s = observed[i] / prior.p[i];
    if (s > best_score) {
      best = i;
      best_score = s;
    }
  }
  return best;
}

double perplexity(std::span<const double> lp) {
  if (lp.empty()) throw std::invalid_argument("perplexity of an empty sequence");
  double sum = 0.0;
  for (double v : lp) {
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite log-probability");
    sum += v;
  }
  return std::exp(-sum / static_cast<double>(lp.size()));
}

std::size_t cp_ln_select(std::span<const double> ppl) {
  if (ppl.size() < 2) throw std::invalid_argument("CP-LN needs at least two options");
  std::size_t best = 0;
  for (std::size_t i = 1; i < ppl.size(); ++i)
    if (ppl[i] < ppl[best]) best = i;
  return best;
}

PseudoGroundTruth pseudo_gt(const Grid& grid, std::string_view dataset) {
  PseudoGroundTruth out;
  out.dataset = dataset;
  Grid subset;
  for (const auto& c : grid)
    if (c.dataset == dataset) subset.push_back(c);
  if (subset.empty())
    throw std::invalid_argument(fmt::format("no cells for dataset '{}'", dataset));
  out.models = grid_models(subset);
  for (const auto& m : out.models) {
    const auto cells = complete_cells(subset, m, dataset);
    double sum = 0.0;
    for (const auto* c : cells) sum += c->accuracy;
    out.mean_accuracy.push_back(sum / static_cast<double>(cells.size()));
  }
  out.ranks = competition_ranks(out.mean_accuracy);
  return out;
}

namespace {

bool has_ties(std::span<const double> v) {
  std::vector<double> s(v.begin(), v.end());
  std::sort(s.begin(), s.end());
  return std::adjacent_find(s.begin(), s.end()) != s.end();
}

// Average (fractional) ranks, ascending.
std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i + j) / 2.0) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("spearman: rankings differ in length");
  if (a.size() < 2) throw std::invalid_argument("spearman needs at least two items");
  const double n = static_cast<double>(a.size());
  if (!has_ties(a) && !has_ties(b)) {
    // Rankings may use any strictly ordered labels; map to 1..n first.
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    double d2 = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
    return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
  }
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

double spearman(std::span<const int> a, std::span<const int> b) {
  std::vector<double> da(a.begin(), a.end()), db(b.begin(), b.end());
  return spearman(std::span<const double>(da), std::span<const double>(db));
}

std::size_t correctly_ranked(std::span<const int> method_ranks,
                             std::span<const int> reference_ranks) {
  if (method_ranks.size() != reference_ranks.size())
    throw std::invalid_argument("correctly_ranked: rankings differ in length");
  std::size_t n = 0;
  for (std::size_t i = 0; i < method_ranks.size(); ++i)
    if (method_ranks[i] == reference_ranks[i]) ++n;
  return n;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Method m) {
  switch (m) {
    case Method::PseudoGt: return "pseudo_gt";
    case Method::Vanilla: return "vanilla";
    case Method::Pia: return "pia";
    case Method::PriDe: return "pride";
    case Method::CpLn: return "cp_ln";
  }
  return "?";
}

std::optional<Method> parse_method(std::string_view s) {
  for (auto m : {Method::PseudoGt, Method::Vanilla, Method::Pia, Method::PriDe, Method::CpLn})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

std::size_t method_complexity(Method m, std::size_t questions, std::size_t circular,
                              std::size_t formats) {
  switch (m) {
    case Method::PseudoGt: return circular * formats;
    case Method::Vanilla:
    case Method::PriDe: return questions;
    case Method::Pia:
    case Method::CpLn: return circular;
  }
  return 0;
}

std::string_view complexity_class(Method m) {
  switch (m) {
    case Method::PseudoGt: return "O(N*O*P)";
    case Method::Vanilla:
    case Method::PriDe: return "O(N)";
    case Method::Pia:
    case Method::CpLn: return "O(N*O)";
  }
  return "";
}

Scorecard build_scorecard(std::string dataset, std::vector<std::string> models,
                          std::vector<double> reference_accuracy,
                          std::vector<MethodColumn> methods) {
  if (reference_accuracy.size() != models.size())
    throw std::invalid_argument("reference accuracies must match the model list");
  Scorecard card;
  card.dataset = std::move(dataset);
  card.models = std::move(models);
  card.reference.method = Method::PseudoGt;
  card.reference.complexity_class = std::string(complexity_class(Method::PseudoGt));
  const auto ref_ranks = competition_ranks(reference_accuracy);
  for (std::size_t i = 0; i < ref_ranks.size(); ++i) {
    card.reference.accuracy.push_back(reference_accuracy[i]);
    card.reference.ranks.push_back(ref_ranks[i]);
  }
  for (auto& col : methods) {
    if (col.accuracy.size() != card.models.size())
      throw std::invalid_argument(
          fmt::format("method {} has {} accuracies for {} models", to_string(col.method),
                      col.accuracy.size(), card.models.size()));
    const bool complete = std::all_of(col.accuracy.begin(), col.accuracy.end(),
                                      [](const auto& a) { return a.has_value(); });
    col.ranks.assign(card.models.size(), std::nullopt);
    if (complete) {
      std::vector<double> acc;
      for (const auto& a : col.accuracy) acc.push_back(*a);
      const auto ranks = competition_ranks(acc);
      for (std::size_t i = 0; i < ranks.size(); ++i) col.ranks[i] = ranks[i];
      if (ranks.size() >= 2)
        col.correlation = spearman(std::span<const int>(ranks), std::span<const int>(ref_ranks));
      col.correctly_ranked = correctly_ranked(ranks, ref_ranks);
    }
    card.methods.push_back(std::move(col));
  }
  return card;
}

std::string write_scorecard_csv(const Scorecard& card) {
  std::string out =
      "dataset,method,model,accuracy,rank,complexity,forward_passes,correlation,correctly_ranked,"
      "note\n";
  auto emit = [&](const MethodColumn& col) {
    std::string note = col.note;
    std::replace(note.begin(), note.end(), ',', ';');
    std::replace(note.begin(), note.end(), '\n', ' ');
    for (std::size_t i = 0; i < card.models.size(); ++i) {
      out += fmt::format(
          "{},{},{},{},{},{},{},{},{},{}\n", card.dataset, to_string(col.method), card.models[i],
          col.accuracy[i] ? fmt::format("{:.4f}", 100.0 * *col.accuracy[i]) : "NA",
          col.ranks[i] ? std::to_string(*col.ranks[i]) : "NA",
          col.complexity_class.empty() ? "NA" : col.complexity_class,
          col.complexity ? std::to_string(*col.complexity) : "NA",
          col.correlation ? fmt::format("{:.4f}", *col.correlation) : "NA",
          col.correctly_ranked
              ? fmt::format("{}/{}", *col.correctly_ranked, card.models.size())
              : "NA",
          note);
    }
  };
  emit(card.reference);
  for (const auto& col : card.methods) emit(col);
  return out;
}

PublishedMethodTable read_published_methods(std::string_view text) {
  PublishedMethodTable t;
  bool header = true;
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    auto end = std::min(text.find('\n', pos), text.size());
    auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (trim_output(line).empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    auto f = split_csv_line(line);
    if (f.size() != 5)
      throw std::invalid_argument(fmt::format("line {}: expected 5 fields", line_no));
    auto m = parse_method(f[1]);
    if (!m) throw std::invalid_argument(fmt::format("line {}: unknown method '{}'", line_no, f[1]));
    t.rows[std::string(f[0])][*m][std::string(f[2])] = {std::stod(std::string(f[3])),
                                                        std::stoi(std::string(f[4]))};
  }
  return t;
}

PublishedMethodTable read_published_methods_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open {}", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  return read_published_methods(ss.str());
}

// ---------------------------------------------------------------------------

std::vector<double> observed_id_probabilities(const RunRecord& record,
                                              std::span<const std::string> ids) {
  std::vector<double> p(ids.size(), 0.0);
  if (record.token_logprobs && !record.token_logprobs->empty()) {
    const auto& first = record.token_logprobs->front();
    // Exact token match first, then a token that is a prefix of the ID.
    for (std::size_t i = 0; i < ids.size(); ++i) {
      std::optional<double> exact, prefix;
      for (const auto& [tok, lp] : first.top) {
        const auto t = trim_output(tok);
        if (t.empty()) continue;
        if (t == ids[i] && !exact) exact = lp;
        else if (ids[i].starts_with(t) && !prefix) prefix = lp;
      }
      if (exact) p[i] = std::exp(*exact);
      else if (prefix) p[i] = std::exp(*prefix);
    }
  }
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  if (total <= 0.0) return std::vector<double>(ids.size(), 1.0 / static_cast<double>(ids.size()));
  for (auto& x : p) x /= total;
  return p;
}

namespace {

std::map<std::string, const RunRecord*> records_for(std::span<const RunRecord> records,
                                                    std::string_view dataset,
                                                    std::string_view model,
                                                    const PromptFormat& format) {
  std::map<std::string, const RunRecord*> out;
  for (const auto& r : records)
    if (r.ok() && r.dataset == dataset && r.model == model && r.format == format)
      out[fmt::format("{}\x1f{}", r.source_id, r.rotation)] = &r;
  return out;
}

const RunRecord& require(const std::map<std::string, const RunRecord*>& by_key,
                         const std::string& id, std::size_t rotation) {
  auto it = by_key.find(fmt::format("{}\x1f{}", id, rotation));
  if (it == by_key.end())
    throw std::invalid_argument(
        fmt::format("no successful record for question '{}' rotation {}", id, rotation));
  return *it->second;
}

}  // namespace

double vanilla_accuracy(std::span<const RunRecord> records, const Dataset& dataset,
                        std::string_view model, const PromptFormat& format) {
  if (dataset.size() == 0) throw std::invalid_argument("empty dataset");
  const auto by_key = records_for(records, dataset.name(), model, format);
  std::size_t correct = 0;
  for (const auto& q : dataset.records()) {
    const auto& r = require(by_key, q.id, 0);
    if (exact_match(r.output, option_id(format.id_set, q.gold_index))) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

double pia_accuracy(const EvalCell& cell) {
  if (cell.position_present.empty() || cell.n == 0)
    throw std::invalid_argument("PIA needs per-position counts");
  const auto first = cell.position_present.front();
  for (auto v : cell.position_present)
    if (v != first)
      throw UnsupportedDatasetError("PIA requires questions with one option count");
  const auto m = cell.position_present.size();
  return pia(cell.position_correct, cell.position_selected, cell.n, m);
}

PriorVector pride_prior_from_records(std::span<const RunRecord> records,
                                     const Dataset& calibration, std::string_view model,
                                     const PromptFormat& format,
                                     std::optional<std::size_t> max_questions, double floor) {
  if (!calibration.uniform_option_count())
    throw UnsupportedDatasetError(fmt::format(
        "PriDe calibration dataset '{}' mixes option counts", calibration.name()));
  const auto by_key = records_for(records, calibration.name(), model, format);
  std::vector<std::vector<double>> observed;
  std::size_t used = 0;
  for (const auto& q : calibration.records()) {
    if (max_questions && used >= *max_questions) break;
    const auto ids = option_ids(format.id_set, q.options.size());
    for (std::size_t rot = 0; rot < q.options.size(); ++rot)
      observed.push_back(observed_id_probabilities(require(by_key, q.id, rot), ids));
    ++used;
  }
  return pride_prior(observed, floor);
}

double pride_accuracy(std::span<const RunRecord> records, const Dataset& dataset,
                      std::string_view model, const PromptFormat& format,
                      const PriorVector& prior) {
  if (!dataset.uniform_option_count())
    throw UnsupportedDatasetError(
        fmt::format("PriDe cannot debias '{}': mixed option counts", dataset.name()));
  if (dataset.size() == 0) throw std::invalid_argument("empty dataset");
  if (dataset.records().front().options.size() != prior.p.size())
    throw UnsupportedDatasetError("PriDe prior was estimated for a different option count");
  const auto by_key = records_for(records, dataset.name(), model, format);
  std::size_t correct = 0;
  for (const auto& q : dataset.records()) {
    const auto ids = option_ids(format.id_set, q.options.size());
    const auto p = observed_id_probabilities(require(by_key, q.id, 0), ids);
    if (pride_debias(p, prior) == q.gold_index) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

double cp_ln_accuracy(const Backend& backend, const Dataset& dataset) {
  if (!backend.capabilities().continuation_scoring)
    throw BackendError(ErrorClass::CapabilityMissing, "backend cannot score continuations");
  if (dataset.size() == 0) throw std::invalid_argument("empty dataset");
  std::size_t correct = 0;
  for (const auto& q : dataset.records()) {
    std::vector<double> ppl;
    for (const auto& opt : q.options)
      ppl.push_back(perplexity(backend.score_continuation(q.question, q.image_ref, opt)));
    if (cp_ln_select(ppl) == q.gold_index) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

}  // namespace mcbias
