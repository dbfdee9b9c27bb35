#include "mcbias/confidence.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include <fmt/format.h>

namespace mcbias {

std::string_view to_string(ConfidenceBin b) {
  switch (b) {
    case ConfidenceBin::Top20: return "top20";
    case ConfidenceBin::Middle60: return "middle60";
    case ConfidenceBin::Bottom20: return "bottom20";
  }
  return "?";
}

double gold_confidence(const RunRecord& record, std::string_view gold_id) {
  if (!record.token_logprobs || record.token_logprobs->empty())
    throw BackendError(ErrorClass::CapabilityMissing,
                       fmt::format("record for '{}' carries no log-probabilities",
                                   record.source_id));
  const auto& first = record.token_logprobs->front();
  std::optional<double> prefix;
  for (const auto& [tok, lp] : first.top) {
    const auto t = trim_output(tok);
    if (t.empty()) continue;
    if (t == gold_id) return lp;
    if (!prefix && gold_id.starts_with(t)) prefix = lp;
  }
  if (prefix) return *prefix;
  const auto t = trim_output(first.token);
  if (!t.empty() && gold_id.starts_with(t)) return first.logprob;
  return -std::numeric_limits<double>::infinity();
}

std::size_t ConfidenceBinning::count(ConfidenceBin b) const {
  return static_cast<std::size_t>(std::count_if(
      questions.begin(), questions.end(), [&](const auto& q) { return q.bin == b; }));
}

std::map<std::string, ConfidenceBin> ConfidenceBinning::bins() const {
  std::map<std::string, ConfidenceBin> out;
  for (const auto& q : questions) out[q.id] = q.bin;
  return out;
}

ConfidenceBinning bin_questions(const std::map<std::string, double>& confidences,
                                const PromptFormat& reference) {
  const auto n = confidences.size();
  if (n < 5)
    throw std::invalid_argument(fmt::format("confidence binning needs at least 5 questions, got {}", n));
  ConfidenceBinning out;
  out.reference = reference;
  for (const auto& [id, c] : confidences) {
    if (std::isnan(c)) throw std::invalid_argument(fmt::format("NaN confidence for '{}'", id));
    out.questions.push_back({id, c, ConfidenceBin::Middle60});
  }
  std::stable_sort(out.questions.begin(), out.questions.end(), [](const auto& a, const auto& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return a.id < b.id;
  });
  const std::size_t top = (n + 4) / 5;
  const std::size_t bottom = n / 5;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < top) out.questions[i].bin = ConfidenceBin::Top20;
    else if (i >= n - bottom) out.questions[i].bin = ConfidenceBin::Bottom20;
  }
  return out;
}

namespace {

std::map<std::string, const RunRecord*> index_records(std::span<const RunRecord> records,
                                                      std::string_view dataset,
                                                      std::string_view model,
                                                      const PromptFormat& format) {
  std::map<std::string, const RunRecord*> out;
  for (const auto& r : records)
    if (r.ok() && r.dataset == dataset && r.model == model && r.format == format)
      out[fmt::format("{}\x1f{}", r.source_id, r.rotation)] = &r;
  return out;
}

}  // namespace

std::map<std::string, double> question_confidences(std::span<const RunRecord> records,
                                                   const Dataset& dataset,
                                                   std::string_view model,
                                                   const PromptFormat& reference) {
  const auto by_key = index_records(records, dataset.name(), model, reference);
  std::map<std::string, double> out;
  for (const auto& q : dataset.records()) {
    auto it = by_key.find(fmt::format("{}\x1f{}", q.id, 0));
    if (it == by_key.end())
      throw std::invalid_argument(
          fmt::format("no reference-format record for question '{}'", q.id));
    out[q.id] = gold_confidence(*it->second, option_id(reference.id_set, q.gold_index));
  }
  return out;
}

std::vector<BinAccuracy> per_bin_accuracy(const ConfidenceBinning& binning,
                                          std::span<const RunRecord> records,
                                          const Dataset& dataset, std::string_view model,
                                          std::span<const PromptFormat> formats) {
  std::vector<BinAccuracy> out;
  for (const auto& format : formats) {
    const auto by_key = index_records(records, dataset.name(), model, format);
    BinAccuracy acc[3];
    for (int b = 0; b < 3; ++b) {
      acc[b].bin = static_cast<ConfidenceBin>(b);
      acc[b].format = format;
    }
    for (const auto& qc : binning.questions) {
      const auto* q = dataset.find(qc.id);
      if (!q)
        throw std::invalid_argument(fmt::format("binned question '{}' not in dataset", qc.id));
      auto& a = acc[static_cast<int>(qc.bin)];
      for (std::size_t rot = 0; rot < q->options.size(); ++rot) {
        auto it = by_key.find(fmt::format("{}\x1f{}", q->id, rot));
        if (it == by_key.end())
          throw std::invalid_argument(fmt::format("no record for '{}' rotation {} under {}",
                                                  q->id, rot, format_key(format)));
        const auto inst = rotate(*q, rot);
        ++a.n;
        if (exact_match(it->second->output, option_id(format.id_set, inst.gold_position)))
          ++a.correct;
      }
    }
    for (auto& a : acc) {
      a.accuracy = a.n ? static_cast<double>(a.correct) / static_cast<double>(a.n) : 0.0;
      out.push_back(a);
    }
  }
  return out;
}

std::string write_bin_report_csv(std::span<const BinAccuracy> rows) {
  std::string out = "bin,format,n,accuracy\n";
  for (const auto& r : rows)
    out += fmt::format("{},{},{},{:.6f}\n", to_string(r.bin), format_key(r.format), r.n,
                       r.accuracy);
  return out;
}

}  // namespace mcbias
