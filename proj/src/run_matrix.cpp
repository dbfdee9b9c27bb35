#include "mcbias/run_matrix.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <ctime>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>

#include "json.hpp"

namespace mcbias {

using ojson = nlohmann::ordered_json;

RunPlan plan_runs(std::span<const std::string> models,
                  std::span<const DatasetSize> datasets,
                  std::span<const PromptFormat> formats) {
  RunPlan plan;
  for (const auto& m : models)
    for (const auto& d : datasets)
      for (const auto& f : formats) {
        plan.cells.push_back(PlannedCell{m, d.name, f, d.circular_instances});
        plan.total_requests += d.circular_instances;
      }
  return plan;
}

RunPlan plan_runs(std::span<const std::string> models,
                  std::span<const Dataset* const> datasets,
                  std::span<const PromptFormat> formats) {
  std::vector<DatasetSize> sizes;
  for (const Dataset* d : datasets) sizes.push_back({d->name(), expanded_count(*d)});
  return plan_runs(models, std::span<const DatasetSize>(sizes), formats);
}

std::string record_key(std::string_view model, std::string_view dataset,
                       const PromptFormat& format, std::string_view source_id,
                       std::size_t rotation) {
  return fmt::format("{}\x1f{}\x1f{}\x1f{}\x1f{}", model, dataset, format_key(format),
                     source_id, rotation);
}

std::string record_key(const RunRecord& r) {
  return record_key(r.model, r.dataset, r.format, r.source_id, r.rotation);
}

bool same_record(const RunRecord& a, const RunRecord& b, bool ignore_timestamp) {
  return a.model == b.model && a.dataset == b.dataset && a.format == b.format &&
         a.source_id == b.source_id && a.rotation == b.rotation &&
         a.prompt_digest == b.prompt_digest && a.output == b.output &&
         a.token_logprobs == b.token_logprobs &&
         (ignore_timestamp || a.timestamp == b.timestamp) && a.error == b.error &&
         a.error_message == b.error_message && a.attempts == b.attempts;
}

std::string serialize_run_record(const RunRecord& r) {
  ojson j;
  j["model"] = r.model;
  j["dataset"] = r.dataset;
  j["separator"] = to_string(r.format.separator);
  j["delimiter"] = to_string(r.format.delimiter);
  j["id_set"] = to_string(r.format.id_set);
  j["source_id"] = r.source_id;
  j["rotation"] = r.rotation;
  j["prompt_digest"] = r.prompt_digest;
  j["output"] = r.output;
  if (r.token_logprobs) {
    ojson toks = ojson::array();
    for (const auto& t : *r.token_logprobs) {
      ojson top = ojson::array();
      for (const auto& [tok, lp] : t.top) top.push_back(ojson::array({tok, lp}));
      toks.push_back(ojson{{"token", t.token}, {"logprob", t.logprob}, {"top", top}});
    }
    j["token_logprobs"] = std::move(toks);
  }
  j["timestamp"] = r.timestamp;
  if (r.error) {
    j["error"] = to_string(*r.error);
    j["error_message"] = r.error_message;
  }
  j["attempts"] = r.attempts;
  return j.dump();
}

namespace {

std::optional<ErrorClass> parse_error_class(std::string_view s) {
  for (auto c : {ErrorClass::Transport, ErrorClass::Refusal,
                 ErrorClass::CapabilityMissing, ErrorClass::Protocol})
    if (to_string(c) == s) return c;
  return std::nullopt;
}

}  // namespace

RunRecord parse_run_record(std::string_view line) {
  const auto j = ojson::parse(line);
  RunRecord r;
  r.model = j.at("model").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  auto sep = parse_separator(j.at("separator").get<std::string>());
  auto del = parse_delimiter(j.at("delimiter").get<std::string>());
  auto ids = parse_id_set(j.at("id_set").get<std::string>());
  if (!sep || !del || !ids) throw std::invalid_argument("record has an unknown format level");
  r.format = PromptFormat{*ids, *del, *sep};
  r.source_id = j.at("source_id").get<std::string>();
  r.rotation = j.at("rotation").get<std::size_t>();
  r.prompt_digest = j.at("prompt_digest").get<std::string>();
  r.output = j.at("output").get<std::string>();
  if (auto it = j.find("token_logprobs"); it != j.end()) {
    std::vector<TokenLogprob> toks;
    for (const auto& t : *it) {
      TokenLogprob tl;
      tl.token = t.at("token").get<std::string>();
      tl.logprob = t.at("logprob").get<double>();
      for (const auto& alt : t.at("top"))
        tl.top.emplace_back(alt.at(0).get<std::string>(), alt.at(1).get<double>());
      toks.push_back(std::move(tl));
    }
    r.token_logprobs = std::move(toks);
  }
  r.timestamp = j.value("timestamp", std::string{});
  if (auto it = j.find("error"); it != j.end()) {
    r.error = parse_error_class(it->get<std::string>());
    if (!r.error) throw std::invalid_argument("record has an unknown error class");
    r.error_message = j.value("error_message", std::string{});
  }
  r.attempts = j.value("attempts", std::size_t{1});
  return r;
}

// ---------------------------------------------------------------------------

RunCache::RunCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

RunCache::~RunCache() {
  if (out_) std::fclose(out_);
}

void RunCache::open_for_append() {
  if (out_) return;
  out_ = std::fopen(records_path().c_str(), "ab");
  if (!out_)
    throw std::runtime_error(fmt::format("cannot open {} for append", records_path().string()));
}

std::vector<RunRecord> RunCache::load(std::size_t* skipped_lines) const {
  std::vector<RunRecord> out;
  std::size_t skipped = 0;
  std::ifstream in(records_path(), std::ios::binary);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(parse_run_record(line));
    } catch (const std::exception&) {
      ++skipped;
    }
  }
  if (skipped_lines) *skipped_lines = skipped;
  return out;
}

void RunCache::append(const RunRecord& r) {
  open_for_append();
  auto line = serialize_run_record(r);
  line += '\n';
  if (std::fwrite(line.data(), 1, line.size(), out_) != line.size())
    throw std::runtime_error("short write to run cache");
  std::fflush(out_);
}

void RunCache::flush() {
  if (out_) std::fflush(out_);
}

void RunCache::compact() {
  if (out_) {
    std::fclose(out_);
    out_ = nullptr;
  }
  auto records = load();
  using SortKey = std::tuple<std::string, std::string, std::size_t, std::string, std::size_t>;
  std::map<SortKey, RunRecord> best;
  for (auto& r : records) {
    SortKey key{r.model, r.dataset, format_index(r.format), r.source_id, r.rotation};
    auto it = best.find(key);
    if (it == best.end()) {
      best.emplace(std::move(key), std::move(r));
    } else if (r.ok() || !it->second.ok()) {
      it->second = std::move(r);
    }
  }
  const auto tmp = dir_ / "records.jsonl.tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    for (const auto& [key, r] : best) out << serialize_run_record(r) << '\n';
    if (!out) throw std::runtime_error("failed to write compacted cache");
  }
  std::filesystem::rename(tmp, records_path());
}

// ---------------------------------------------------------------------------

std::vector<CellStatus> ExecuteReport::incomplete_cells() const {
  std::vector<CellStatus> out;
  for (const auto& c : cells)
    if (!c.complete()) out.push_back(c);
  return out;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace {

struct Job {
  std::size_t cell = 0;
  const QuestionRecord* record = nullptr;
  std::size_t rotation = 0;
};

const Dataset* find_dataset(std::span<const Dataset* const> datasets, std::string_view name) {
  for (const Dataset* d : datasets)
    if (d->name() == name) return d;
  return nullptr;
}

}  // namespace

ExecuteReport execute(const RunPlan& plan, std::span<const Dataset* const> datasets,
                      const BackendRegistry& backends, RunCache& cache,
                      const ExecuteOptions& options,
                      const std::function<void(const RunRecord&)>& on_record) {
  ExecuteReport report;
  std::unordered_set<std::string> done;
  for (const auto& r : cache.load())
    if (r.ok()) done.insert(record_key(r));

  std::vector<Job> jobs;
  report.cells.reserve(plan.cells.size());
  for (std::size_t ci = 0; ci < plan.cells.size(); ++ci) {
    const auto& cell = plan.cells[ci];
    const Dataset* ds = find_dataset(datasets, cell.dataset);
    if (!ds) throw std::invalid_argument(fmt::format("plan names unknown dataset '{}'", cell.dataset));
    if (!backends.contains(cell.model))
      throw std::invalid_argument(fmt::format("plan names unknown model '{}'", cell.model));
    CellStatus status{cell.model, cell.dataset, cell.format, expanded_count(*ds), 0, 0};
    for (const auto& rec : ds->records()) {
      for (std::size_t rot = 0; rot < rec.options.size(); ++rot) {
        if (done.count(record_key(cell.model, cell.dataset, cell.format, rec.id, rot))) {
          ++status.succeeded;
          ++report.skipped;
        } else {
          jobs.push_back(Job{ci, &rec, rot});
        }
      }
    }
    report.cells.push_back(std::move(status));
  }

  std::mutex token_mu;
  std::map<std::tuple<std::string, OptionIdSet, std::size_t>, int> token_budget;
  auto budget_for = [&](const std::string& model, const Backend& backend, OptionIdSet set,
                        std::size_t k) {
    const auto key = std::make_tuple(model, set, k);
    {
      std::lock_guard lock(token_mu);
      if (auto it = token_budget.find(key); it != token_budget.end()) return it->second;
    }
    const int n = static_cast<int>(std::max<std::size_t>(1, max_required_tokens(backend, set, k)));
    std::lock_guard lock(token_mu);
    token_budget.emplace(key, n);
    return n;
  };
  auto clock = options.clock ? options.clock : utc_timestamp;

  auto run_job = [&](const Job& job) {
    const auto& cell = plan.cells[job.cell];
    const auto inst = rotate(*job.record, job.rotation);
    RunRecord r;
    r.model = cell.model;
    r.dataset = cell.dataset;
    r.format = cell.format;
    r.source_id = job.record->id;
    r.rotation = job.rotation;
    r.attempts = 0;
    const auto backend = backends.get(cell.model);
    for (std::size_t attempt = 0; attempt < std::max<std::size_t>(1, options.max_attempts);
         ++attempt) {
      ++r.attempts;
      try {
        const auto prompt =
            render_prompt(job.record->question, inst.options, cell.format, options.layout);
        r.prompt_digest = hex_digest(prompt);
        const int budget = budget_for(cell.model, *backend, cell.format.id_set, inst.options.size());
        auto g = backend->generate(prompt, job.record->image_ref, budget);
        r.output = std::move(g.text);
        r.token_logprobs = std::move(g.token_logprobs);
        r.error.reset();
        r.error_message.clear();
        break;
      } catch (const BackendError& e) {
        r.error = e.kind();
        r.error_message = e.what();
        if (!e.retryable()) break;
      } catch (const std::exception& e) {
        r.error = ErrorClass::Protocol;
        r.error_message = e.what();
        break;
      }
    }
    r.timestamp = clock();
    return r;
  };

  std::mutex mu;
  std::condition_variable cv;
  std::deque<RunRecord> ready;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stopped{false};
  const std::size_t workers =
      std::min<std::size_t>(std::max<std::size_t>(1, options.max_inflight), jobs.size());
  std::size_t running = workers;

  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        if (options.should_stop && options.should_stop()) {
          stopped = true;
          break;
        }
        const auto idx = next.fetch_add(1);
        if (idx >= jobs.size()) break;
        auto rec = run_job(jobs[idx]);
        std::lock_guard lock(mu);
        ready.push_back(std::move(rec));
        cv.notify_one();
      }
      std::lock_guard lock(mu);
      --running;
      cv.notify_one();
    });
  }

  std::unordered_map<std::string, std::size_t> cell_index;
  for (std::size_t i = 0; i < plan.cells.size(); ++i) {
    const auto& c = plan.cells[i];
    cell_index.emplace(fmt::format("{}\x1f{}\x1f{}", c.model, c.dataset, format_key(c.format)), i);
  }

  for (;;) {
    std::unique_lock lock(mu);
    cv.wait(lock, [&] { return !ready.empty() || running == 0; });
    if (ready.empty() && running == 0) break;
    auto rec = std::move(ready.front());
    ready.pop_front();
    lock.unlock();

    cache.append(rec);
    ++report.issued;
    auto& status = report.cells[cell_index.at(
        fmt::format("{}\x1f{}\x1f{}", rec.model, rec.dataset, format_key(rec.format)))];
    if (rec.ok()) {
      ++report.succeeded;
      ++status.succeeded;
    } else {
      ++report.failed;
      ++status.failed;
    }
    if (on_record) on_record(rec);
  }
  for (auto& t : pool) t.join();
  cache.flush();
  report.stopped = stopped;
  if (options.compact && !report.stopped) cache.compact();
  return report;
}

// ---------------------------------------------------------------------------

AggregateResult aggregate(std::span<const RunRecord> records,
                          std::span<const Dataset* const> datasets) {
  struct Acc {
    EvalCell cell;
    std::unordered_set<std::string> seen;
    std::size_t correct = 0;
    std::size_t in_scheme = 0;
  };
  using CellKey = std::tuple<std::string, std::string, std::size_t>;
  std::map<CellKey, Acc> cells;

  for (const auto& r : records) {
    if (!r.ok()) continue;
    const Dataset* ds = find_dataset(datasets, r.dataset);
    if (!ds) continue;
    const QuestionRecord* q = ds->find(r.source_id);
    if (!q || r.rotation >= q->options.size()) continue;
    auto& acc = cells[CellKey{r.model, r.dataset, format_index(r.format)}];
    if (acc.cell.model.empty()) {
      acc.cell.model = r.model;
      acc.cell.dataset = r.dataset;
      acc.cell.format = r.format;
      std::size_t kmax = 0;
      for (const auto& rec : ds->records()) kmax = std::max(kmax, rec.options.size());
      acc.cell.position_selected.assign(kmax, 0);
      acc.cell.position_present.assign(kmax, 0);
      acc.cell.position_correct.assign(kmax, 0);
    }
    if (!acc.seen.insert(fmt::format("{}\x1f{}", r.source_id, r.rotation)).second) continue;

    const auto k = q->options.size();
    const auto gold = rotate(*q, r.rotation).gold_position;
    const auto ids = option_ids(r.format.id_set, k);
    const auto out = trim_output(r.output);
    for (std::size_t i = 0; i < k; ++i) ++acc.cell.position_present[i];
    ++acc.cell.n;
    for (std::size_t i = 0; i < k; ++i) {
      if (ids[i] != out) continue;
      ++acc.in_scheme;
      ++acc.cell.position_selected[i];
      if (i == gold) {
        ++acc.correct;
        ++acc.cell.position_correct[i];
      }
      break;
    }
  }

  AggregateResult result;
  for (auto& [key, acc] : cells) {
    const Dataset* ds = find_dataset(datasets, acc.cell.dataset);
    const auto expected = expanded_count(*ds);
    if (acc.cell.n != expected) {
      result.incomplete.push_back(CellStatus{acc.cell.model, acc.cell.dataset, acc.cell.format,
                                             expected, acc.cell.n, 0});
      continue;
    }
    acc.cell.accuracy = static_cast<double>(acc.correct) / static_cast<double>(acc.cell.n);
    acc.cell.coverage = static_cast<double>(acc.in_scheme) / static_cast<double>(acc.cell.n);
    result.cells.push_back(std::move(acc.cell));
  }
  return result;
}

}  // namespace mcbias
