#include <atomic>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "mcbias/confidence.hpp"
#include "mcbias/dataset.hpp"
#include "mcbias/metrics.hpp"
#include "mcbias/mitigation.hpp"
#include "mcbias/model_backend.hpp"
#include "mcbias/prompt_grammar.hpp"
#include "mcbias/reporting.hpp"
#include "mcbias/run_matrix.hpp"
#include "mcbias/significance.hpp"

namespace fs = std::filesystem;
using namespace mcbias;

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop = true; }

struct Global {
  std::string config;
  std::string cache = "cache";
  std::string out = "out";
};

std::string safe_name(std::string_view s) {
  std::string out;
  for (char c : s)
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.' || c == '_') ? c : '_';
  return out;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << text;
  if (!out) throw std::runtime_error(fmt::format("write failed: {}", path.string()));
}

BackendConfig remote_config(const Global& g) {
  return g.config.empty() ? BackendConfig{} : load_backend_config(g.config);
}

// "path" or "NAME=path"
std::vector<Dataset> load_datasets(const std::vector<std::string>& specs) {
  std::vector<Dataset> out;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    if (eq != std::string::npos && !fs::exists(s))
      out.push_back(load_dataset(s.substr(eq + 1), s.substr(0, eq)));
    else
      out.push_back(load_dataset(s));
  }
  return out;
}

std::vector<const Dataset*> pointers(const std::vector<Dataset>& ds) {
  std::vector<const Dataset*> out;
  for (const auto& d : ds) out.push_back(&d);
  return out;
}

std::vector<PromptFormat> resolve_formats(const std::vector<std::string>& keys) {
  if (keys.empty()) {
    auto all = enumerate_formats();
    return {all.begin(), all.end()};
  }
  std::vector<PromptFormat> out;
  for (const auto& k : keys) out.push_back(parse_format(k));
  return out;
}

Grid load_grid(const std::string& path, bool fixture) {
  return fixture ? ingest_published_grid(path) : read_grid_csv_file(path);
}

StubOptions stub_options(int latency_ms, bool uniform) {
  StubOptions o;
  o.latency = std::chrono::milliseconds(latency_ms);
  o.uniform_confidence = uniform;
  return o;
}

// ---------------------------------------------------------------------------

struct RenderArgs {
  std::string question;
  std::vector<std::string> options;
  std::string dataset;
  std::string id;
  std::size_t rotation = 0;
  std::vector<std::string> formats;
};

int cmd_render(const RenderArgs& a) {
  std::string question = a.question;
  std::vector<std::string> options = a.options;
  if (!a.dataset.empty()) {
    const auto ds = load_dataset(a.dataset);
    const auto* rec = a.id.empty() ? (ds.size() ? &ds.records().front() : nullptr) : ds.find(a.id);
    if (!rec) throw std::invalid_argument(fmt::format("question '{}' not found", a.id));
    const auto inst = rotate(*rec, a.rotation);
    question = rec->question;
    options = inst.options;
  }
  bool first = true;
  for (const auto& f : resolve_formats(a.formats)) {
    if (!first) std::cout << "\n";
    if (a.formats.size() != 1) std::cout << "### " << format_key(f) << "\n";
    std::cout << render_prompt(question, options, f) << "\n";
    first = false;
  }
  return 0;
}

int cmd_expand(const std::vector<std::string>& specs, bool instances) {
  const auto datasets = load_datasets(specs);
  if (instances) {
    for (const auto& d : datasets)
      for (const auto& r : d.records())
        for (const auto& inst : circular_expand(r)) {
          QuestionRecord q{inst.source_id, r.image_ref, r.question, inst.options,
                           inst.gold_position};
          q.id = fmt::format("{}#{}", inst.source_id, inst.rotation);
          std::cout << serialize_record(q) << "\n";
        }
    return 0;
  }
  std::cout << "dataset,questions,circular_instances,expected_questions,expected_circular,matches\n";
  int rc = 0;
  for (const auto& d : datasets) {
    const auto meta = known_benchmark(d.name());
    const auto n = expanded_count(d);
    std::string exp_q = "NA", exp_c = "NA", matches = "NA";
    if (meta && meta->expected_circular) {
      exp_q = std::to_string(meta->expected_single.value_or(0));
      exp_c = std::to_string(*meta->expected_circular);
      const bool ok = *meta->expected_circular == n && meta->expected_single == d.size();
      matches = ok ? "yes" : "no";
      if (!ok) rc = 1;
    }
    std::cout << fmt::format("{},{},{},{},{},{}\n", d.name(), d.size(), n, exp_q, exp_c, matches);
  }
  return rc;
}

int cmd_plan(const std::vector<std::string>& models, const std::vector<std::string>& dataset_specs,
             const std::vector<std::string>& sizes, const std::vector<std::string>& format_keys) {
  std::vector<DatasetSize> ds;
  for (const auto& d : load_datasets(dataset_specs)) ds.push_back({d.name(), expanded_count(d)});
  for (const auto& s : sizes) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      const auto meta = known_benchmark(s);
      if (!meta || !meta->expected_circular)
        throw std::invalid_argument(fmt::format("--size '{}': expected NAME=COUNT or a known benchmark", s));
      ds.push_back({s, *meta->expected_circular});
    } else {
      ds.push_back({s.substr(0, eq), static_cast<std::size_t>(std::stoull(s.substr(eq + 1)))});
    }
  }
  const auto formats = resolve_formats(format_keys);
  const auto plan = plan_runs(models, ds, formats);
  std::map<std::pair<std::string, std::string>, std::size_t> per;
  for (const auto& c : plan.cells) per[{c.model, c.dataset}] += c.instances;
  std::cout << "model,dataset,formats,requests\n";
  for (const auto& m : models)
    for (const auto& d : ds)
      std::cout << fmt::format("{},{},{},{}\n", m, d.name, formats.size(), per[{m, d.name}]);
  std::cout << fmt::format("total,,,{}\n", plan.total_requests);
  return 0;
}

struct RunArgs {
  std::vector<std::string> models;
  std::vector<std::string> datasets;
  std::vector<std::string> formats;
  std::size_t max_inflight = 4;
  std::size_t max_attempts = 2;
  int stub_latency_ms = 0;
  bool uniform_confidence = false;
  bool quiet = false;
};

int cmd_run(const Global& g, const RunArgs& a) {
  const auto datasets = load_datasets(a.datasets);
  const auto ptrs = pointers(datasets);
  const auto formats = resolve_formats(a.formats);
  const auto registry = BackendRegistry::build(a.models, ptrs, remote_config(g),
                                               stub_options(a.stub_latency_ms, a.uniform_confidence));
  const auto plan = plan_runs(a.models, std::span<const Dataset* const>(ptrs), formats);
  RunCache cache(g.cache);
  ExecuteOptions opts;
  opts.max_inflight = a.max_inflight;
  opts.max_attempts = a.max_attempts;
  opts.should_stop = [] { return g_stop.load(); };
  const auto report = execute(plan, ptrs, registry, cache, opts);

  const auto records = cache.load();
  const auto agg = aggregate(records, ptrs);
  write_file(fs::path(g.out) / "grid.csv", write_grid_csv(agg.cells));
  if (!a.quiet) {
    std::cerr << fmt::format("planned {} requests: {} cached, {} issued, {} ok, {} failed\n",
                             plan.total_requests, report.skipped, report.issued,
                             report.succeeded, report.failed);
    for (const auto& c : report.incomplete_cells())
      std::cerr << fmt::format("incomplete: {} / {} / {}: {}/{} ok\n", c.model, c.dataset,
                               format_key(c.format), c.succeeded, c.planned);
    if (report.stopped) std::cerr << "stopped before completion\n";
  }
  return report.complete() ? 0 : 2;
}

int cmd_metrics(const Global& g, const std::string& grid_path, bool fixture) {
  const auto grid = load_grid(grid_path, fixture);
  const fs::path out(g.out);
  const auto filtered = coverage_filter(grid);
  std::string removed = "model,dataset,separator,delimiter,id_set,accuracy,coverage\n";
  removed += write_grid_csv(filtered.removed).substr(removed.size());
  write_file(out / "coverage_removed.csv", removed);
  std::cout << fmt::format("{} cells, {} below {:.0f}% coverage\n", grid.size(),
                           filtered.removed.size(), 100.0 * kCoverageThreshold);
  for (const auto& d : grid_datasets(grid)) {
    write_file(out / fmt::format("ranks_{}.csv", safe_name(d)), write_rank_csv(grid, d));
    write_file(out / fmt::format("deviation_{}.csv", safe_name(d)),
               write_deviation_csv(deviation_matrix(grid, d, false)));
    write_file(out / fmt::format("deviation_filtered_{}.csv", safe_name(d)),
               write_deviation_csv(deviation_matrix(grid, d, true)));
    const auto pgt = pseudo_gt(grid, d);
    for (std::size_t i = 0; i < pgt.models.size(); ++i)
      std::cout << fmt::format("{},{},{:.2f},{}\n", d, pgt.models[i], 100.0 * pgt.mean_accuracy[i],
                               pgt.ranks[i]);
  }
  return 0;
}

struct MitigateArgs {
  std::string grid;
  bool fixture = false;
  std::string published;
  std::vector<std::string> models;
  std::vector<std::string> datasets;
  std::string calibration;
  std::string format;
  std::optional<std::size_t> calibration_questions;
};

int cmd_mitigate_published(const Global& g, const MitigateArgs& a) {
  const auto grid = load_grid(a.grid, a.fixture);
  const auto table = read_published_methods_file(a.published);
  std::string all;
  for (const auto& [dataset, methods] : table.rows) {
    const auto pgt = pseudo_gt(grid, dataset);
    std::vector<MethodColumn> cols;
    for (auto m : {Method::Vanilla, Method::Pia, Method::PriDe, Method::CpLn}) {
      MethodColumn col;
      col.method = m;
      col.complexity_class = std::string(complexity_class(m));
      auto it = methods.find(m);
      for (const auto& model : pgt.models) {
        if (it != methods.end() && it->second.count(model))
          col.accuracy.push_back(it->second.at(model).first / 100.0);
        else
          col.accuracy.push_back(std::nullopt);
      }
      if (it == methods.end()) col.note = "not reported";
      if (m == Method::Pia) col.note = "published values on accuracy scale";
      cols.push_back(std::move(col));
    }
    const auto card = build_scorecard(dataset, pgt.models, pgt.mean_accuracy, std::move(cols));
    const auto csv = write_scorecard_csv(card);
    write_file(fs::path(g.out) / fmt::format("scorecard_{}.csv", safe_name(dataset)), csv);
    all += all.empty() ? csv : csv.substr(csv.find('\n') + 1);
  }
  std::cout << all;
  return 0;
}

int cmd_mitigate_live(const Global& g, const MitigateArgs& a) {
  auto datasets = load_datasets(a.datasets);
  std::optional<Dataset> calib;
  if (!a.calibration.empty()) calib = load_dataset(a.calibration);
  auto ptrs = pointers(datasets);
  if (calib) ptrs.push_back(&*calib);
  const auto registry = BackendRegistry::build(a.models, ptrs, remote_config(g));
  RunCache cache(g.cache);
  const auto records = cache.load();
  const auto agg = aggregate(records, ptrs);
  std::string all;
  for (const auto& ds : datasets) {
    const auto format = a.format.empty()
                            ? ds.metadata().standard_format.value_or(PromptFormat{})
                            : parse_format(a.format);
    std::vector<double> reference;
    for (const auto& m : a.models) {
      const auto cells = complete_cells(agg.cells, m, ds.name());
      double s = 0.0;
      for (const auto* c : cells) s += c->accuracy;
      reference.push_back(s / static_cast<double>(cells.size()));
    }
    const auto circular = expanded_count(ds);
    std::vector<MethodColumn> cols;
    for (auto method : {Method::Vanilla, Method::Pia, Method::PriDe, Method::CpLn}) {
      MethodColumn col;
      col.method = method;
      col.complexity = method_complexity(method, ds.size(), circular);
      col.complexity_class = std::string(complexity_class(method));
      for (const auto& m : a.models) {
        try {
          switch (method) {
            case Method::Vanilla:
              col.accuracy.push_back(vanilla_accuracy(records, ds, m, format));
              break;
            case Method::Pia: {
              const auto cells = cells_by_format(agg.cells, m, ds.name());
              const auto* cell = cells[format_index(format)];
              if (!cell) throw std::invalid_argument("cell missing");
              col.accuracy.push_back(pia_accuracy(*cell));
              break;
            }
            case Method::PriDe: {
              const Dataset& c = calib ? *calib : ds;
              const auto prior =
                  pride_prior_from_records(records, c, m, format, a.calibration_questions);
              col.accuracy.push_back(pride_accuracy(records, ds, m, format, prior));
              break;
            }
            case Method::CpLn:
              col.accuracy.push_back(cp_ln_accuracy(*registry.get(m), ds));
              break;
            default:
              break;
          }
        } catch (const UnsupportedDatasetError& e) {
          col.accuracy.push_back(std::nullopt);
          col.note = "NA: mixed option counts";
        } catch (const BackendError& e) {
          col.accuracy.push_back(std::nullopt);
          col.note = fmt::format("NA: {}", e.what());
        }
      }
      cols.push_back(std::move(col));
    }
    const auto card = build_scorecard(ds.name(), a.models, reference, std::move(cols));
    const auto csv = write_scorecard_csv(card);
    write_file(fs::path(g.out) / fmt::format("scorecard_{}.csv", safe_name(ds.name())), csv);
    all += all.empty() ? csv : csv.substr(csv.find('\n') + 1);
  }
  std::cout << all;
  return 0;
}

int cmd_lmm(const Global& g, const std::string& grid_path, bool fixture, bool reml,
            bool filtered) {
  auto grid = load_grid(grid_path, fixture);
  if (filtered) grid = coverage_filter(grid).kept;
  FitOptions opts;
  opts.criterion = reml ? Criterion::REML : Criterion::ML;
  const auto fit = fit_lmm(build_design(grid), opts);
  const auto effects = fixed_effects(fit);
  const auto csv = write_effects_csv(effects);
  write_file(fs::path(g.out) / "effects.csv", csv);
  write_file(fs::path(g.out) / "effects.svg", effects_bar_svg(effects));
  std::cout << csv;
  std::cerr << fmt::format("rows {}, groups {}, sigma2_e {:.4f}, sigma2_u {:.4f}, loglik {:.4f}\n",
                           fit.rows, fit.groups, fit.sigma2_e, fit.sigma2_u, fit.log_likelihood());
  for (const auto& d : fit.diagnostics) std::cerr << "diagnostic: " << d << "\n";
  return 0;
}

struct ConfidenceArgs {
  std::string model;
  std::string dataset;
  std::string reference;
  std::vector<std::string> formats;
};

int cmd_confidence(const Global& g, const ConfidenceArgs& a) {
  const auto ds = load_dataset(a.dataset);
  const auto reference = a.reference.empty()
                             ? ds.metadata().standard_format.value_or(PromptFormat{})
                             : parse_format(a.reference);
  RunCache cache(g.cache);
  const auto records = cache.load();
  const auto binning = bin_questions(question_confidences(records, ds, a.model, reference), reference);
  const auto formats = resolve_formats(a.formats);
  const auto rows = per_bin_accuracy(binning, records, ds, a.model, formats);
  const auto csv = write_bin_report_csv(rows);
  write_file(fs::path(g.out) /
                 fmt::format("confidence_{}_{}.csv", safe_name(a.model), safe_name(ds.name())),
             csv);
  std::cout << csv;
  return 0;
}

int cmd_report(const Global& g, const std::string& grid_path, bool fixture) {
  const auto grid = load_grid(grid_path, fixture);
  const fs::path out(g.out);
  for (const auto& d : grid_datasets(grid)) {
    const auto name = safe_name(d);
    write_file(out / fmt::format("rank_boxplot_{}.svg", name), rank_boxplot_svg(grid, d));
    write_file(out / fmt::format("ranks_{}.csv", name), write_rank_csv(grid, d));
    const auto raw = deviation_matrix(grid, d, false);
    const auto flt = deviation_matrix(grid, d, true);
    write_file(out / fmt::format("deviation_{}.svg", name), deviation_heatmap_svg(raw));
    write_file(out / fmt::format("deviation_filtered_{}.svg", name), deviation_heatmap_svg(flt));
    write_file(out / fmt::format("deviation_{}.csv", name), write_deviation_csv(raw));
    write_file(out / fmt::format("deviation_filtered_{}.csv", name), write_deviation_csv(flt));
  }
  const auto effects = fixed_effects(fit_lmm(build_design(grid)));
  write_file(out / "effects.csv", write_effects_csv(effects));
  write_file(out / "effects.svg", effects_bar_svg(effects));
  std::cout << fmt::format("wrote report for {} datasets to {}\n", grid_datasets(grid).size(),
                           out.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-format bias harness for multiple-choice evaluation"};
  app.require_subcommand(1);
  Global g;
  app.add_option("--config", g.config, "Backend config file (key = value)");
  app.add_option("--cache", g.cache, "Run cache directory");
  app.add_option("--out", g.out, "Output directory");

  RenderArgs render;
  auto* c_render = app.add_subcommand("render", "Render prompts");
  c_render->add_option("--question", render.question);
  c_render->add_option("--option", render.options, "Option text (repeat)");
  c_render->add_option("--dataset", render.dataset, "Take the question from a JSONL dataset");
  c_render->add_option("--id", render.id);
  c_render->add_option("--rotation", render.rotation);
  c_render->add_option("--format", render.formats, "sep/delim/ids; all 48 if omitted");

  std::vector<std::string> expand_ds;
  bool expand_instances = false;
  auto* c_expand = app.add_subcommand("expand", "Circular expansion counts");
  c_expand->add_option("--dataset", expand_ds)->required();
  c_expand->add_flag("--instances", expand_instances, "Print rotated instances as JSONL");

  std::vector<std::string> plan_models, plan_ds, plan_sizes, plan_formats;
  auto* c_plan = app.add_subcommand("plan", "Request counts for a run matrix");
  c_plan->add_option("--model", plan_models)->required();
  c_plan->add_option("--dataset", plan_ds);
  c_plan->add_option("--size", plan_sizes, "NAME=CIRCULAR_COUNT or a known benchmark name");
  c_plan->add_option("--format", plan_formats);

  RunArgs run;
  auto* c_run = app.add_subcommand("run", "Execute the run matrix into the cache");
  c_run->add_option("--model", run.models)->required();
  c_run->add_option("--dataset", run.datasets)->required();
  c_run->add_option("--format", run.formats);
  c_run->add_option("--max-inflight", run.max_inflight)->check(CLI::PositiveNumber);
  c_run->add_option("--max-attempts", run.max_attempts)->check(CLI::PositiveNumber);
  c_run->add_option("--stub-latency-ms", run.stub_latency_ms)->check(CLI::NonNegativeNumber);
  c_run->add_flag("--uniform-confidence", run.uniform_confidence);
  c_run->add_flag("--quiet", run.quiet);

  std::string grid_path;
  bool fixture = false;
  auto* c_metrics = app.add_subcommand("metrics", "Ranks, deviations and coverage filter");
  c_metrics->add_option("--grid", grid_path)->required();
  c_metrics->add_flag("--fixture", fixture, "Validate as a published 7x48 grid");

  MitigateArgs mit;
  auto* c_mit = app.add_subcommand("mitigate", "Mitigation scorecards");
  c_mit->add_option("--grid", mit.grid, "Grid for the pseudo ground truth (published mode)");
  c_mit->add_flag("--fixture", mit.fixture);
  c_mit->add_option("--published", mit.published, "Published method accuracies");
  c_mit->add_option("--model", mit.models);
  c_mit->add_option("--dataset", mit.datasets);
  c_mit->add_option("--calibration", mit.calibration, "PriDe calibration dataset");
  c_mit->add_option("--calibration-questions", mit.calibration_questions);
  c_mit->add_option("--format", mit.format, "Evaluation format; dataset standard if omitted");

  bool reml = false, lmm_filtered = false;
  auto* c_lmm = app.add_subcommand("lmm", "Mixed-model format effects");
  c_lmm->add_option("--grid", grid_path)->required();
  c_lmm->add_flag("--fixture", fixture);
  c_lmm->add_flag("--reml", reml);
  c_lmm->add_flag("--coverage-filter", lmm_filtered);

  ConfidenceArgs conf;
  auto* c_conf = app.add_subcommand("confidence", "Per-confidence-bin accuracy");
  c_conf->add_option("--model", conf.model)->required();
  c_conf->add_option("--dataset", conf.dataset)->required();
  c_conf->add_option("--reference", conf.reference);
  c_conf->add_option("--format", conf.formats);

  auto* c_report = app.add_subcommand("report", "SVG figures and tables for a grid");
  c_report->add_option("--grid", grid_path)->required();
  c_report->add_flag("--fixture", fixture);

  CLI11_PARSE(app, argc, argv);

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);

  try {
    if (*c_render) return cmd_render(render);
    if (*c_expand) return cmd_expand(expand_ds, expand_instances);
    if (*c_plan) return cmd_plan(plan_models, plan_ds, plan_sizes, plan_formats);
    if (*c_run) return cmd_run(g, run);
    if (*c_metrics) return cmd_metrics(g, grid_path, fixture);
    if (*c_mit) {
      if (!mit.published.empty()) {
        if (mit.grid.empty()) throw std::invalid_argument("--published needs --grid");
        return cmd_mitigate_published(g, mit);
      }
      if (mit.models.empty() || mit.datasets.empty())
        throw std::invalid_argument("live mitigation needs --model and --dataset");
      return cmd_mitigate_live(g, mit);
    }
    if (*c_lmm) return cmd_lmm(g, grid_path, fixture, reml, lmm_filtered);
    if (*c_conf) return cmd_confidence(g, conf);
    if (*c_report) return cmd_report(g, grid_path, fixture);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
