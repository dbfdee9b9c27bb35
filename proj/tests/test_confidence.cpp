#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "mcbias/confidence.hpp"
#include "support.hpp"

using namespace mcbias;

namespace {

const PromptFormat kRef{OptionIdSet::Uppercase, OptionDelimiter::Dot, OptionSeparator::LineBreak};

std::map<std::string, double> random_confidences(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-5.0, 0.0);
  std::map<std::string, double> m;
  for (std::size_t i = 0; i < n; ++i) m[fmt::format("q{:03d}", i)] = u(rng);
  return m;
}

struct Run {
  testing::TempDir dir;
  std::vector<RunRecord> records;
};

std::unique_ptr<Run> run_stub(const Dataset& ds, const std::string& model, StubOptions opts = {}) {
  auto run = std::make_unique<Run>();
  std::vector<const Dataset*> ptrs{&ds};
  BackendRegistry reg;
  reg.add(model, std::make_shared<StubBackend>(StubProfile::parse(model.substr(5)), ptrs, opts));
  RunCache cache(run->dir.path());
  const auto formats = enumerate_formats();
  execute(plan_runs(std::vector<std::string>{model}, std::span<const Dataset* const>(ptrs), formats),
          ptrs, reg, cache);
  run->records = cache.load();
  return run;
}

}  // namespace

TEST_CASE("bin sizes") {
  auto sizes = [](std::size_t n) {
    const auto b = bin_questions(random_confidences(n, 1));
    return std::vector<std::size_t>{b.count(ConfidenceBin::Top20), b.count(ConfidenceBin::Middle60),
                                    b.count(ConfidenceBin::Bottom20)};
  };
  CHECK(sizes(10) == std::vector<std::size_t>{2, 6, 2});
  CHECK(sizes(11) == std::vector<std::size_t>{3, 6, 2});
  CHECK(sizes(5) == std::vector<std::size_t>{1, 3, 1});
  for (std::size_t n = 5; n < 60; ++n) {
    const auto s = sizes(n);
    CHECK(s[0] + s[1] + s[2] == n);
    CHECK(s[0] == (n + 4) / 5);
    CHECK(s[2] == n / 5);
  }
  CHECK_THROWS_AS(bin_questions(random_confidences(4, 1)), std::invalid_argument);
  auto nan = random_confidences(6, 1);
  nan.begin()->second = std::nan("");
  CHECK_THROWS_AS(bin_questions(nan), std::invalid_argument);
}

TEST_CASE("ordering: descending confidence, ties by id") {
  std::map<std::string, double> m = {{"e", -1.0}, {"b", -1.0}, {"a", -2.0}, {"d", -0.5}, {"c", -1.0}};
  const auto b = bin_questions(m);
  std::vector<std::string> order;
  for (const auto& q : b.questions) order.push_back(q.id);
  CHECK(order == std::vector<std::string>{"d", "b", "c", "e", "a"});
  CHECK(b.bins().at("d") == ConfidenceBin::Top20);
  CHECK(b.bins().at("a") == ConfidenceBin::Bottom20);
  CHECK(to_string(ConfidenceBin::Middle60) == "middle60");
}

TEST_CASE("bins are invariant under monotone transforms") {
  for (unsigned seed = 1; seed <= 20; ++seed) {
    const auto m = random_confidences(23, seed);
    auto t = m;
    for (auto& [id, v] : t) v = 3.0 * std::exp(v) + 1.0;
    CHECK(bin_questions(m).bins() == bin_questions(t).bins());
  }
}

TEST_CASE("gold confidence from records") {
  RunRecord r;
  r.output = "B";
  CHECK_THROWS_AS(gold_confidence(r, "B"), BackendError);
  r.token_logprobs = std::vector<TokenLogprob>{{"B", -0.2, {{"B", -0.2}, {"A", -1.9}}}};
  CHECK(gold_confidence(r, "B") == doctest::Approx(-0.2));
  CHECK(gold_confidence(r, "A") == doctest::Approx(-1.9));
  CHECK(std::isinf(gold_confidence(r, "D")));
}

TEST_CASE("uniform stub gives ln 1/4 for every question") {
  const auto ds = testing::synthetic_dataset("u", 10, {4});
  StubOptions o;
  o.uniform_confidence = true;
  const auto run = run_stub(ds, "stub:oracle", o);
  const auto conf = question_confidences(run->records, ds, "stub:oracle", kRef);
  REQUIRE(conf.size() == 10);
  for (const auto& [id, c] : conf) CHECK(c == doctest::Approx(std::log(0.25)).epsilon(1e-12));
}

TEST_CASE("bin accuracies recombine to the overall accuracy") {
  const auto ds = testing::synthetic_dataset("w", 23, {4});
  const std::string model = "stub:format:numbers@0.3";
  const auto run = run_stub(ds, model);
  const auto binning = bin_questions(question_confidences(run->records, ds, model, kRef), kRef);
  const auto formats = enumerate_formats();
  const auto rows = per_bin_accuracy(binning, run->records, ds, model, formats);
  CHECK(rows.size() == 3 * 48);
  std::vector<const Dataset*> ptrs{&ds};
  const auto agg = aggregate(run->records, ptrs);
  for (const auto& cell : agg.cells) {
    std::size_t n = 0, correct = 0;
    for (const auto& r : rows)
      if (r.format == cell.format) {
        n += r.n;
        correct += r.correct;
      }
    CHECK(n == cell.n);
    CHECK(static_cast<double>(correct) / static_cast<double>(n) == doctest::Approx(cell.accuracy));
  }
  const auto csv = write_bin_report_csv(rows);
  CHECK(csv.starts_with("bin,format,n,accuracy\n"));
}

TEST_CASE("oracle is perfect in every bin") {
  const auto ds = testing::synthetic_dataset("o", 10, {3});
  const auto run = run_stub(ds, "stub:oracle");
  const auto binning = bin_questions(question_confidences(run->records, ds, "stub:oracle", kRef), kRef);
  const auto formats = enumerate_formats();
  for (const auto& r : per_bin_accuracy(binning, run->records, ds, "stub:oracle", formats))
    CHECK(r.accuracy == 1.0);
}

TEST_CASE("format-sensitive stub drops only its most confident bin") {
  const auto ds = testing::synthetic_dataset("f", 20, {4});
  const std::string model = "stub:format:double_brackets@0.2";
  const auto run = run_stub(ds, model);
  const auto binning = bin_questions(question_confidences(run->records, ds, model, kRef), kRef);
  CHECK(binning.count(ConfidenceBin::Top20) == 4);
  const auto formats = enumerate_formats();
  for (const auto& r : per_bin_accuracy(binning, run->records, ds, model, formats)) {
    const bool hit = r.bin == ConfidenceBin::Top20 && r.format.delimiter == OptionDelimiter::DoubleBrackets;
    CHECK(r.accuracy == (hit ? 0.0 : 1.0));
  }
}

TEST_CASE("missing records are reported") {
  const auto ds = testing::synthetic_dataset("m", 6, {2});
  const auto run = run_stub(ds, "stub:oracle");
  const auto binning = bin_questions(question_confidences(run->records, ds, "stub:oracle", kRef), kRef);
  std::vector<RunRecord> partial(run->records.begin() + 1, run->records.end());
  const auto formats = enumerate_formats();
  CHECK_THROWS_AS(per_bin_accuracy(binning, partial, ds, "stub:oracle", formats), std::invalid_argument);
}
