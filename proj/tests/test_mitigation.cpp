#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "mcbias/mitigation.hpp"
#include "support.hpp"

using namespace mcbias;

namespace {

// Step-by-step recomputations used as oracles.

double pia_oracle(const std::vector<int>& gold, const std::vector<int>& chosen, std::size_t m) {
  const double n = static_cast<double>(gold.size());
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double c = 0, pr = 0;
    for (std::size_t q = 0; q < gold.size(); ++q) {
      if (chosen[q] == static_cast<int>(i)) {
        pr += 1;
        if (gold[q] == static_cast<int>(i)) c += 1;
      }
    }
    if (pr > 0) total += (c * c) / (pr * n);
  }
  return total / static_cast<double>(m);
}

std::size_t pride_oracle(const std::vector<std::vector<double>>& calib, const std::vector<double>& p) {
  const std::size_t k = p.size();
  std::vector<double> prior(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    for (const auto& v : calib) prior[i] += v[i] / static_cast<double>(calib.size());
    if (prior[i] < kPriorFloor) prior[i] = kPriorFloor;
  }
  double z = 0.0;
  for (double x : prior) z += x;
  std::size_t best = 0;
  double best_v = -1.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double v = p[i] / (prior[i] / z);
    if (v > best_v) {
      best_v = v;
      best = i;
    }
  }
  return best;
}

double ppl_oracle(const std::vector<double>& lps) {
  double prod = 1.0;
  for (double lp : lps) prod *= std::exp(lp);
  return std::pow(prod, -1.0 / static_cast<double>(lps.size()));
}

std::vector<double> random_simplex(std::mt19937& rng, std::size_t k) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> v(k);
  double s = 0;
  for (auto& x : v) s += (x = e(rng));
  for (auto& x : v) x /= s;
  return v;
}

MethodColumn col_of(Method m, std::vector<std::optional<double>> acc) {
  MethodColumn c;
  c.method = m;
  c.accuracy = std::move(acc);
  return c;
}

}  // namespace

TEST_CASE("PIA matches the brute-force count on 1000 random instances") {
  std::mt19937 rng(11);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t m = 2 + rng() % 3;
    const std::size_t questions = 1 + rng() % 6;
    std::vector<int> gold, chosen;
    for (std::size_t q = 0; q < questions; ++q)
      for (std::size_t r = 0; r < m; ++r) {
        gold.push_back(static_cast<int>(r));
        chosen.push_back(static_cast<int>(rng() % (m + 1)) - (rng() % 4 == 0 ? static_cast<int>(m + 1) : 0));
      }
    std::vector<std::size_t> c(m, 0), pr(m, 0);
    for (std::size_t i = 0; i < gold.size(); ++i) {
      if (chosen[i] < 0 || chosen[i] >= static_cast<int>(m)) continue;
      ++pr[static_cast<std::size_t>(chosen[i])];
      if (chosen[i] == gold[i]) ++c[static_cast<std::size_t>(chosen[i])];
    }
    CHECK(std::abs(pia(c, pr, gold.size(), m) - pia_oracle(gold, chosen, m)) <= 1e-12);
  }
}

TEST_CASE("PIA input checks") {
  const std::vector<std::size_t> c = {3, 1}, pr = {2, 4};
  CHECK_THROWS_AS(pia(c, pr, 8, 2), std::invalid_argument);
  const std::vector<std::size_t> ok_c = {2, 1}, ok_pr = {2, 4};
  CHECK(pia(ok_c, ok_pr, 8, 2) == doctest::Approx((1.0 * 2 / 8 + 0.25 * 1 / 8) / 2));
  CHECK_THROWS_AS(pia(ok_c, ok_pr, 2, 2), std::invalid_argument);
  CHECK_THROWS_AS(pia(std::vector<std::size_t>{1}, std::vector<std::size_t>{1}, 1, 1),
                  std::invalid_argument);
  // A perfect, balanced model scores 1/M under the formula as written.
  CHECK(pia(std::vector<std::size_t>{5, 5, 5, 5}, std::vector<std::size_t>{5, 5, 5, 5}, 20, 4) ==
        doctest::Approx(0.25));
}

TEST_CASE("PriDe matches the brute-force prior and debias on 1000 random instances") {
  std::mt19937 rng(12);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t k = 2 + rng() % 3;
    std::vector<std::vector<double>> calib;
    const std::size_t nc = 1 + rng() % 8;
    for (std::size_t i = 0; i < nc; ++i) {
      auto v = random_simplex(rng, k);
      if (rng() % 5 == 0) v[rng() % k] = 0.0;  // exercises the floor
      calib.push_back(v);
    }
    const auto prior = pride_prior(calib);
    double s = 0.0;
    for (double x : prior.p) s += x;
    CHECK(std::abs(s - 1.0) <= 1e-12);
    for (int q = 0; q < 5; ++q) {
      const auto p = random_simplex(rng, k);
      CHECK(pride_debias(p, prior) == pride_oracle(calib, p));
    }
  }
}

TEST_CASE("PriDe rejects variable option counts") {
  std::vector<std::vector<double>> calib = {{0.5, 0.5}, {0.2, 0.3, 0.5}};
  CHECK_THROWS_AS(pride_prior(calib), UnsupportedDatasetError);
  PriorVector p{{0.5, 0.5}};
  CHECK_THROWS_AS(pride_debias(std::vector<double>{0.2, 0.3, 0.5}, p), std::invalid_argument);
  const auto mixed = testing::synthetic_dataset("v", 6, {2, 4});
  CHECK_THROWS_AS(pride_prior_from_records({}, mixed, "m", PromptFormat{}), UnsupportedDatasetError);
  CHECK_THROWS_AS(pride_accuracy({}, mixed, "m", PromptFormat{}, p), UnsupportedDatasetError);
}

TEST_CASE("PIA rejects cells mixing option counts") {
  EvalCell cell;
  cell.n = 6;
  cell.position_present = {6, 6, 2, 2};
  cell.position_selected = {1, 1, 1, 1};
  cell.position_correct = {1, 1, 1, 1};
  CHECK_THROWS_AS(pia_accuracy(cell), UnsupportedDatasetError);
  cell.position_present = {2, 2, 2, 2};
  cell.n = 8;
  CHECK(pia_accuracy(cell) == doctest::Approx(4 * (1.0 * 1 / 8) / 4));
}

TEST_CASE("CP-LN matches the brute-force perplexity on 1000 random instances") {
  std::mt19937 rng(13);
  std::uniform_real_distribution<double> u(-6.0, -0.01);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t k = 2 + rng() % 3;
    std::vector<double> ppl, oracle;
    for (std::size_t i = 0; i < k; ++i) {
      std::vector<double> lps(1 + rng() % 3);
      for (auto& x : lps) x = u(rng);
      ppl.push_back(perplexity(lps));
      oracle.push_back(ppl_oracle(lps));
      CHECK(std::abs(ppl.back() - oracle.back()) <= 1e-12 * std::max(1.0, oracle.back()));
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < k; ++i)
      if (oracle[i] < oracle[best]) best = i;
    CHECK(cp_ln_select(ppl) == best);
  }
  CHECK_THROWS_AS(perplexity(std::vector<double>{}), std::invalid_argument);
  CHECK_THROWS_AS(cp_ln_select(std::vector<double>{1.0}), std::invalid_argument);
}

TEST_CASE("spearman") {
  CHECK(spearman(std::vector<int>{1, 2, 3, 4}, std::vector<int>{1, 2, 3, 4}) == doctest::Approx(1.0));
  CHECK(spearman(std::vector<int>{1, 2, 3, 4}, std::vector<int>{4, 3, 2, 1}) == doctest::Approx(-1.0));
  // Without ties the shortcut and Pearson-on-ranks agree.
  std::mt19937 rng(5);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> a(7), b(7);
    for (auto& x : a) x = static_cast<double>(rng() % 4);
    for (auto& x : b) x = static_cast<double>(rng() % 4);
    const double rho = spearman(a, b);
    CHECK(rho <= 1.0 + 1e-12);
    CHECK(rho >= -1.0 - 1e-12);
    CHECK(spearman(a, b) == doctest::Approx(spearman(b, a)));
  }
  CHECK(spearman(std::vector<int>{1, 2, 2, 4}, std::vector<int>{1, 2, 3, 4}) ==
        doctest::Approx(0.9486832980505138));
}

TEST_CASE("scorecard") {
  const std::vector<std::string> models = {"a", "b", "c"};
  MethodColumn col;
  col.method = Method::Vanilla;
  col.accuracy = {0.5, 0.7, 0.6};
  MethodColumn na;
  na.method = Method::PriDe;
  na.accuracy = {0.5, std::nullopt, 0.6};
  na.note = "NA: mixed, option counts";
  const auto card = build_scorecard("d", models, {0.8, 0.6, 0.7}, {col, na});
  CHECK(card.reference.ranks == std::vector<std::optional<int>>{1, 3, 2});
  CHECK(card.methods[0].ranks == std::vector<std::optional<int>>{3, 1, 2});
  CHECK(card.methods[0].correctly_ranked == 1u);
  CHECK(*card.methods[0].correlation == doctest::Approx(-1.0));
  CHECK(!card.methods[1].correlation);
  const auto csv = write_scorecard_csv(card);
  CHECK(csv.find("d,pride,b,NA,NA") != std::string::npos);
  CHECK(csv.find("NA: mixed; option counts") != std::string::npos);
  CHECK(parse_method("cp_ln") == Method::CpLn);
  CHECK(!parse_method("x"));
  const auto single = build_scorecard("d", {"a"}, {0.8}, {col_of(Method::Vanilla, {0.5})});
  CHECK(!single.methods[0].correlation);
  CHECK(single.methods[0].correctly_ranked == 1u);
  CHECK(method_complexity(Method::PseudoGt, 1145, 4580) == 4580u * 48u);
  CHECK(method_complexity(Method::Vanilla, 1145, 4580) == 1145u);
  CHECK(method_complexity(Method::CpLn, 1145, 4580) == 4580u);
}

TEST_CASE("live mitigation from stub records") {
  testing::TempDir dir;
  const auto ds = testing::synthetic_dataset("d", 12, {4});
  std::vector<const Dataset*> ptrs{&ds};
  const std::vector<std::string> models = {"stub:oracle", "stub:position:1"};
  const auto reg = BackendRegistry::build(models, ptrs, {});
  const PromptFormat f{OptionIdSet::Uppercase, OptionDelimiter::Dot, OptionSeparator::LineBreak};
  const std::vector<PromptFormat> formats{f};
  RunCache cache(dir.path());
  execute(plan_runs(models, std::span<const Dataset* const>(ptrs), formats), ptrs, reg, cache);
  const auto records = cache.load();
  CHECK(vanilla_accuracy(records, ds, "stub:oracle", f) == 1.0);
  std::size_t gold_one = 0;
  for (const auto& r : ds.records()) gold_one += r.gold_index == 1;
  CHECK(vanilla_accuracy(records, ds, "stub:position:1", f) ==
        doctest::Approx(static_cast<double>(gold_one) / 12.0));

  const auto agg = aggregate(records, ptrs);
  const auto* cell = cells_by_format(agg.cells, "stub:position:1", "d")[format_index(f)];
  REQUIRE(cell);
  // Always position 1: C_1 = N questions, Pr_1 = 4N.
  CHECK(pia_accuracy(*cell) == doctest::Approx((12.0 / 48.0) * (12.0 / 48.0) / 4.0));

  const auto prior = pride_prior_from_records(records, ds, "stub:oracle", f);
  CHECK(prior.p.size() == 4);
  CHECK(pride_accuracy(records, ds, "stub:oracle", f, prior) == 1.0);
  CHECK(cp_ln_accuracy(*reg.get("stub:oracle"), ds) == 1.0);
}
