#include <doctest.h>

#include <cmath>
#include <fstream>
#include <json.hpp>

#include "hyperseg/inference.hpp"
#include "hyperseg/losses.hpp"
#include "hyperseg/metrics.hpp"
#include "hyperseg/synthdata.hpp"
#include "test_util.hpp"

using namespace hyperseg;
using hyperseg::testing::temp_dir;

namespace {

LabelMap labels(std::size_t h, std::size_t w, std::vector<std::uint8_t> v) {
  LabelMap m(h, w);
  m.values = std::move(v);
  return m;
}

ProbabilityMap as_prob(const LabelMap& l) {
  ProbabilityMap p(l.height, l.width);
  for (std::size_t i = 0; i < l.size(); ++i) p.values[i] = l.values[i];
  return p;
}

LabelMap random_labels(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::bernoulli_distribution b(0.4);
  LabelMap m(h, w);
  for (auto& v : m.values) v = b(rng);
  return m;
}

ProbabilityMap random_prob(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  ProbabilityMap p(h, w);
  for (auto& v : p.values) v = u(rng);
  return p;
}

}  // namespace

TEST_CASE("confusion-derived scores") {
  const auto truth = labels(2, 3, {1, 1, 1, 1, 0, 0});
  SUBCASE("perfect") {
    const auto c = confusion(truth, truth);
    CHECK(dice(c) == 1.0);
    CHECK(precision(c) == 1.0);
    CHECK(recall(c) == 1.0);
    CHECK(balanced_accuracy(c) == 1.0);
  }
  SUBCASE("disjoint") {
    CHECK(dice(confusion(labels(2, 3, {0, 0, 0, 0, 1, 1}), truth)) == 0.0);
  }
  SUBCASE("half recall, no false positives") {
    const auto c = confusion(labels(2, 3, {1, 1, 0, 0, 0, 0}), truth);
    CHECK(c == ConfusionCounts{2, 0, 2, 2});
    CHECK(dice(c) == doctest::Approx(4.0 / 6.0).epsilon(1e-15));
    CHECK(recall(c) == 0.5);
    CHECK(precision(c) == 1.0);
    CHECK(balanced_accuracy(c) == 0.75);
  }
  SUBCASE("empty against empty") {
    const auto empty = labels(1, 2, {0, 0});
    CHECK(dice(confusion(empty, empty)) == 1.0);
  }
  CHECK_THROWS(confusion(labels(1, 2, {0, 1}), truth));
}

TEST_CASE("hard dice equals the tversky index at one half") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto t = random_labels(6, 6, rng), p = random_labels(6, 6, rng);
    std::vector<double> pv(p.values.begin(), p.values.end()), tv(t.values.begin(), t.values.end());
    CHECK(std::abs(dice(confusion(p, t)) - tversky_index(pv, tv, TverskyParams{}, 1e-300)) < 1e-9);
  }
}

TEST_CASE("roc curve examples") {
  std::mt19937_64 rng(2);
  const auto t = random_labels(10, 10, rng);
  const auto grid = threshold_grid();
  REQUIRE(grid.size() == 21);
  CHECK(grid[1] == 0.05);
  CHECK(grid.back() == 1.0);
  CHECK(roc_curve(as_prob(t), t, grid)->auc == doctest::Approx(1.0));
  CHECK(roc_curve(ProbabilityMap(10, 10, 0.37), t, grid)->auc == doctest::Approx(0.5));
  ProbabilityMap inv = as_prob(t);
  for (auto& v : inv.values) v = 1.0 - v;
  CHECK(roc_curve(inv, t, grid)->auc == doctest::Approx(0.0));
  CHECK_FALSE(roc_curve(ProbabilityMap(2, 2, 0.5), labels(2, 2, {0, 0, 0, 0}), grid).has_value());
  CHECK(roc_curve(as_prob(t), t, grid)->points.size() == 23);
}

TEST_CASE("roc properties") {
  std::mt19937_64 rng(3);
  const auto grid = threshold_grid();
  for (int i = 0; i < 20; ++i) {
    const auto t = random_labels(8, 8, rng);
    auto p = random_prob(8, 8, rng);
    const auto roc = roc_curve(p, t, grid);
    REQUIRE(roc);
    CHECK(roc->auc >= 0.0);
    CHECK(roc->auc <= 1.0);
    for (std::size_t k = 1; k < grid.size(); ++k) {
      CHECK(roc->points[k].fpr <= roc->points[k - 1].fpr);
      CHECK(roc->points[k].tpr <= roc->points[k - 1].tpr);
    }
    // exact AUC is invariant under strictly monotone transforms
    const double exact = *exact_auc(p, t);
    auto q = p;
    for (auto& v : q.values) v = std::pow(v, 3.0) * 0.5 + 0.1;
    CHECK(*exact_auc(q, t) == doctest::Approx(exact).epsilon(1e-12));
    // the gridded AUC agrees with the exact one up to grid resolution
    CHECK(std::abs(roc->auc - exact) < 0.1);
  }
}

TEST_CASE("dice threshold sweep") {
  std::mt19937_64 rng(4);
  const auto t = random_labels(8, 8, rng);
  ProbabilityMap polar(8, 8);
  for (std::size_t i = 0; i < t.size(); ++i) polar.values[i] = (i % 3 == 0) ? 0.99 : 0.01;
  const auto s = dice_threshold_sweep(polar, t, threshold_grid(0.05, 0.05, 0.95));
  CHECK(s.points.size() == 19);
  CHECK(s.range == 0.0);
  CHECK(dice_threshold_sweep(polar, t, {0.5}).points.size() == 1);

  SUBCASE("the true map is perfect at the annotator threshold") {
    DatasetConfig cfg;
    cfg.grid_size = 48;
    cfg.blobs_min = 2;
    cfg.seed = 9;
    for (std::size_t i = 0; i < 10; ++i) {
      const auto smp = generate_indexed_sample(cfg, i);
      CHECK(dice_threshold_sweep(smp.p_true, smp.annotation, {smp.meta.tau}).points[0].dice == 1.0);
      const auto sweep = dice_threshold_sweep(smp.p_true, smp.annotation, threshold_grid(0.01, 0.01, 0.99));
      for (const auto& pt : sweep.points) CHECK(pt.dice <= 1.0);
    }
  }
  SUBCASE("breakpoints only at observed probabilities") {
    ProbabilityMap p(1, 4);
    p.values = {0.2, 0.4, 0.6, 0.8};
    const auto tt = labels(1, 4, {0, 1, 1, 1});
    const auto sw = dice_threshold_sweep(p, tt, threshold_grid(0.01));
    for (std::size_t k = 1; k < sw.points.size(); ++k) {
      if (sw.points[k].dice == sw.points[k - 1].dice) continue;
      bool crosses = false;
      for (double v : p.values) crosses |= sw.points[k - 1].tau - 1e-12 < v && v <= sw.points[k].tau + 1e-12;
      CHECK(crosses);
    }
  }
}

TEST_CASE("probability quality") {
  std::mt19937_64 rng(5);
  const auto p = random_prob(6, 6, rng);
  const auto q = probability_quality(p, p);
  CHECK(q.mae == 0.0);
  CHECK(q.brier == 0.0);
  const auto z = probability_quality(ProbabilityMap(3, 3, 0.0), ProbabilityMap(3, 3, 0.5));
  CHECK(z.mae == 0.5);
  CHECK(z.brier == 0.25);
  CHECK(z.polarization_fraction == 0.0);
  CHECK(probability_quality(ProbabilityMap(3, 3, 0.5), ProbabilityMap(3, 3)).polarization_fraction == 1.0);
}

TEST_CASE("aggregation") {
  std::mt19937_64 rng(6);
  const auto t = random_labels(8, 8, rng);
  const auto p = random_prob(8, 8, rng);
  const auto truep = random_prob(8, 8, rng);
  EvaluationOptions opts;
  const std::vector<ProbabilityMap> trues{truep};
  SUBCASE("one sample matches the per-sample values") {
    const auto r = aggregate({p}, {t}, &trues, opts);
    const auto c = confusion(threshold_map(p, 0.5), t);
    CHECK(r.dice == dice(c));
    CHECK(r.recall == recall(c));
    CHECK(*r.roc_auc == roc_curve(p, t, opts.roc_taus)->auc);
    CHECK(r.quality->mae == probability_quality(p, truep).mae);
    const auto m = macro_aggregate({p}, {t}, &trues, opts);
    CHECK(m.dice == doctest::Approx(r.dice).epsilon(1e-15));
  }
  SUBCASE("copies of one sample") {
    const auto one = aggregate({p}, {t}, &trues, opts);
    const std::vector<ProbabilityMap> three_true{truep, truep, truep};
    const auto three = aggregate({p, p, p}, {t, t, t}, &three_true, opts);
    CHECK(three.dice == one.dice);
    CHECK(three.balanced_accuracy == one.balanced_accuracy);
    CHECK(*three.roc_auc == *one.roc_auc);
    CHECK(three.dice_range == one.dice_range);
    CHECK(three.quality->mae == doctest::Approx(one.quality->mae).epsilon(1e-15));
  }
  SUBCASE("micro averaging sums counts") {
    const auto a = labels(1, 4, {1, 1, 0, 0});
    const auto b = labels(1, 4, {0, 0, 1, 1});
    // first map perfect, second map predicts nothing: summed tp 2, fn 2
    const auto r = aggregate({as_prob(a), ProbabilityMap(1, 4, 0.0)}, {a, b}, nullptr, opts);
    CHECK(r.dice == doctest::Approx(4.0 / 6.0).epsilon(1e-15));
    const auto m = macro_aggregate({as_prob(a), ProbabilityMap(1, 4, 0.0)}, {a, b}, nullptr, opts);
    CHECK(m.dice == 0.5);
  }
  SUBCASE("pooled auc of perfect maps") {
    const auto t2 = random_labels(8, 8, rng);
    CHECK(*aggregate({as_prob(t), as_prob(t2)}, {t, t2}, nullptr, opts).roc_auc == doctest::Approx(1.0));
  }
}

TEST_CASE("report files") {
  const auto dir = temp_dir("reports");
  std::mt19937_64 rng(7);
  const auto t = random_labels(8, 8, rng);
  const auto p = random_prob(8, 8, rng);
  const std::vector<ProbabilityMap> trues{p};
  std::vector<MethodReport> rows{{"a", "micro", aggregate({p}, {t}, &trues)}, {"b", "macro", macro_aggregate({p}, {t})}};
  write_summary_csv(dir / "summary.csv", rows);
  write_sweep_csv(dir / "sweep.csv", rows);
  write_report_json(dir / "report.json", rows);
  std::ifstream sweep(dir / "sweep.csv");
  std::size_t lines = 0;
  for (std::string l; std::getline(sweep, l);) ++lines;
  CHECK(lines == 1 + 2 * 21);
  std::ifstream js(dir / "report.json");
  const auto j = nlohmann::json::parse(js);
  REQUIRE(j.size() == 2);
  CHECK(j[0]["dice"].get<double>() == rows[0].report.dice);
  CHECK(j[0]["probability_quality"]["prob_mae"].get<double>() == rows[0].report.quality->mae);
  CHECK(j[1]["probability_quality"].is_null());
  std::ifstream sum(dir / "summary.csv");
  std::string header, first;
  std::getline(sum, header);
  std::getline(sum, first);
  CHECK(header.find("prob_mae") != std::string::npos);
  CHECK(first.rfind("a,micro,", 0) == 0);
}
