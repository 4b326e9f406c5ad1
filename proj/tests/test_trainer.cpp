#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "hyperseg/inference.hpp"
#include "hyperseg/metrics.hpp"
#include "hyperseg/trainer.hpp"
#include "test_util.hpp"

using namespace hyperseg;
using hyperseg::testing::temp_dir;

namespace {

ModelSpec tiny_spec() {
  ModelSpec s;
  s.kernel_depths = {4, 8};
  s.hypervector_size = 4;
  s.mapping_layers = 2;
  return s;
}

std::vector<SyntheticSample> tiny_data(std::size_t n, std::size_t size = 16, std::uint64_t seed = 1) {
  DatasetConfig c;
  c.n_samples = n;
  c.grid_size = size;
  c.blob_scale_min = 2;
  c.blob_scale_max = 4;
  c.seed = seed;
  return generate_dataset(c);
}

TrainConfig tiny_config(Strategy s) {
  TrainConfig c;
  c.strategy = s;
  c.epochs = 1;
  c.batch_size = 4;
  c.lr = 1e-3;
  c.patch_size = 8;
  c.seed = 7;
  c.model = tiny_spec();
  return c;
}

bool same_parameters(const SegmentationNet& a, const SegmentationNet& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first) return false;
    const auto x = pa[i].second.data(), y = pb[i].second.data();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
  }
  return true;
}

double max_parameter_gap(const SegmentationNet& a, const SegmentationNet& b) {
  double gap = 0;
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pa[i].second.numel(); ++j)
      gap = std::max(gap, std::abs(pa[i].second[j] - pb[i].second[j]));
  return gap;
}

}  // namespace

TEST_CASE("strategy names") {
  for (auto s : {Strategy::kSingleDice, Strategy::kSingleDiceCe, Strategy::kDropout, Strategy::kSubsetEnsemble,
                 Strategy::kVtvEnsemble, Strategy::kHypernet})
    CHECK(strategy_from_string(to_string(s)) == s);
  CHECK_THROWS_AS(strategy_from_string("bagging"), std::invalid_argument);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.effective_lr() == 1e-4);
  c.strategy = Strategy::kHypernet;
  CHECK(c.effective_lr() == 1e-5);
  c.lr = 3e-3;
  CHECK(c.effective_lr() == 3e-3);
  auto bad = [](auto mutate) {
    TrainConfig t;
    mutate(t);
    CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  };
  bad([](TrainConfig& t) { t.alpha_grid = {0.1, 0.1}; });
  bad([](TrainConfig& t) { t.alpha_grid = {0.5, 0.3}; });
  bad([](TrainConfig& t) { t.alpha_grid = {0.0, 0.5}; });
  bad([](TrainConfig& t) { t.alpha_grid = {0.5, 1.0}; });
  bad([](TrainConfig& t) { t.ensemble_size = 0; });
  bad([](TrainConfig& t) { t.dropout = 1.0; });
  bad([](TrainConfig& t) { t.dropout = -0.1; });
  bad([](TrainConfig& t) { t.lr = 0.0; });
  bad([](TrainConfig& t) { t.batch_size = 0; });
  bad([](TrainConfig& t) { t.patch_size = 30; });
  bad([](TrainConfig& t) {
    t.strategy = Strategy::kVtvEnsemble;
    t.ensemble_size = 4;
  });
}

TEST_CASE("zero epochs returns the initialization") {
  const auto data = tiny_data(4);
  for (auto s : {Strategy::kSingleDiceCe, Strategy::kHypernet}) {
    auto cfg = tiny_config(s);
    cfg.epochs = 0;
    const auto out = train(data, cfg);
    REQUIRE(out.members.size() == 1);
    ModelSpec spec = cfg.model;
    spec.kind = s == Strategy::kHypernet ? ModelKind::kHyper : ModelKind::kPlain;
    CHECK(same_parameters(out.members[0].checkpoint.model, SegmentationNet::create(spec, cfg.seed)));
    CHECK_FALSE(out.members[0].checkpoint.optimizer.has_value());
    CHECK(out.report.epoch_loss[0].empty());
  }
}

TEST_CASE("training is deterministic") {
  const auto data = tiny_data(6);
  for (auto s : {Strategy::kSingleDiceCe, Strategy::kDropout, Strategy::kHypernet}) {
    auto cfg = tiny_config(s);
    cfg.epochs = 2;
    const auto a = train(data, cfg), b = train(data, cfg);
    CHECK(same_parameters(a.members[0].checkpoint.model, b.members[0].checkpoint.model));
    CHECK(a.report.epoch_loss == b.report.epoch_loss);
    cfg.seed += 1;
    CHECK_FALSE(same_parameters(a.members[0].checkpoint.model, train(data, cfg).members[0].checkpoint.model));
  }
}

TEST_CASE("vtv ensemble members") {
  const auto data = tiny_data(4);
  auto cfg = tiny_config(Strategy::kVtvEnsemble);
  std::vector<std::vector<double>> alphas(5);
  const auto out = train_vtv_ensemble(data, cfg, [&](const LogEntry& e) { alphas[e.member].push_back(*e.alpha); });
  REQUIRE(out.members.size() == 5);
  const std::vector<std::string> names{"member_0.1", "member_0.3", "member_0.5", "member_0.7", "member_0.9"};
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& m = out.members[i];
    CHECK(m.name == names[i]);
    CHECK(m.checkpoint.meta.tags.at("alpha") == names[i].substr(7));
    CHECK(m.checkpoint.meta.tags.at("strategy") == "vtv_ensemble");
    CHECK(m.checkpoint.meta.seed == cfg.seed + i);
    for (double a : alphas[i]) CHECK(a == cfg.alpha_grid[i]);
    for (std::size_t j = 0; j < i; ++j) CHECK_FALSE(same_parameters(m.checkpoint.model, out.members[j].checkpoint.model));
  }
  double total = 0;
  for (const auto& m : out.members) total += m.wall_seconds;
  CHECK(out.report.wall_seconds == doctest::Approx(total).epsilon(1e-12));

  const auto dir = temp_dir("vtv_members");
  const auto paths = save_members(out, dir);
  REQUIRE(paths.size() == 5);
  CHECK(paths[2].filename() == "member_0.5");
  const auto back = load_checkpoint(paths[2]);
  CHECK(same_parameters(back.model, out.members[2].checkpoint.model));
  CHECK(back.meta.tags == out.members[2].checkpoint.meta.tags);
}

TEST_CASE("a one-member ensemble at one half is soft dice training") {
  const auto data = tiny_data(6);
  auto cfg = tiny_config(Strategy::kVtvEnsemble);
  cfg.epochs = 3;
  cfg.alpha_grid = {0.5};
  cfg.ensemble_size = 1;
  const auto vtv = train(data, cfg);
  cfg.strategy = Strategy::kSingleDice;
  const auto single = train(data, cfg);
  const auto& a = vtv.members[0].checkpoint.model;
  const auto& b = single.members[0].checkpoint.model;
  CHECK(max_parameter_gap(a, b) < 1e-9);
  REQUIRE(vtv.report.epoch_loss[0].size() == 3);
  for (std::size_t e = 0; e < 3; ++e)
    CHECK(std::abs(vtv.report.epoch_loss[0][e] - single.report.epoch_loss[0][e]) < 1e-12);
  const Tensor x({1, 1, 16, 16}, data[0].image.values);
  const Tensor pa = a.forward(x, {}), pb = b.forward(x, {});
  for (std::size_t i = 0; i < pa.numel(); ++i) CHECK(std::abs(pa[i] - pb[i]) < 1e-9);
}

TEST_CASE("subset ensemble folds") {
  const auto data = tiny_data(100, 8);
  auto cfg = tiny_config(Strategy::kSubsetEnsemble);
  cfg.batch_size = 8;
  cfg.model.kernel_depths = {2, 2};
  std::vector<std::size_t> steps(5, 0);
  const auto out = train(data, cfg, [&](const LogEntry& e) { ++steps[e.member]; });
  REQUIRE(out.members.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(steps[i] == 80 / 8);
    CHECK(out.members[i].name == "fold_" + std::to_string(i));
    CHECK(out.members[i].checkpoint.meta.tags.at("fold") == std::to_string(i));
  }
  CHECK_FALSE(same_parameters(out.members[0].checkpoint.model, out.members[1].checkpoint.model));
  cfg.ensemble_size = 3;
  CHECK(train(tiny_data(12, 8), cfg).members.size() == 3);
}

TEST_CASE("hypernet draws one h per minibatch") {
  const auto data = tiny_data(16);
  auto cfg = tiny_config(Strategy::kHypernet);
  cfg.epochs = 3;
  std::vector<LogEntry> log;
  train(data, cfg, [&](const LogEntry& e) { log.push_back(e); });
  REQUIRE(log.size() == 3 * 16 / 4);
  std::set<double> distinct;
  for (std::size_t i = 0; i < log.size(); ++i) {
    CHECK(log[i].step == i);
    REQUIRE(log[i].alpha.has_value());
    CHECK(*log[i].alpha >= 0.05);
    CHECK(*log[i].alpha <= 0.95);
    CHECK(std::isfinite(log[i].loss));
    distinct.insert(*log[i].alpha);
  }
  CHECK(distinct.size() == log.size());
  CHECK(format_log_line(log[0]).find("alpha=") != std::string::npos);

  cfg.fixed_h = TverskyParams::from_alpha(0.3);
  log.clear();
  train(data, cfg, [&](const LogEntry& e) { log.push_back(e); });
  for (const auto& e : log) CHECK(*e.alpha == 0.3);
}

TEST_CASE("hypernet overfits one sample with h frozen") {
  auto data = tiny_data(20, 32, 3);
  const SyntheticSample* pick = nullptr;
  for (const auto& s : data) {
    std::size_t fg = 0;
    for (auto v : s.annotation.values) fg += v;
    if (fg > 60 && fg < 500) {
      pick = &s;
      break;
    }
  }
  REQUIRE(pick != nullptr);
  auto cfg = tiny_config(Strategy::kHypernet);
  cfg.model = ModelSpec{};
  cfg.fixed_h = TverskyParams{};
  cfg.epochs = 300;
  cfg.batch_size = 1;
  cfg.patch_size = 32;
  cfg.lr = 3e-3;
  cfg.augment.enabled = false;
  const auto out = train({*pick}, cfg);
  SlidingWindowConfig sw;
  sw.patch = 32;
  const auto p = sliding_window_predict(pick->image, out.members[0].checkpoint.model, sw, TverskyParams{});
  CHECK(dice(confusion(threshold_map(p, 0.5), pick->annotation)) > 0.95);
}

TEST_CASE("non-finite loss aborts with the minibatch seed") {
  auto data = tiny_data(4);
  data[2].image.values[5] = std::numeric_limits<double>::quiet_NaN();
  auto cfg = tiny_config(Strategy::kSingleDiceCe);
  cfg.patch_size = 16;
  cfg.batch_size = 4;
  try {
    train(data, cfg);
    FAIL("training did not abort");
  } catch (const TrainingDiverged& e) {
    CHECK(e.batch_seed() == sample_seed(cfg.seed, 0));
    CHECK(std::string(e.what()).find(std::to_string(e.batch_seed())) != std::string::npos);
  }
}

TEST_CASE("minibatch assembly") {
  const auto data = tiny_data(3);
  std::vector<const SyntheticSample*> ptrs{&data[0], &data[1], &data[2]};
  std::mt19937_64 rng(4);
  AugmentConfig aug;
  const auto mb = make_minibatch(ptrs, 8, aug, rng);
  CHECK(mb.image.shape() == Shape{3, 1, 8, 8});
  CHECK(mb.label.shape() == Shape{3, 1, 8, 8});
  for (double v : mb.label.data()) CHECK((v == 0.0 || v == 1.0));
  aug.enabled = false;
  const auto full = make_minibatch(ptrs, 16, aug, rng);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t i = 0; i < 256; ++i) {
      CHECK(full.image[b * 256 + i] == data[b].image.values[i]);
      CHECK(full.label[b * 256 + i] == data[b].annotation.values[i]);
    }
}
