#include <doctest.h>

#include <cmath>
#include <queue>
#include <set>

#include "hyperseg/synthdata.hpp"
#include "test_util.hpp"

using namespace hyperseg;
using hyperseg::testing::temp_dir;

namespace {

DatasetConfig small_config() {
  DatasetConfig c;
  c.n_samples = 12;
  c.grid_size = 32;
  c.seed = 5;
  return c;
}

// 4-connected components of the foreground.
std::size_t components(const Grid<std::uint8_t>& g) {
  Grid<std::uint8_t> seen(g.height, g.width, 0);
  std::size_t n = 0;
  for (std::size_t r = 0; r < g.height; ++r)
    for (std::size_t c = 0; c < g.width; ++c) {
      if (!g.at(r, c) || seen.at(r, c)) continue;
      ++n;
      std::queue<std::pair<std::size_t, std::size_t>> q;
      q.emplace(r, c);
      seen.at(r, c) = 1;
      while (!q.empty()) {
        auto [y, x] = q.front();
        q.pop();
        const int dy[] = {1, -1, 0, 0}, dx[] = {0, 0, 1, -1};
        for (int k = 0; k < 4; ++k) {
          const long ny = static_cast<long>(y) + dy[k], nx = static_cast<long>(x) + dx[k];
          if (ny < 0 || nx < 0 || ny >= static_cast<long>(g.height) || nx >= static_cast<long>(g.width)) continue;
          if (g.at(ny, nx) && !seen.at(ny, nx)) {
            seen.at(ny, nx) = 1;
            q.emplace(ny, nx);
          }
        }
      }
    }
  return n;
}

double chi_square_quadrants(const std::array<double, 4>& counts) {
  double total = 0;
  for (double c : counts) total += c;
  double chi = 0;
  for (double c : counts) chi += (c - total / 4) * (c - total / 4) / (total / 4);
  return chi;
}

}  // namespace

TEST_CASE("generated samples satisfy the data invariants") {
  const auto cfg = small_config();
  for (const auto& s : generate_dataset(cfg)) {
    REQUIRE(s.image.same_shape(s.p_true));
    REQUIRE(s.image.same_shape(s.annotation));
    for (std::size_t i = 0; i < s.image.size(); ++i) {
      CHECK(s.image.values[i] >= 0.0);
      CHECK(s.image.values[i] <= 1.0);
      CHECK(s.p_true.values[i] >= 0.0);
      CHECK(s.p_true.values[i] <= 1.0);
      CHECK(s.annotation.values[i] == (s.p_true.values[i] >= s.meta.tau ? 1 : 0));
      if (s.annotation.values[i]) CHECK(s.p_true.values[i] >= cfg.tau_min);
    }
    CHECK(s.meta.tau >= cfg.tau_min);
    CHECK(s.meta.tau <= cfg.tau_max);
  }
}

TEST_CASE("empty configuration gives empty maps") {
  auto cfg = small_config();
  cfg.blobs_min = cfg.blobs_max = 0;
  cfg.confusers_min = cfg.confusers_max = 0;
  for (const auto& s : generate_dataset(cfg)) {
    for (double v : s.p_true.values) CHECK(v == 0.0);
    for (auto v : s.annotation.values) CHECK(v == 0);
  }
}

TEST_CASE("a single bump annotates one connected superlevel set") {
  auto cfg = small_config();
  cfg.grid_size = 48;
  cfg.blobs_min = cfg.blobs_max = 1;
  cfg.confusers_min = cfg.confusers_max = 0;
  cfg.tau_min = cfg.tau_max = 0.5;
  for (std::size_t i = 0; i < 10; ++i) {
    const auto s = generate_indexed_sample(cfg, i);
    std::size_t fg = 0;
    for (std::size_t k = 0; k < s.p_true.size(); ++k) {
      CHECK(s.annotation.values[k] == (s.p_true.values[k] >= 0.5));
      fg += s.annotation.values[k];
    }
    if (fg) CHECK(components(s.annotation) == 1);
  }
}

TEST_CASE("annotated area shrinks as the annotator threshold rises") {
  auto cfg = small_config();
  cfg.n_samples = 500;
  double prev = 1.0;
  for (double lo : {0.2, 0.3, 0.4, 0.5, 0.6}) {
    cfg.tau_min = lo;
    cfg.tau_max = lo + 0.1;
    double area = 0;
    for (const auto& s : generate_dataset(cfg))
      for (auto v : s.annotation.values) area += v;
    area /= 500.0 * cfg.grid_size * cfg.grid_size;
    CHECK(area < prev);
    prev = area;
  }
}

TEST_CASE("generation is a pure function of seed and index") {
  const auto cfg = small_config();
  const auto a = generate_dataset(cfg);
  const auto b = generate_dataset(cfg);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].annotation == b[i].annotation);
    CHECK(a[i].p_true == b[i].p_true);
    const auto single = generate_indexed_sample(cfg, i);
    CHECK(single.image == a[i].image);
  }
  auto other = cfg;
  other.seed = 6;
  CHECK_FALSE(generate_dataset(other)[0].image == a[0].image);
}

TEST_CASE("dataset config validation") {
  auto c = small_config();
  c.tau_min = 0.0;
  CHECK_THROWS(c.validate());
  c = small_config();
  c.tau_max = 1.0;
  CHECK_THROWS(c.validate());
  c = small_config();
  c.train_fraction = 1.0;
  CHECK_THROWS(c.validate());
  c = small_config();
  c.n_samples = 0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("gamma correction") {
  Grid<double> g(1, 3);
  g.values = {0.0, 0.25, 1.0};
  auto id = g;
  apply_gamma(id, 1.0);
  CHECK(id == g);
  auto sq = g;
  apply_gamma(sq, 2.0);
  CHECK(sq.values[1] == doctest::Approx(0.0625).epsilon(1e-15));
  Grid<double> binary(2, 2);
  binary.values = {0, 1, 1, 0};
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) {
    auto b = binary;
    const double gamma = random_gamma(b, rng);
    CHECK(gamma >= kGammaMin);
    CHECK(gamma <= kGammaMax);
    CHECK(b == binary);
  }
  Grid<double> constant(2, 2, 0.4);
  auto c = constant;
  apply_gamma(c, 3.0);
  CHECK(c == constant);
}

TEST_CASE("flip") {
  const auto s0 = generate_indexed_sample(small_config(), 0);
  auto s = s0;
  flip_rows(s);
  CHECK_FALSE(s.image == s0.image);
  CHECK(s.image.at(0, 3) == s0.image.at(s0.image.height - 1, 3));
  for (std::size_t i = 0; i < s.p_true.size(); ++i) CHECK(s.annotation.values[i] == (s.p_true.values[i] >= s.meta.tau));
  flip_rows(s);
  CHECK(s.image == s0.image);
  CHECK(s.annotation == s0.annotation);
  CHECK(s.p_true == s0.p_true);

  std::mt19937_64 rng(4);
  int flips = 0;
  for (int i = 0; i < 10000; ++i) {
    auto t = s0;
    const bool f = random_flip(t, rng);
    flips += f;
    CHECK((t.image == s0.image) == !f);
  }
  CHECK(std::abs(flips / 10000.0 - 0.1) <= 0.01);
}

TEST_CASE("crops") {
  const auto s = generate_indexed_sample(small_config(), 1);
  std::mt19937_64 rng(5);
  const auto whole = random_crop(s, 32, rng);
  CHECK(whole.image == s.image);
  CHECK(whole.annotation == s.annotation);
  CHECK_THROWS(random_crop(s, 33, rng));
  CHECK_THROWS(crop(s, {20, 0}, 16));

  std::array<double, 4> quadrant{};
  for (int i = 0; i < 10000; ++i) {
    const auto w = random_crop_window(s, 12, rng);
    REQUIRE(w.row + 12 <= 32);
    REQUIRE(w.col + 12 <= 32);
    // window origins span 0..20; the centre splits them 11/10 per axis
    if (w.row == 10 || w.col == 10) continue;
    quadrant[(w.row > 10) * 2 + (w.col > 10)] += 1;
  }
  CHECK(chi_square_quadrants(quadrant) < 11.34);  // chi-square, 3 dof, p = 0.01

  const auto c = crop(s, {3, 5}, 8);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t k = 0; k < 8; ++k) {
      CHECK(c.image.at(r, k) == s.image.at(r + 3, k + 5));
      CHECK(c.annotation.at(r, k) == s.annotation.at(r + 3, k + 5));
      CHECK(c.p_true.at(r, k) == s.p_true.at(r + 3, k + 5));
    }
}

TEST_CASE("foreground retries favour annotated windows") {
  auto cfg = small_config();
  cfg.grid_size = 64;
  cfg.blobs_min = cfg.blobs_max = 1;
  cfg.blob_scale_min = cfg.blob_scale_max = 3.0;
  cfg.tau_min = cfg.tau_max = 0.3;
  const auto s = generate_indexed_sample(cfg, 0);
  std::mt19937_64 rng(6);
  auto hit_rate = [&](std::size_t retries) {
    int hits = 0;
    for (int i = 0; i < 2000; ++i) {
      const auto c = random_crop(s, 16, rng, retries);
      bool any = false;
      for (auto v : c.annotation.values) any |= v != 0;
      hits += any;
    }
    return hits / 2000.0;
  };
  CHECK(hit_rate(8) > hit_rate(0) + 0.1);
}

TEST_CASE("splits") {
  const auto s = split_dataset(100, 0.75, 1);
  CHECK(s.train.size() == 75);
  CHECK(s.val.size() == 25);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  CHECK(all.size() == 100);
  const auto again = split_dataset(100, 0.75, 1);
  CHECK(again.train == s.train);

  const auto folds = kfold_split(100, 5, 2);
  REQUIRE(folds.size() == 5);
  std::set<std::size_t> seen;
  for (const auto& f : folds) {
    CHECK(f.size() == 20);
    for (auto i : f) CHECK(seen.insert(i).second);
  }
  CHECK(seen.size() == 100);
  CHECK(kfold_split(100, 5, 2) == folds);
  CHECK_THROWS(kfold_split(4, 5, 2));
  CHECK(kfold_split(7, 3, 1)[0].size() == 3);
}

TEST_CASE("dataset directory round trip") {
  const auto dir = temp_dir("dataset");
  const auto ds = make_dataset(small_config());
  write_dataset(ds, dir / "a");
  const auto back = read_dataset(dir / "a");
  REQUIRE(back.samples.size() == ds.samples.size());
  CHECK(back.ids == ds.ids);
  CHECK(back.split.train == ds.split.train);
  CHECK(back.split.val == ds.split.val);
  CHECK(dataset_config_json(back.config) == dataset_config_json(ds.config));
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(back.samples[i].image == ds.samples[i].image);
    CHECK(back.samples[i].annotation == ds.samples[i].annotation);
    CHECK(back.samples[i].p_true == ds.samples[i].p_true);
    CHECK(back.samples[i].meta.tau == ds.samples[i].meta.tau);
  }
  CHECK(std::filesystem::exists(dir / "a" / "sample_0000" / "image.f64"));
  CHECK(std::filesystem::exists(dir / "a" / "sample_0000" / "header"));
  CHECK_THROWS(read_dataset(dir / "missing"));
}
