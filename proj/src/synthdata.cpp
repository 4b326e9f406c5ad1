#include "hyperseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <numbers>
#include <stdexcept>

#include "hyperseg/serialize.hpp"

namespace hyperseg {

using nlohmann::json;

void DatasetConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("dataset config: " + m); };
  if (n_samples < 1) fail("n_samples must be >= 1");
  if (grid_size < 2) fail("grid_size must be >= 2");
  if (blobs_min > blobs_max) fail("blobs_min > blobs_max");
  if (confusers_min > confusers_max) fail("confusers_min > confusers_max");
  if (!(blob_scale_min > 0.0 && blob_scale_min <= blob_scale_max)) fail("blob scale range must be positive and ordered");
  if (!(noise_std >= 0.0)) fail("noise_std must be >= 0");
  if (!(tau_min > 0.0 && tau_min <= tau_max && tau_max < 1.0)) fail("tau range must lie inside (0, 1)");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) fail("train_fraction must lie in (0, 1)");
}

std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint64_t index) {
  // splitmix64 finalizer over a seed/index mix
  std::uint64_t z = dataset_seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

struct Bump {
  double cy, cx, sy, sx, cos_t, sin_t, amp;

  double operator()(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double u = (cos_t * dx + sin_t * dy) / sx;
    const double v = (-sin_t * dx + cos_t * dy) / sy;
    return amp * std::exp(-0.5 * (u * u + v * v));
  }
};

Bump random_bump(std::mt19937_64& rng, double n, double s_lo, double s_hi, double l_lo, double l_hi,
                 double amp_lo, double amp_hi) {
  std::uniform_real_distribution<double> pos(0.15 * n, 0.85 * n), theta(0.0, std::numbers::pi);
  std::uniform_real_distribution<double> sy(s_lo, s_hi), sx(l_lo, l_hi), amp(amp_lo, amp_hi);
  Bump b{};
  b.cy = pos(rng);
  b.cx = pos(rng);
  b.sy = sy(rng);
  b.sx = sx(rng);
  const double t = theta(rng);
  b.cos_t = std::cos(t);
  b.sin_t = std::sin(t);
  b.amp = amp(rng);
  return b;
}

std::size_t draw_count(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace

SyntheticSample generate_sample(std::mt19937_64& rng, const DatasetConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.grid_size;
  const double nd = static_cast<double>(n);
  SyntheticSample s;
  s.meta.blob_count = draw_count(rng, cfg.blobs_min, cfg.blobs_max);
  s.meta.confuser_count = draw_count(rng, cfg.confusers_min, cfg.confusers_max);
  s.meta.tau = std::uniform_real_distribution<double>(cfg.tau_min, cfg.tau_max)(rng);

  std::vector<Bump> lesions, confusers;
  for (std::size_t i = 0; i < s.meta.blob_count; ++i)
    lesions.push_back(random_bump(rng, nd, cfg.blob_scale_min, cfg.blob_scale_max, cfg.blob_scale_min,
                                  cfg.blob_scale_max, 0.7, 1.0));
  for (std::size_t i = 0; i < s.meta.confuser_count; ++i)
    confusers.push_back(random_bump(rng, nd, 0.5 * cfg.blob_scale_min, cfg.blob_scale_min,
                                    1.5 * cfg.blob_scale_max, 2.5 * cfg.blob_scale_max, 0.7, 1.0));

  struct Wave {
    double ky, kx, phase;
  };
  std::vector<Wave> waves(3);
  std::uniform_real_distribution<double> freq(-3.0 * std::numbers::pi / nd, 3.0 * std::numbers::pi / nd);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  for (auto& w : waves) w = {freq(rng), freq(rng), phase(rng)};

  s.p_true = Grid<double>(n, n);
  s.image = Grid<double>(n, n);
  s.annotation = Grid<std::uint8_t>(n, n);
  std::normal_distribution<double> noise(0.0, cfg.noise_std);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const double y = static_cast<double>(r), x = static_cast<double>(c);
      double p = 0.0;
      for (const auto& b : lesions) p += b(y, x);
      p = std::clamp(p, 0.0, 1.0);
      double conf = 0.0;
      for (const auto& b : confusers) conf += b(y, x);
      double tex = 0.0;
      for (const auto& w : waves) tex += std::sin(w.ky * y + w.kx * x + w.phase);
      const double eps = cfg.noise_std > 0.0 ? noise(rng) : 0.0;
      s.p_true.at(r, c) = p;
      s.annotation.at(r, c) = p >= s.meta.tau ? 1 : 0;
      s.image.at(r, c) = 0.2 + cfg.texture_amplitude / 3.0 * tex + cfg.lesion_gain * p +
                         cfg.confuser_gain * std::min(conf, 1.0) + eps;
    }
  const auto [lo, hi] = std::minmax_element(s.image.values.begin(), s.image.values.end());
  const double a = *lo, span = *hi - *lo;
  for (auto& v : s.image.values) v = span > 0.0 ? (v - a) / span : 0.0;
  return s;
}

SyntheticSample generate_indexed_sample(const DatasetConfig& config, std::size_t index) {
  const std::uint64_t seed = sample_seed(config.seed, index);
  std::mt19937_64 rng(seed);
  SyntheticSample s = generate_sample(rng, config);
  s.meta.seed = seed;
  return s;
}

std::vector<SyntheticSample> generate_dataset(const DatasetConfig& config) {
  config.validate();
  std::vector<SyntheticSample> out;
  out.reserve(config.n_samples);
  for (std::size_t i = 0; i < config.n_samples; ++i) out.push_back(generate_indexed_sample(config, i));
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

void apply_gamma(Grid<double>& image, double gamma) {
  if (image.values.empty()) return;
  const auto [lo_it, hi_it] = std::minmax_element(image.values.begin(), image.values.end());
  const double lo = *lo_it, range = *hi_it - *lo_it;
  if (!(range > 0.0) || gamma == 1.0) return;
  for (auto& v : image.values) v = std::pow((v - lo) / range, gamma) * range + lo;
}

double random_gamma(Grid<double>& image, std::mt19937_64& rng, double lo, double hi) {
  const double g = std::uniform_real_distribution<double>(lo, hi)(rng);
  apply_gamma(image, g);
  return g;
}

namespace {

template <class T>
void flip_grid(Grid<T>& g) {
  for (std::size_t r = 0; r < g.height / 2; ++r)
    std::swap_ranges(g.values.begin() + r * g.width, g.values.begin() + (r + 1) * g.width,
                     g.values.begin() + (g.height - 1 - r) * g.width);
}

template <class T>
Grid<T> crop_grid(const Grid<T>& g, CropWindow at, std::size_t patch) {
  Grid<T> out(patch, patch);
  for (std::size_t r = 0; r < patch; ++r)
    std::copy_n(g.values.begin() + (at.row + r) * g.width + at.col, patch, out.values.begin() + r * patch);
  return out;
}

}  // namespace

void flip_rows(SyntheticSample& s) {
  flip_grid(s.image);
  flip_grid(s.annotation);
  flip_grid(s.p_true);
}

bool random_flip(SyntheticSample& s, std::mt19937_64& rng, double p) {
  const bool flip = std::bernoulli_distribution(p)(rng);
  if (flip) flip_rows(s);
  return flip;
}

SyntheticSample crop(const SyntheticSample& s, CropWindow at, std::size_t patch) {
  if (patch == 0 || at.row + patch > s.image.height || at.col + patch > s.image.width)
    throw std::invalid_argument("crop: " + std::to_string(patch) + "-pixel patch at (" + std::to_string(at.row) +
                                ", " + std::to_string(at.col) + ") exceeds " + std::to_string(s.image.height) +
                                "x" + std::to_string(s.image.width) + " grid");
  return {crop_grid(s.image, at, patch), crop_grid(s.annotation, at, patch), crop_grid(s.p_true, at, patch), s.meta};
}

CropWindow random_crop_window(const SyntheticSample& s, std::size_t patch, std::mt19937_64& rng,
                              std::size_t foreground_retries) {
  if (patch == 0 || patch > s.image.height || patch > s.image.width)
    throw std::invalid_argument("random_crop: patch " + std::to_string(patch) + " does not fit a " +
                                std::to_string(s.image.height) + "x" + std::to_string(s.image.width) + " grid");
  std::uniform_int_distribution<std::size_t> row(0, s.image.height - patch), col(0, s.image.width - patch);
  CropWindow w{row(rng), col(rng)};
  for (std::size_t attempt = 0; attempt < foreground_retries; ++attempt) {
    bool any = false;
    for (std::size_t r = 0; r < patch && !any; ++r)
      for (std::size_t c = 0; c < patch && !any; ++c) any = s.annotation.at(w.row + r, w.col + c) != 0;
    if (any) break;
    w = {row(rng), col(rng)};
  }
  return w;
}

SyntheticSample random_crop(const SyntheticSample& s, std::size_t patch, std::mt19937_64& rng,
                            std::size_t foreground_retries) {
  return crop(s, random_crop_window(s, patch, rng, foreground_retries), patch);
}

// ---------------------------------------------------------------------------
// Splits

namespace {

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace

Split split_dataset(std::size_t n, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("split_dataset: train_fraction must lie in (0, 1)");
  if (n < 2) throw std::invalid_argument("split_dataset: need at least 2 samples");
  auto idx = permutation(n, seed);
  auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  Split s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

std::vector<std::vector<std::size_t>> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k == 0 || k > n)
    throw std::invalid_argument("kfold_split: k = " + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
  const auto idx = permutation(n, seed);
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = n / k + (f < n % k ? 1 : 0);
    folds[f].assign(idx.begin() + static_cast<std::ptrdiff_t>(pos), idx.begin() + static_cast<std::ptrdiff_t>(pos + len));
    std::sort(folds[f].begin(), folds[f].end());
    pos += len;
  }
  return folds;
}

// ---------------------------------------------------------------------------
// Directory format

namespace {

json config_to_json(const DatasetConfig& c) {
  return json{{"n_samples", c.n_samples},         {"grid_size", c.grid_size},
              {"blobs_min", c.blobs_min},         {"blobs_max", c.blobs_max},
              {"blob_scale_min", c.blob_scale_min}, {"blob_scale_max", c.blob_scale_max},
              {"confusers_min", c.confusers_min}, {"confusers_max", c.confusers_max},
              {"lesion_gain", c.lesion_gain},     {"confuser_gain", c.confuser_gain},
              {"texture_amplitude", c.texture_amplitude}, {"noise_std", c.noise_std},
              {"tau_min", c.tau_min},             {"tau_max", c.tau_max},
              {"train_fraction", c.train_fraction}, {"seed", c.seed}};
}

DatasetConfig config_from_json(const json& j) {
  DatasetConfig c;
  j.at("n_samples").get_to(c.n_samples);
  j.at("grid_size").get_to(c.grid_size);
  j.at("blobs_min").get_to(c.blobs_min);
  j.at("blobs_max").get_to(c.blobs_max);
  j.at("blob_scale_min").get_to(c.blob_scale_min);
  j.at("blob_scale_max").get_to(c.blob_scale_max);
  j.at("confusers_min").get_to(c.confusers_min);
  j.at("confusers_max").get_to(c.confusers_max);
  j.at("lesion_gain").get_to(c.lesion_gain);
  j.at("confuser_gain").get_to(c.confuser_gain);
  j.at("texture_amplitude").get_to(c.texture_amplitude);
  j.at("noise_std").get_to(c.noise_std);
  j.at("tau_min").get_to(c.tau_min);
  j.at("tau_max").get_to(c.tau_max);
  j.at("train_fraction").get_to(c.train_fraction);
  j.at("seed").get_to(c.seed);
  return c;
}

std::string sample_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%04zu", i);
  return buf;
}

}  // namespace

std::string dataset_config_json(const DatasetConfig& config) { return config_to_json(config).dump(); }

DatasetConfig dataset_config_from_json(const std::string& text) { return config_from_json(json::parse(text)); }

Dataset make_dataset(const DatasetConfig& config) {
  Dataset ds;
  ds.config = config;
  ds.samples = generate_dataset(config);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) ds.ids.push_back(sample_id(i));
  if (config.n_samples >= 2) ds.split = split_dataset(config.n_samples, config.train_fraction, config.seed);
  return ds;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    const auto sub = dir / ds.ids[i];
    std::filesystem::create_directories(sub);
    write_f64(sub / "image.f64", s.image.values);
    write_u8(sub / "annotation.u8", s.annotation.values);
    write_f64(sub / "ptrue.f64", s.p_true.values);
    json header{{"shape", {s.image.height, s.image.width}},
                {"dtype", {{"image", "f64"}, {"annotation", "u8"}, {"ptrue", "f64"}}},
                {"byte_order", "little"},
                {"meta",
                 {{"seed", s.meta.seed},
                  {"blob_count", s.meta.blob_count},
                  {"confuser_count", s.meta.confuser_count},
                  {"tau", s.meta.tau}}}};
    write_text(sub / "header", header.dump(2) + "\n");
  }
  json manifest{{"format_version", kDatasetFormatVersion},
                {"config", config_to_json(ds.config)},
                {"samples", ds.ids},
                {"split", {{"train", ds.split.train}, {"val", ds.split.val}}}};
  write_text(dir / "dataset.manifest", manifest.dump(2) + "\n");
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "dataset.manifest";
  if (!std::filesystem::exists(manifest_path)) throw FormatError("no dataset.manifest in " + dir.string());
  json m;
  try {
    m = json::parse(read_text(manifest_path));
  } catch (const json::exception& e) {
    throw FormatError("malformed dataset manifest " + manifest_path.string() + ": " + e.what());
  }
  if (m.value("format_version", -1) != kDatasetFormatVersion)
    throw FormatError("unsupported dataset format version in " + manifest_path.string());
  Dataset ds;
  ds.config = config_from_json(m.at("config"));
  ds.ids = m.at("samples").get<std::vector<std::string>>();
  ds.split.train = m.at("split").at("train").get<std::vector<std::size_t>>();
  ds.split.val = m.at("split").at("val").get<std::vector<std::size_t>>();
  for (const auto& id : ds.ids) {
    const auto sub = dir / id;
    const json h = json::parse(read_text(sub / "header"));
    const auto shape = h.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw FormatError(id + ": header shape must have two axes");
    SyntheticSample s;
    const std::size_t count = shape[0] * shape[1];
    s.image = Grid<double>(shape[0], shape[1]);
    s.image.values = read_f64(sub / "image.f64", count);
    s.annotation = Grid<std::uint8_t>(shape[0], shape[1]);
    s.annotation.values = read_u8(sub / "annotation.u8", count);
    s.p_true = Grid<double>(shape[0], shape[1]);
    s.p_true.values = read_f64(sub / "ptrue.f64", count);
    const json& meta = h.at("meta");
    meta.at("seed").get_to(s.meta.seed);
    meta.at("blob_count").get_to(s.meta.blob_count);
    meta.at("confuser_count").get_to(s.meta.confuser_count);
    meta.at("tau").get_to(s.meta.tau);
    ds.samples.push_back(std::move(s));
  }
  for (auto i : ds.split.train)
    if (i >= ds.samples.size()) throw FormatError("dataset split references sample " + std::to_string(i));
  for (auto i : ds.split.val)
    if (i >= ds.samples.size()) throw FormatError("dataset split references sample " + std::to_string(i));
  return ds;
}

}  // namespace hyperseg
