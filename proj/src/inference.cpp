#include "hyperseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <stdexcept>

#include "hyperseg/serialize.hpp"

namespace hyperseg {

using nlohmann::json;

void SlidingWindowConfig::validate() const {
  if (patch == 0) throw std::invalid_argument("sliding window: patch must be > 0");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw std::invalid_argument("sliding window: overlap must lie in [0, 1)");
  if (batch == 0) throw std::invalid_argument("sliding window: batch must be > 0");
}

std::size_t window_stride(std::size_t patch, double overlap) {
  const auto s = std::llround(static_cast<double>(patch) * (1.0 - overlap));
  return static_cast<std::size_t>(std::max<long long>(1, s));
}

std::vector<std::size_t> window_starts(std::size_t extent, std::size_t patch, std::size_t stride) {
  if (patch > extent)
    throw std::invalid_argument("sliding window: patch " + std::to_string(patch) + " larger than image extent " +
                                std::to_string(extent));
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s + patch < extent; s += stride) out.push_back(s);
  out.push_back(extent - patch);
  return out;
}

Grid<std::size_t> window_coverage(std::size_t height, std::size_t width, const SlidingWindowConfig& cfg) {
  cfg.validate();
  const std::size_t stride = window_stride(cfg.patch, cfg.overlap);
  Grid<std::size_t> cov(height, width, 0);
  for (auto r0 : window_starts(height, cfg.patch, stride))
    for (auto c0 : window_starts(width, cfg.patch, stride))
      for (std::size_t r = 0; r < cfg.patch; ++r)
        for (std::size_t c = 0; c < cfg.patch; ++c) ++cov.at(r0 + r, c0 + c);
  return cov;
}

ProbabilityMap sliding_window_predict(const Grid<double>& image, const PatchPredictor& predict,
                                      const SlidingWindowConfig& cfg) {
  cfg.validate();
  const std::size_t p = cfg.patch, stride = window_stride(p, cfg.overlap);
  std::vector<std::pair<std::size_t, std::size_t>> windows;
  for (auto r0 : window_starts(image.height, p, stride))
    for (auto c0 : window_starts(image.width, p, stride)) windows.emplace_back(r0, c0);

  Grid<double> sum(image.height, image.width, 0.0);
  Grid<std::size_t> count(image.height, image.width, 0);
  for (std::size_t first = 0; first < windows.size(); first += cfg.batch) {
    const std::size_t nb = std::min(cfg.batch, windows.size() - first);
    Tensor batch(Shape{nb, 1, p, p});
    double* dst = batch.mutable_ptr();
    for (std::size_t b = 0; b < nb; ++b) {
      const auto [r0, c0] = windows[first + b];
      for (std::size_t r = 0; r < p; ++r)
        std::copy_n(image.values.begin() + (r0 + r) * image.width + c0, p, dst + (b * p + r) * p);
    }
    const Tensor out = predict(batch);
    if (out.shape() != batch.shape())
      throw ShapeError("sliding window: predictor returned " + shape_str(out.shape()) + " for " +
                       shape_str(batch.shape()));
    for (std::size_t b = 0; b < nb; ++b) {
      const auto [r0, c0] = windows[first + b];
      for (std::size_t r = 0; r < p; ++r)
        for (std::size_t c = 0; c < p; ++c) {
          sum.at(r0 + r, c0 + c) += out[(b * p + r) * p + c];
          ++count.at(r0 + r, c0 + c);
        }
    }
  }
  for (std::size_t i = 0; i < sum.size(); ++i) sum.values[i] /= static_cast<double>(count.values[i]);
  return sum;
}

ProbabilityMap sliding_window_predict(const Grid<double>& image, const SegmentationNet& net,
                                      const SlidingWindowConfig& cfg, std::optional<TverskyParams> h) {
  return sliding_window_predict(
      image, [&](const Tensor& x) { return net.forward(x, ForwardOptions{}, h); }, cfg);
}

ProbabilityMap average_probability_maps(const std::vector<ProbabilityMap>& maps) {
  if (maps.empty()) throw std::invalid_argument("average_probability_maps: no maps");
  ProbabilityMap out(maps[0].height, maps[0].width, 0.0);
  for (const auto& m : maps) require_same_shape(out, m, "average_probability_maps");
  // Per-pixel values are summed in sorted order so the mean is bit-identical
  // under any member order.
  std::vector<double> column(maps.size());
  const double n = static_cast<double>(maps.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t k = 0; k < maps.size(); ++k) column[k] = maps[k].values[i];
    std::sort(column.begin(), column.end());
    double acc = 0.0;
    for (double v : column) acc += v;
    out.values[i] = acc / n;
  }
  return out;
}

std::vector<double> default_alpha_grid() {
  std::vector<double> a;
  for (int i = 1; i <= 9; ++i) a.push_back(i / 10.0);
  return a;
}

ProbabilityMap member_ensemble_predict(const Grid<double>& image, const std::vector<const SegmentationNet*>& members,
                                       const SlidingWindowConfig& cfg) {
  std::vector<ProbabilityMap> maps;
  for (const auto* m : members) maps.push_back(sliding_window_predict(image, *m, cfg));
  return average_probability_maps(maps);
}

ProbabilityMap hyper_ensemble_predict(const Grid<double>& image, const SegmentationNet& hyper,
                                      const std::vector<double>& alphas, const SlidingWindowConfig& cfg) {
  if (hyper.kind() != ModelKind::kHyper) throw ModelError("hyper_ensemble_predict needs a hyper model");
  if (alphas.empty()) throw std::invalid_argument("hyper_ensemble_predict: empty alpha grid");
  std::vector<ProbabilityMap> maps;
  for (double a : alphas) maps.push_back(sliding_window_predict(image, hyper, cfg, TverskyParams::from_alpha(a)));
  return average_probability_maps(maps);
}

LabelMap threshold_map(const ProbabilityMap& p, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("threshold_map: tau must lie in [0, 1]");
  LabelMap out(p.height, p.width, 0);
  for (std::size_t i = 0; i < p.size(); ++i) out.values[i] = p.values[i] >= tau ? 1 : 0;
  return out;
}

Grid<double> entropy_map(const ProbabilityMap& p, double eps) {
  Grid<double> h(p.height, p.width, 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = p.values[i] + eps, b = 1.0 - p.values[i] + eps;
    h.values[i] = -(a * std::log(a)) - (b * std::log(b));
  }
  return h;
}

void write_map(const std::filesystem::path& stem, const Grid<double>& map) {
  auto raw = stem;
  raw += ".f64";
  auto header = stem;
  header += ".header";
  write_f64(raw, map.values);
  write_text(header, json{{"shape", {map.height, map.width}}, {"dtype", "f64"}, {"byte_order", "little"}}.dump(2) + "\n");
}

Grid<double> read_map(const std::filesystem::path& stem) {
  auto raw = stem;
  raw += ".f64";
  auto header = stem;
  header += ".header";
  json h;
  try {
    h = json::parse(read_text(header));
  } catch (const json::exception& e) {
    throw FormatError("malformed map header " + header.string() + ": " + e.what());
  }
  const auto shape = h.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 2 || h.value("dtype", "") != "f64") throw FormatError(header.string() + ": expected a 2-D f64 map");
  Grid<double> g(shape[0], shape[1]);
  g.values = read_f64(raw, g.size());
  return g;
}

namespace {

void write_pgm_bytes(const std::filesystem::path& path, std::size_t h, std::size_t w,
                     const std::vector<unsigned char>& px) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

}  // namespace

void write_pgm(const std::filesystem::path& path, const Grid<double>& map) {
  std::vector<unsigned char> px(map.size());
  for (std::size_t i = 0; i < map.size(); ++i)
    px[i] = static_cast<unsigned char>(std::lround(std::clamp(map.values[i], 0.0, 1.0) * 255.0));
  write_pgm_bytes(path, map.height, map.width, px);
}

void write_pgm(const std::filesystem::path& path, const LabelMap& map) {
  std::vector<unsigned char> px(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) px[i] = map.values[i] ? 255 : 0;
  write_pgm_bytes(path, map.height, map.width, px);
}

}  // namespace hyperseg
