#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "hyperseg/grid.hpp"
#include "hyperseg/losses.hpp"
#include "hyperseg/models.hpp"

namespace hyperseg {

// [B, 1, patch, patch] images -> [B, 1, patch, patch] probabilities.
using PatchPredictor = std::function<Tensor(const Tensor&)>;

struct SlidingWindowConfig {
  std::size_t patch = 64;
  double overlap = 0.8;
  std::size_t batch = 16;  // windows per forward call; does not change results

  void validate() const;
};

// max(1, round(patch * (1 - overlap)))
std::size_t window_stride(std::size_t patch, double overlap);
// Window origins along one axis; the last window is clamped to the edge.
std::vector<std::size_t> window_starts(std::size_t extent, std::size_t patch, std::size_t stride);
// Number of windows covering each pixel.
Grid<std::size_t> window_coverage(std::size_t height, std::size_t width, const SlidingWindowConfig& cfg);

ProbabilityMap sliding_window_predict(const Grid<double>& image, const PatchPredictor& predict,
                                      const SlidingWindowConfig& cfg);
// Eval-mode forward; hyper models need h.
ProbabilityMap sliding_window_predict(const Grid<double>& image, const SegmentationNet& net,
                                      const SlidingWindowConfig& cfg,
                                      std::optional<TverskyParams> h = std::nullopt);

ProbabilityMap average_probability_maps(const std::vector<ProbabilityMap>& maps);

// {0.1, 0.2, ..., 0.9}
std::vector<double> default_alpha_grid();

ProbabilityMap member_ensemble_predict(const Grid<double>& image, const std::vector<const SegmentationNet*>& members,
                                       const SlidingWindowConfig& cfg);
ProbabilityMap hyper_ensemble_predict(const Grid<double>& image, const SegmentationNet& hyper,
                                      const std::vector<double>& alphas, const SlidingWindowConfig& cfg);

// Foreground where p >= tau.
LabelMap threshold_map(const ProbabilityMap& p, double tau);

inline constexpr double kEntropyEps = 5e-5;
// -(p+eps) ln(p+eps) - (1-p+eps) ln(1-p+eps)
Grid<double> entropy_map(const ProbabilityMap& p, double eps = kEntropyEps);

// Raw little-endian f64 `<stem>.f64` plus `<stem>.header`.
void write_map(const std::filesystem::path& stem, const Grid<double>& map);
Grid<double> read_map(const std::filesystem::path& stem);
// Binary PGM, [0, 1] -> [0, 255].
void write_pgm(const std::filesystem::path& path, const Grid<double>& map);
void write_pgm(const std::filesystem::path& path, const LabelMap& map);

}  // namespace hyperseg
