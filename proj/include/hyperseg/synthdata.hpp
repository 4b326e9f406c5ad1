#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "hyperseg/grid.hpp"

namespace hyperseg {

struct DatasetConfig {
  std::size_t n_samples = 200;
  std::size_t grid_size = 128;
  std::size_t blobs_min = 1;
  std::size_t blobs_max = 3;
  double blob_scale_min = 3.0;  // Gaussian sigma in pixels
  double blob_scale_max = 7.0;
  std::size_t confusers_min = 0;
  std::size_t confusers_max = 2;
  double lesion_gain = 0.6;
  double confuser_gain = 0.45;
  double texture_amplitude = 0.1;
  double noise_std = 0.05;
  double tau_min = 0.1;  // annotator threshold range
  double tau_max = 0.9;
  double train_fraction = 0.75;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SampleMeta {
  std::uint64_t seed = 0;  // per-sample stream seed
  std::size_t blob_count = 0;
  std::size_t confuser_count = 0;
  double tau = 0.5;
};

struct SyntheticSample {
  Grid<double> image;             // in [0, 1]
  Grid<std::uint8_t> annotation;  // p_true >= tau
  Grid<double> p_true;
  SampleMeta meta;
};

// Deterministic stream seed for sample `index` of a dataset.
std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint64_t index);

SyntheticSample generate_sample(std::mt19937_64& rng, const DatasetConfig& config);
// Sample `index` of the dataset described by `config`; independent of any other sample.
SyntheticSample generate_indexed_sample(const DatasetConfig& config, std::size_t index);
std::vector<SyntheticSample> generate_dataset(const DatasetConfig& config);

// ((I - lo) / (hi - lo))^gamma * (hi - lo) + lo over the image range [lo, hi].
void apply_gamma(Grid<double>& image, double gamma);
inline constexpr double kGammaMin = 0.5;
inline constexpr double kGammaMax = 4.5;
double random_gamma(Grid<double>& image, std::mt19937_64& rng, double lo = kGammaMin, double hi = kGammaMax);

// Reverses the row order of every grid of the sample.
void flip_rows(SyntheticSample& s);
inline constexpr double kFlipProbability = 0.1;
bool random_flip(SyntheticSample& s, std::mt19937_64& rng, double p = kFlipProbability);

struct CropWindow {
  std::size_t row = 0;
  std::size_t col = 0;
};
SyntheticSample crop(const SyntheticSample& s, CropWindow at, std::size_t patch);
// Uniform window; with retries > 0, redraws while the annotation crop is empty.
CropWindow random_crop_window(const SyntheticSample& s, std::size_t patch, std::mt19937_64& rng,
                              std::size_t foreground_retries = 0);
SyntheticSample random_crop(const SyntheticSample& s, std::size_t patch, std::mt19937_64& rng,
                            std::size_t foreground_retries = 0);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};
// Index partitions, deterministic in seed.
Split split_dataset(std::size_t n, double train_fraction, std::uint64_t seed);
std::vector<std::vector<std::size_t>> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Dataset directory

inline constexpr int kDatasetFormatVersion = 1;

struct Dataset {
  DatasetConfig config;
  std::vector<std::string> ids;
  std::vector<SyntheticSample> samples;
  Split split;
};

Dataset make_dataset(const DatasetConfig& config);
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

std::string dataset_config_json(const DatasetConfig& config);
DatasetConfig dataset_config_from_json(const std::string& text);

}  // namespace hyperseg
