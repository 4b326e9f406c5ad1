#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "hyperseg/inference.hpp"
#include "hyperseg/metrics.hpp"
#include "hyperseg/synthdata.hpp"
#include "hyperseg/trainer.hpp"

namespace hyperseg {

inline constexpr int kArtifactFormatVersion = 1;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Everything a CLI run needs. Flat text form, one `key = value` per line:
//
//   seed = 3
//   dataset.n_samples = 200
//   train.strategy = vtv_ensemble
//   train.alpha_grid = 0.1, 0.3, 0.5, 0.7, 0.9
//
// `#` starts a comment. Lists are comma separated.
struct RunConfig {
  std::uint64_t seed = 0;
  DatasetConfig dataset;
  TrainConfig train;
  SlidingWindowConfig window;
  std::vector<double> ensemble_alphas = default_alpha_grid();  // hypernet inference grid
  std::vector<double> taus{0.5};                                 // label maps written by predict
  double eval_threshold = 0.5;
  double roc_step = 0.05;
  double sweep_step = 0.05;

  EvaluationOptions evaluation_options() const;
  void validate() const;
};

// Applies `text` then `overrides` (each "key=value") on top of the defaults.
// Unknown keys, malformed values, repeated keys within `text`, and a missing
// seed are errors. `dataset.seed` and `train.seed` default to `seed`.
RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides = {});
RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides = {});

// Every key with its effective value, sorted, parseable by parse_run_config.
std::string echo_run_config(const RunConfig& cfg);
// Writes `config.echo` and `FORMAT_VERSION` into `dir`.
void write_config_echo(const RunConfig& cfg, const std::filesystem::path& dir);

std::vector<std::string> run_config_keys();

}  // namespace hyperseg
