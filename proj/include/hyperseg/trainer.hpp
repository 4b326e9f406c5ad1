#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hyperseg/losses.hpp"
#include "hyperseg/models.hpp"
#include "hyperseg/synthdata.hpp"

namespace hyperseg {

enum class Strategy { kSingleDice, kSingleDiceCe, kDropout, kSubsetEnsemble, kVtvEnsemble, kHypernet };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

struct AugmentConfig {
  bool enabled = true;
  double gamma_min = kGammaMin;
  double gamma_max = kGammaMax;
  double flip_probability = kFlipProbability;
  std::size_t foreground_retries = 0;
};

struct TrainConfig {
  Strategy strategy = Strategy::kSingleDiceCe;
  std::size_t epochs = 60;
  std::size_t batch_size = 8;
  // Unset: 1e-4 for plain models, 1e-5 for the hypernet.
  std::optional<double> lr;
  double weight_decay = 1e-3;
  std::size_t patch_size = 64;
  std::uint64_t seed = 0;
  std::vector<double> alpha_grid{0.1, 0.3, 0.5, 0.7, 0.9};
  std::size_t ensemble_size = 5;
  double dropout = 0.1;
  LossConfig loss;
  AugmentConfig augment;
  ModelSpec model;  // kind is forced by the strategy
  // Hypernet only: train with this h instead of sampling one per minibatch.
  std::optional<TverskyParams> fixed_h;

  double effective_lr() const;
  void validate() const;
};

struct LogEntry {
  std::size_t member = 0;
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::optional<double> alpha;  // h used for this step, when the loss is Tversky
  double loss = 0;
  double elapsed_ms = 0;
  std::uint64_t batch_seed = 0;
};

using LogSink = std::function<void(const LogEntry&)>;
std::string format_log_line(const LogEntry& e);

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::uint64_t batch_seed)
      : std::runtime_error(what), batch_seed_(batch_seed) {}
  std::uint64_t batch_seed() const { return batch_seed_; }

 private:
  std::uint64_t batch_seed_;
};

struct TrainedMember {
  std::string name;  // member_<alpha>, fold_<i>, or model
  Checkpoint checkpoint;
  double wall_seconds = 0;
};

struct TrainReport {
  std::vector<std::vector<double>> epoch_loss;  // per member
  double wall_seconds = 0;                      // sum over members
  std::uint64_t seed = 0;
};

struct TrainOutput {
  std::vector<TrainedMember> members;
  TrainReport report;
};

TrainOutput train_single(const std::vector<SyntheticSample>& data, const TrainConfig& cfg, const LogSink& log = {});
TrainOutput train_vtv_ensemble(const std::vector<SyntheticSample>& data, const TrainConfig& cfg,
                               const LogSink& log = {});
TrainOutput train_subset_ensemble(const std::vector<SyntheticSample>& data, const TrainConfig& cfg,
                                  const LogSink& log = {});
TrainOutput train_hypernet(const std::vector<SyntheticSample>& data, const TrainConfig& cfg, const LogSink& log = {});
// Dispatches on cfg.strategy.
TrainOutput train(const std::vector<SyntheticSample>& data, const TrainConfig& cfg, const LogSink& log = {});

std::string member_dir_name_for_alpha(double alpha);
// One checkpoint directory per member under `dir`.
std::vector<std::filesystem::path> save_members(const TrainOutput& out, const std::filesystem::path& dir);

// Stacks crops of the given samples into [N,1,p,p] image and label tensors
// after the training augmentations; exposed for tests.
struct Minibatch {
  Tensor image;
  Tensor label;
};
Minibatch make_minibatch(const std::vector<const SyntheticSample*>& samples, std::size_t patch,
                         const AugmentConfig& aug, std::mt19937_64& rng);

}  // namespace hyperseg
