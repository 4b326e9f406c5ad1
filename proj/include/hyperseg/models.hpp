#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "hyperseg/losses.hpp"
#include "hyperseg/optim.hpp"
#include "hyperseg/serialize.hpp"
#include "hyperseg/tensor.hpp"

namespace hyperseg {

enum class ModelKind { kPlain, kHyper };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);

// Architecture of the residual encoder-decoder. kernel_depths lists the
// channel count of each encoder level; the decoder mirrors it.
struct ModelSpec {
  ModelKind kind = ModelKind::kPlain;
  int spatial_rank = 2;
  std::vector<std::size_t> kernel_depths{8, 16, 32, 64};
  std::size_t hypervector_size = 16;  // hyper only
  std::size_t mapping_layers = 3;     // hyper only
  std::size_t input_channels = 1;
  std::size_t kernel_size = 3;

  void validate() const;
  std::size_t levels() const { return kernel_depths.size(); }
  // Spatial extents must be multiples of this.
  std::size_t spatial_divisor() const { return std::size_t{1} << (levels() - 1); }

  bool operator==(const ModelSpec&) const = default;
};

// One convolution site of the primary network.
struct ConvSite {
  std::string name;
  std::size_t cin = 0;
  std::size_t cout = 0;
  std::size_t k = 0;
  int stride = 1;
  int padding = 0;
  bool transposed = false;

  Shape weight_shape() const;  // [cout,cin,k,k], or [cin,cout,k,k] when transposed
  std::size_t weight_count() const { return cin * cout * k * k; }
};

// A per-channel site (batch norm or PReLU).
struct ChannelSite {
  std::string name;
  std::size_t channels = 0;
};

struct LayerInventory {
  std::vector<ConvSite> convs;
  std::vector<ChannelSite> norms;
  std::vector<ChannelSite> activations;
};

LayerInventory layer_inventory(const ModelSpec& spec);

// Names and shapes of every trainable tensor the spec instantiates, in order.
std::vector<std::pair<std::string, Shape>> parameter_inventory(const ModelSpec& spec);
std::vector<std::pair<std::string, Shape>> buffer_inventory(const ModelSpec& spec);

// Exact number of trainable scalars, computed from layer arithmetic.
std::size_t count_params(const ModelSpec& spec);

struct ConvWeights {
  Tensor weight;
  Tensor bias;
};

struct ForwardOptions {
  bool training = false;
  double dropout = 0.0;            // channel dropout after each encoder block (training only)
  std::mt19937_64* rng = nullptr;  // required when dropout > 0 in training
};

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Residual unit: PReLU(BN(conv(x))) + skip(x), where skip is the identity or
// a 1x1 projection carrying the same stride.
Tensor residual_unit(const Tensor& x, const ConvWeights& main, const ConvSite& main_site,
                     const ConvWeights* projection, const ConvSite* projection_site,
                     const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                     Tensor& running_var, const Tensor& slope, bool training);

inline constexpr double kProbabilityFloor = 1e-12;

// Plain or hyper residual U-Net. Move-only: copies of Tensor handles alias
// storage, so use clone() for an independent model.
class SegmentationNet {
 public:
  static SegmentationNet create(const ModelSpec& spec, std::uint64_t seed);
  // Builds a model from explicit tensors; every inventory entry must be present once.
  static SegmentationNet from_tensors(const ModelSpec& spec, std::vector<NamedTensor> params,
                                      std::vector<NamedTensor> buffers);

  SegmentationNet(SegmentationNet&&) = default;
  SegmentationNet& operator=(SegmentationNet&&) = default;
  SegmentationNet(const SegmentationNet&) = delete;
  SegmentationNet& operator=(const SegmentationNet&) = delete;

  SegmentationNet clone() const;

  const ModelSpec& spec() const { return spec_; }
  ModelKind kind() const { return spec_.kind; }

  // image [N, Cin, H, W] -> probability map [N, 1, H, W]. Hyper models need h.
  // Training mode updates the batch-norm running buffers.
  Tensor forward(const Tensor& image, const ForwardOptions& opts,
                 std::optional<TverskyParams> h = std::nullopt) const;

  // Hyper only: h -> hypervector [1, hypervector_size].
  Tensor mapping_forward(TverskyParams h) const;
  // Hyper only: the primary-network kernel for `site` generated from z_h.
  ConvWeights generate(const ConvSite& site, const Tensor& hypervector) const;
  // Hyper only: a plain network carrying the weights generated for h and
  // copies of the normalization/activation parameters and buffers.
  SegmentationNet export_plain(TverskyParams h) const;

  const std::vector<NamedTensor>& parameters() const { return params_; }
  const std::vector<NamedTensor>& buffers() const { return buffers_; }
  std::vector<Tensor> trainable() const;
  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  const Tensor& buffer(const std::string& name) const;

  void zero_grad();

 private:
  SegmentationNet() = default;
  ConvWeights conv_weights(const ConvSite& site, const Tensor* hypervector) const;

  ModelSpec spec_;
  LayerInventory layers_;
  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
  std::unordered_map<std::string, std::size_t> param_index_;
  std::unordered_map<std::string, std::size_t> buffer_index_;
};

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointFormatVersion = 1;

struct TrainingMetadata {
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  std::vector<double> loss_curve;
  std::map<std::string, std::string> tags;
};

struct Checkpoint {
  SegmentationNet model;
  std::optional<AdamState> optimizer;
  TrainingMetadata meta;
};

// Directory with `manifest` (JSON) and `weights.bin`.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir,
                           std::optional<ModelKind> expected_kind = std::nullopt);

}  // namespace hyperseg
