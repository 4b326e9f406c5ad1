#pragma once

#include <random>
#include <span>

#include "hyperseg/tensor.hpp"

namespace hyperseg {

// Tversky hyperparameter h = (alpha, beta), always on the simplex beta = 1 - alpha.
// alpha weighs false positives, beta false negatives.
struct TverskyParams {
  double alpha = 0.5;
  double beta = 0.5;

  static TverskyParams from_alpha(double alpha);  // throws unless 0 <= alpha <= 1
  void validate() const;
};

struct LossConfig {
  double smooth = 1.0;
  double dice_ce_mix = 0.5;  // weight of the Dice term; the rest is cross-entropy
  void validate() const;
};

// How soft counts are pooled for an [N, ...] batch.
enum class Reduction {
  kGlobal,         // one index over every element
  kPerSampleMean,  // one index per leading-axis sample, then averaged
};

// (TP + s) / (TP + alpha*FP + beta*FN + s) with soft counts
// TP = sum p*g, FP = sum p*(1-g), FN = sum (1-p)*g.
double tversky_index(std::span<const double> p, std::span<const double> g, TverskyParams h,
                     double smooth);

// 1 - tversky index; differentiable w.r.t. p.
Tensor tversky_loss(const Tensor& p, const Tensor& g, TverskyParams h, double smooth,
                    Reduction reduction = Reduction::kGlobal);

// 1 - 2(sum p*g + s) / (sum p + sum g + 2s). The smoothing is expressed in the
// same TP units as the Tversky index so both agree exactly at alpha = 0.5.
Tensor soft_dice_loss(const Tensor& p, const Tensor& g, double smooth,
                      Reduction reduction = Reduction::kGlobal);

// Mean binary cross-entropy, p clamped to [1e-7, 1 - 1e-7].
Tensor binary_cross_entropy(const Tensor& p, const Tensor& g);

// mix * soft Dice + (1 - mix) * cross-entropy.
Tensor dice_ce_loss(const Tensor& p, const Tensor& g, double mix, double smooth,
                    Reduction reduction = Reduction::kGlobal);

inline constexpr double kAlphaSamplingMargin = 0.05;

// alpha ~ U(margin, 1 - margin), beta = 1 - alpha.
TverskyParams sample_tversky_params(std::mt19937_64& rng, double margin = kAlphaSamplingMargin);

}  // namespace hyperseg
