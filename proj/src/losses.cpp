#include "hyperseg/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "hyperseg/ops.hpp"

namespace hyperseg {

TverskyParams TverskyParams::from_alpha(double alpha) {
  TverskyParams h{alpha, 1.0 - alpha};
  h.validate();
  return h;
}

void TverskyParams::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw std::invalid_argument("tversky alpha must lie in [0, 1], got " + std::to_string(alpha));
  if (std::abs(alpha + beta - 1.0) > 1e-12)
    throw std::invalid_argument("tversky beta must equal 1 - alpha");
}

void LossConfig::validate() const {
  if (!(smooth > 0.0)) throw std::invalid_argument("loss smoothing must be > 0");
  if (!(dice_ce_mix >= 0.0 && dice_ce_mix <= 1.0))
    throw std::invalid_argument("dice_ce_mix must lie in [0, 1]");
}

double tversky_index(std::span<const double> p, std::span<const double> g, TverskyParams h,
                     double smooth) {
  if (p.size() != g.size())
    throw ShapeError("tversky_index: " + std::to_string(p.size()) + " predictions vs " +
                     std::to_string(g.size()) + " labels");
  double tp = 0.0, fp = 0.0, fn = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    tp += p[i] * g[i];
    fp += p[i] * (1.0 - g[i]);
    fn += (1.0 - p[i]) * g[i];
  }
  return (tp + smooth) / (tp + h.alpha * fp + h.beta * fn + smooth);
}

namespace {

// Pooled soft-count sums: [K] with K = 1 (global) or N (per sample).
Tensor pooled_sum(const Tensor& x, Reduction reduction) {
  if (reduction == Reduction::kGlobal) return ops::sum(x);
  return ops::sum_per_sample(x);
}

void check_pair(const Tensor& p, const Tensor& g, const char* op) {
  if (p.shape() != g.shape())
    throw ShapeError(std::string(op) + ": prediction " + shape_str(p.shape()) + " vs label " +
                     shape_str(g.shape()));
}

}  // namespace

Tensor tversky_loss(const Tensor& p, const Tensor& g, TverskyParams h, double smooth,
                    Reduction reduction) {
  check_pair(p, g, "tversky_loss");
  const Tensor one_minus_g = ops::rsub_scalar(1.0, g);
  const Tensor tp = pooled_sum(ops::mul(p, g), reduction);
  const Tensor fp = pooled_sum(ops::mul(p, one_minus_g), reduction);
  const Tensor fn = pooled_sum(ops::mul(ops::rsub_scalar(1.0, p), g), reduction);
  const Tensor num = ops::add_scalar(tp, smooth);
  const Tensor den = ops::add_scalar(
      ops::add(ops::add(tp, ops::mul_scalar(fp, h.alpha)), ops::mul_scalar(fn, h.beta)), smooth);
  return ops::rsub_scalar(1.0, ops::mean(ops::div(num, den)));
}

Tensor soft_dice_loss(const Tensor& p, const Tensor& g, double smooth, Reduction reduction) {
  check_pair(p, g, "soft_dice_loss");
  const Tensor inter = pooled_sum(ops::mul(p, g), reduction);
  const Tensor total = ops::add(pooled_sum(p, reduction), pooled_sum(g, reduction));
  const Tensor dice = ops::div(ops::mul_scalar(ops::add_scalar(inter, smooth), 2.0),
                               ops::add_scalar(total, 2.0 * smooth));
  return ops::rsub_scalar(1.0, ops::mean(dice));
}

Tensor binary_cross_entropy(const Tensor& p, const Tensor& g) {
  check_pair(p, g, "binary_cross_entropy");
  constexpr double kClamp = 1e-7;
  const Tensor pc = ops::clamp(p, kClamp, 1.0 - kClamp);
  const Tensor pos = ops::mul(g, ops::log(pc));
  const Tensor neg = ops::mul(ops::rsub_scalar(1.0, g), ops::log(ops::rsub_scalar(1.0, pc)));
  return ops::mul_scalar(ops::mean(ops::add(pos, neg)), -1.0);
}

Tensor dice_ce_loss(const Tensor& p, const Tensor& g, double mix, double smooth,
                    Reduction reduction) {
  if (!(mix >= 0.0 && mix <= 1.0)) throw std::invalid_argument("dice_ce_loss: mix outside [0, 1]");
  const Tensor dice = soft_dice_loss(p, g, smooth, reduction);
  if (mix == 1.0) return dice;
  const Tensor ce = binary_cross_entropy(p, g);
  return ops::add(ops::mul_scalar(dice, mix), ops::mul_scalar(ce, 1.0 - mix));
}

TverskyParams sample_tversky_params(std::mt19937_64& rng, double margin) {
  std::uniform_real_distribution<double> u(margin, 1.0 - margin);
  const double alpha = u(rng);
  return {alpha, 1.0 - alpha};
}

}  // namespace hyperseg
