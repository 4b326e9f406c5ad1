#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "hyperseg/tensor.hpp"

namespace hyperseg {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled: theta <- theta - lr * wd * theta
};

struct AdamState {
  AdamConfig config;
  std::int64_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One bias-corrected Adam update over `params` using their accumulated grads.
// Parameters that never received a gradient are left untouched. A NaN or
// infinite gradient anywhere rejects the whole step before any write.
void adam_step(std::vector<Tensor>& params, AdamState& state);

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config);

  void step() { adam_step(params_, state_); }
  void zero_grad();

  const AdamState& state() const { return state_; }
  AdamState& state() { return state_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamState state_;
};

}  // namespace hyperseg
