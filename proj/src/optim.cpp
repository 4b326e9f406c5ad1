#include "hyperseg/optim.hpp"

#include <cmath>
#include <string>

namespace hyperseg {

void adam_step(std::vector<Tensor>& params, AdamState& state) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    if (state.m[i].size() != params[i].numel()) {
      if (!state.m[i].empty())
        throw ShapeError("adam_step: moment buffer for parameter " + std::to_string(i) +
                         " does not match shape " + shape_str(params[i].shape()));
      state.m[i].assign(params[i].numel(), 0.0);
      state.v[i].assign(params[i].numel(), 0.0);
    }
    for (double g : params[i].grad())
      if (!std::isfinite(g))
        throw NonFiniteGradient("adam_step: non-finite gradient in parameter " +
                                std::to_string(i) + " " + shape_str(params[i].shape()));
  }

  const AdamConfig& c = state.config;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    auto theta = params[i].mutable_data();
    auto g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      if (c.weight_decay != 0.0) theta[j] -= c.lr * c.weight_decay * theta[j];
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      theta[j] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

Adam::Adam(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)) {
  state_.config = config;
  state_.m.assign(params_.size(), {});
  state_.v.assign(params_.size(), {});
}

void Adam::zero_grad() {
  for (auto& p : params_)
    if (p.has_grad()) p.zero_grad();
}

}  // namespace hyperseg
