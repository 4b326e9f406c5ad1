#pragma once

#include <random>

#include "hyperseg/tensor.hpp"

// Differentiable tensor operations. Every function here records a backward
// rule on the active tape when any input requires a gradient.
namespace hyperseg::ops {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor rsub_scalar(double c, const Tensor& x);  // c - x

Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
// Values outside [lo, hi] are pinned and pass no gradient.
Tensor clamp(const Tensor& x, double lo, double hi);

// Reductions.
Tensor sum(const Tensor& x);   // -> [1]
Tensor mean(const Tensor& x);  // -> [1]
// Sum over every axis but the first: [N, ...] -> [N].
Tensor sum_per_sample(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
// Concatenates two [N, C, H, W] tensors along the channel axis.
Tensor concat_channels(const Tensor& a, const Tensor& b);

// input [N, din], weight [dout, din], bias [dout] -> [N, dout]
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias);

// input [N, Cin, H, W], weight [Cout, Cin, k, k], bias [Cout]
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding);
// input [N, Cin, H, W], weight [Cin, Cout, k, k], bias [Cout];
// output extent (H - 1) * stride - 2 * padding + k.
Tensor conv2d_transposed(const Tensor& input, const Tensor& weight, const Tensor& bias,
                         int stride, int padding);

// x [N, C, ...], slope [C]
Tensor prelu(const Tensor& x, const Tensor& slope);

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

// x [N, C, H, W]; gamma, beta, running_mean, running_var [C]. Training mode
// normalizes with batch statistics and updates the running buffers in place
// (never recorded); with N < 2 it falls back to the running statistics.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, const BatchNormOptions& opts);

// Zeroes whole channels with probability p and rescales survivors by 1/(1-p).
Tensor channel_dropout(const Tensor& x, double p, std::mt19937_64& rng);

}  // namespace hyperseg::ops
