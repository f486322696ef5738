#pragma once

// Tape-free forward and backward kernels. All reductions accumulate in
// double, in a fixed order, regardless of the element type.

#include <cstdint>
#include <span>
#include <vector>

#include "lgm/tensor.hpp"

namespace lgm::kernels {

struct ConvOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

// Output extent of a strided, padded correlation.
std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel, int stride, int padding);
// Output extent of a transposed convolution: (in-1)*stride - 2*padding + kernel.
std::int64_t deconv_out_extent(std::int64_t in, std::int64_t kernel, int stride, int padding);

// Cross-correlation (no kernel flip). x: N,C_in,H,W; w: C_out,C_in/groups,kh,kw.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, ConvOptions opt);

// d(loss)/dx given d(loss)/dy. Also the forward pass of conv_transpose2d.
template <typename T>
Tensor<T> conv2d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& w,
                                const Shape& input_shape, ConvOptions opt);

template <typename T>
Tensor<T> conv2d_backward_weight(const Tensor<T>& x, const Tensor<T>& grad_out,
                                 const Shape& weight_shape, ConvOptions opt);

// Sum of grad_out over N, H, W per channel.
template <typename T>
Tensor<T> channel_bias_grad(const Tensor<T>& grad_out);

// x: N,C_in,H,W; w: C_in,C_out,kh,kw (the layout of the matching conv kernel).
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                           int stride, int padding);

// y = x * w^T + b over all leading axes. w: F_out,F_in.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias);

template <typename T>
struct LinearGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out);

// Normalizes over the last axis.
template <typename T>
struct LayerNormResult {
  Tensor<T> output;
  std::vector<double> mean;  // one per slice
  std::vector<double> rstd;
};

template <typename T>
LayerNormResult<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                              double eps);

template <typename T>
struct LayerNormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                      std::span<const double> mean, std::span<const double> rstd,
                                      const Tensor<T>& grad_out);

// Per-channel statistics over N, H, W. The running variance tracks the
// biased batch variance so that eval mode on the calibration batch
// reproduces training mode exactly.
template <typename T>
struct BatchNormResult {
  Tensor<T> output;
  std::vector<double> mean;  // statistics actually used, per channel
  std::vector<double> rstd;
};

template <typename T>
BatchNormResult<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                Tensor<T>& running_mean, Tensor<T>& running_var, double eps,
                                double momentum, bool training);

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
BatchNormGrads<T> batch_norm2d_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                        std::span<const double> mean, std::span<const double> rstd,
                                        const Tensor<T>& grad_out, bool training);

enum class Activation { gelu, relu6 };

double gelu(double x);
double gelu_grad(double x);
double relu6(double x);
double relu6_grad(double x);

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);
template <typename T>
Tensor<T> activation_backward(const Tensor<T>& x, const Tensor<T>& grad_out, Activation kind);

// Concatenation along axis 1 of two N,C,H,W tensors.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

// Splits axis 1 at `at`: channels [0, at) and [at, C).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, std::int64_t at);

// out[i] = index[i] < 0 ? 0 : x[index[i]].
template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::span<const std::int64_t> index, Shape out_shape);

// Adjoint of gather: grad_x[index[i]] += grad_out[i].
template <typename T>
Tensor<T> gather_backward(const Tensor<T>& grad_out, std::span<const std::int64_t> index,
                          const Shape& input_shape);

}  // namespace lgm::kernels
