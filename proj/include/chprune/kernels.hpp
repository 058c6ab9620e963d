#pragma once

#include <cstdint>

namespace chprune::kernels {

struct Conv2dGeometry {
  int64_t batch = 1;
  int64_t in_channels = 1;
  int64_t in_h = 1;
  int64_t in_w = 1;
  int64_t out_channels = 1;
  int64_t kernel_h = 1;
  int64_t kernel_w = 1;
  int64_t stride = 1;
  int64_t padding = 0;
  int64_t out_h = 1;
  int64_t out_w = 1;
};

// OpenMP kernels. Work is split over independent outputs only, so results do
// not depend on the thread count.

/// out[n, co] = bias[co] + sum_ci,kh,kw w[co, ci, kh, kw] * in[n, ci, ...]; bias may be null.
template <typename T>
void conv2d_forward(const Conv2dGeometry& g, const T* in, const T* weight, const T* bias, T* out);

/// Overwrites grad_in.
template <typename T>
void conv2d_backward_input(const Conv2dGeometry& g, const T* grad_out, const T* weight, T* grad_in);

/// Accumulates into grad_weight and grad_bias (grad_bias may be null).
template <typename T>
void conv2d_backward_weight(const Conv2dGeometry& g, const T* in, const T* grad_out, T* grad_weight, T* grad_bias);

/// out[n, o] = bias[o] + sum_i w[o, i] * in[n, i].
template <typename T>
void linear_forward(int64_t batch, int64_t in_features, int64_t out_features, const T* in, const T* weight,
                    const T* bias, T* out);

template <typename T>
void linear_backward(int64_t batch, int64_t in_features, int64_t out_features, const T* in, const T* weight,
                     const T* grad_out, T* grad_in, T* grad_weight, T* grad_bias);

}  // namespace chprune::kernels

namespace chprune::reference {

// Serial definitions kept as test oracles and benchmark baselines; all
// reductions accumulate in double.

template <typename T>
void conv2d_forward(const kernels::Conv2dGeometry& g, const T* in, const T* weight, const T* bias, T* out);

template <typename T>
void conv2d_backward_input(const kernels::Conv2dGeometry& g, const T* grad_out, const T* weight, T* grad_in);

template <typename T>
void conv2d_backward_weight(const kernels::Conv2dGeometry& g, const T* in, const T* grad_out, T* grad_weight,
                            T* grad_bias);

template <typename T>
void linear_forward(int64_t batch, int64_t in_features, int64_t out_features, const T* in, const T* weight,
                    const T* bias, T* out);

}  // namespace chprune::reference
