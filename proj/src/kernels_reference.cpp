#include "chprune/kernels.hpp"

namespace chprune::reference {

using kernels::Conv2dGeometry;

namespace {

inline bool source(const Conv2dGeometry& g, int64_t oh, int64_t ow, int64_t kh, int64_t kw, int64_t& ih, int64_t& iw) {
  ih = oh * g.stride - g.padding + kh;
  iw = ow * g.stride - g.padding + kw;
  return ih >= 0 && ih < g.in_h && iw >= 0 && iw < g.in_w;
}

}  // namespace

template <typename T>
void conv2d_forward(const Conv2dGeometry& g, const T* in, const T* weight, const T* bias, T* out) {
  for (int64_t n = 0; n < g.batch; ++n)
    for (int64_t co = 0; co < g.out_channels; ++co)
      for (int64_t oh = 0; oh < g.out_h; ++oh)
        for (int64_t ow = 0; ow < g.out_w; ++ow) {
          double acc = bias ? bias[co] : 0.0;
          for (int64_t ci = 0; ci < g.in_channels; ++ci)
            for (int64_t kh = 0; kh < g.kernel_h; ++kh)
              for (int64_t kw = 0; kw < g.kernel_w; ++kw) {
                int64_t ih, iw;
                if (!source(g, oh, ow, kh, kw, ih, iw)) continue;
                acc += static_cast<double>(weight[((co * g.in_channels + ci) * g.kernel_h + kh) * g.kernel_w + kw]) *
                       in[((n * g.in_channels + ci) * g.in_h + ih) * g.in_w + iw];
              }
          out[((n * g.out_channels + co) * g.out_h + oh) * g.out_w + ow] = static_cast<T>(acc);
        }
}

template <typename T>
void conv2d_backward_input(const Conv2dGeometry& g, const T* grad_out, const T* weight, T* grad_in) {
  for (int64_t i = 0; i < g.batch * g.in_channels * g.in_h * g.in_w; ++i) grad_in[i] = 0;
  for (int64_t n = 0; n < g.batch; ++n)
    for (int64_t co = 0; co < g.out_channels; ++co)
      for (int64_t oh = 0; oh < g.out_h; ++oh)
        for (int64_t ow = 0; ow < g.out_w; ++ow) {
          T go = grad_out[((n * g.out_channels + co) * g.out_h + oh) * g.out_w + ow];
          for (int64_t ci = 0; ci < g.in_channels; ++ci)
            for (int64_t kh = 0; kh < g.kernel_h; ++kh)
              for (int64_t kw = 0; kw < g.kernel_w; ++kw) {
                int64_t ih, iw;
                if (!source(g, oh, ow, kh, kw, ih, iw)) continue;
                grad_in[((n * g.in_channels + ci) * g.in_h + ih) * g.in_w + iw] +=
                    go * weight[((co * g.in_channels + ci) * g.kernel_h + kh) * g.kernel_w + kw];
              }
        }
}

template <typename T>
void conv2d_backward_weight(const Conv2dGeometry& g, const T* in, const T* grad_out, T* grad_weight, T* grad_bias) {
  for (int64_t co = 0; co < g.out_channels; ++co) {
    if (grad_bias) {
      double acc = 0;
      for (int64_t n = 0; n < g.batch; ++n)
        for (int64_t i = 0; i < g.out_h * g.out_w; ++i) acc += grad_out[(n * g.out_channels + co) * g.out_h * g.out_w + i];
      grad_bias[co] += static_cast<T>(acc);
    }
    for (int64_t ci = 0; ci < g.in_channels; ++ci)
      for (int64_t kh = 0; kh < g.kernel_h; ++kh)
        for (int64_t kw = 0; kw < g.kernel_w; ++kw) {
          double acc = 0;
          for (int64_t n = 0; n < g.batch; ++n)
            for (int64_t oh = 0; oh < g.out_h; ++oh)
              for (int64_t ow = 0; ow < g.out_w; ++ow) {
                int64_t ih, iw;
                if (!source(g, oh, ow, kh, kw, ih, iw)) continue;
                acc += static_cast<double>(grad_out[((n * g.out_channels + co) * g.out_h + oh) * g.out_w + ow]) *
                       in[((n * g.in_channels + ci) * g.in_h + ih) * g.in_w + iw];
              }
          grad_weight[((co * g.in_channels + ci) * g.kernel_h + kh) * g.kernel_w + kw] += static_cast<T>(acc);
        }
  }
}

template <typename T>
void linear_forward(int64_t batch, int64_t in_features, int64_t out_features, const T* in, const T* weight,
                    const T* bias, T* out) {
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t o = 0; o < out_features; ++o) {
      double acc = bias ? bias[o] : 0.0;
      for (int64_t i = 0; i < in_features; ++i) acc += static_cast<double>(weight[o * in_features + i]) * in[n * in_features + i];
      out[n * out_features + o] = static_cast<T>(acc);
    }
}

#define CHPRUNE_INSTANTIATE(T)                                                                                 \
  template void conv2d_forward<T>(const Conv2dGeometry&, const T*, const T*, const T*, T*);                    \
  template void conv2d_backward_input<T>(const Conv2dGeometry&, const T*, const T*, T*);                       \
  template void conv2d_backward_weight<T>(const Conv2dGeometry&, const T*, const T*, T*, T*);                  \
  template void linear_forward<T>(int64_t, int64_t, int64_t, const T*, const T*, const T*, T*);

CHPRUNE_INSTANTIATE(float)
CHPRUNE_INSTANTIATE(double)
#undef CHPRUNE_INSTANTIATE

}  // namespace chprune::reference
