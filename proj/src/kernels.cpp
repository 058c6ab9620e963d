#include "chprune/kernels.hpp"

#include <algorithm>
#include <cstring>

namespace chprune::kernels {

namespace {

// Range of output columns [lo, hi) whose input column ow*stride - pad + kw is in bounds.
inline void valid_columns(const Conv2dGeometry& g, int64_t kw, int64_t& lo, int64_t& hi) {
  int64_t offset = kw - g.padding;
  lo = offset >= 0 ? 0 : (-offset + g.stride - 1) / g.stride;
  int64_t last = g.in_w - 1 - offset;  // ow*stride <= last
  hi = last < 0 ? 0 : std::min(g.out_w, last / g.stride + 1);
  lo = std::min(lo, hi);
}

}  // namespace

template <typename T>
void conv2d_forward(const Conv2dGeometry& g, const T* in, const T* weight, const T* bias, T* out) {
  const int64_t in_plane = g.in_h * g.in_w;
  const int64_t out_plane = g.out_h * g.out_w;
  const int64_t ksize = g.kernel_h * g.kernel_w;
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < g.batch; ++n) {
    for (int64_t co = 0; co < g.out_channels; ++co) {
      T* o = out + (n * g.out_channels + co) * out_plane;
      std::fill(o, o + out_plane, bias ? bias[co] : T(0));
      for (int64_t ci = 0; ci < g.in_channels; ++ci) {
        const T* x = in + (n * g.in_channels + ci) * in_plane;
        const T* w = weight + (co * g.in_channels + ci) * ksize;
        for (int64_t kh = 0; kh < g.kernel_h; ++kh) {
          for (int64_t kw = 0; kw < g.kernel_w; ++kw) {
            const T wv = w[kh * g.kernel_w + kw];
            if (wv == T(0)) continue;
            int64_t lo, hi;
            valid_columns(g, kw, lo, hi);
            for (int64_t oh = 0; oh < g.out_h; ++oh) {
              int64_t ih = oh * g.stride - g.padding + kh;
              if (ih < 0 || ih >= g.in_h) continue;
              T* orow = o + oh * g.out_w;
              const T* xrow = x + ih * g.in_w + kw - g.padding;
              if (g.stride == 1) {
                for (int64_t ow = lo; ow < hi; ++ow) orow[ow] += wv * xrow[ow];
              } else {
                for (int64_t ow = lo; ow < hi; ++ow) orow[ow] += wv * xrow[ow * g.stride];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(const Conv2dGeometry& g, const T* grad_out, const T* weight, T* grad_in) {
  const int64_t in_plane = g.in_h * g.in_w;
  const int64_t out_plane = g.out_h * g.out_w;
  const int64_t ksize = g.kernel_h * g.kernel_w;
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < g.batch; ++n) {
    for (int64_t ci = 0; ci < g.in_channels; ++ci) {
      T* gi = grad_in + (n * g.in_channels + ci) * in_plane;
      std::fill(gi, gi + in_plane, T(0));
      for (int64_t co = 0; co < g.out_channels; ++co) {
        const T* go = grad_out + (n * g.out_channels + co) * out_plane;
        const T* w = weight + (co * g.in_channels + ci) * ksize;
        for (int64_t kh = 0; kh < g.kernel_h; ++kh) {
          for (int64_t kw = 0; kw < g.kernel_w; ++kw) {
            const T wv = w[kh * g.kernel_w + kw];
            if (wv == T(0)) continue;
            int64_t lo, hi;
            valid_columns(g, kw, lo, hi);
            for (int64_t oh = 0; oh < g.out_h; ++oh) {
              int64_t ih = oh * g.stride - g.padding + kh;
              if (ih < 0 || ih >= g.in_h) continue;
              const T* grow = go + oh * g.out_w;
              T* irow = gi + ih * g.in_w + kw - g.padding;
              if (g.stride == 1) {
                for (int64_t ow = lo; ow < hi; ++ow) irow[ow] += wv * grow[ow];
              } else {
                for (int64_t ow = lo; ow < hi; ++ow) irow[ow * g.stride] += wv * grow[ow];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight(const Conv2dGeometry& g, const T* in, const T* grad_out, T* grad_weight, T* grad_bias) {
  const int64_t in_plane = g.in_h * g.in_w;
  const int64_t out_plane = g.out_h * g.out_w;
  const int64_t ksize = g.kernel_h * g.kernel_w;
  // Each output channel owns its slice of grad_weight; the batch loop stays
  // serial inside it so the summation order is fixed.
#pragma omp parallel for schedule(static)
  for (int64_t co = 0; co < g.out_channels; ++co) {
    if (grad_bias) {
      double acc = 0;
      for (int64_t n = 0; n < g.batch; ++n) {
        const T* go = grad_out + (n * g.out_channels + co) * out_plane;
        T row = 0;
        for (int64_t i = 0; i < out_plane; ++i) row += go[i];
        acc += row;
      }
      grad_bias[co] += static_cast<T>(acc);
    }
    for (int64_t ci = 0; ci < g.in_channels; ++ci) {
      T* gw = grad_weight + (co * g.in_channels + ci) * ksize;
      for (int64_t kh = 0; kh < g.kernel_h; ++kh) {
        for (int64_t kw = 0; kw < g.kernel_w; ++kw) {
          int64_t lo, hi;
          valid_columns(g, kw, lo, hi);
          double acc = 0;
          for (int64_t n = 0; n < g.batch; ++n) {
            const T* go = grad_out + (n * g.out_channels + co) * out_plane;
            const T* x = in + (n * g.in_channels + ci) * in_plane;
            for (int64_t oh = 0; oh < g.out_h; ++oh) {
              int64_t ih = oh * g.stride - g.padding + kh;
              if (ih < 0 || ih >= g.in_h) continue;
              const T* grow = go + oh * g.out_w;
              const T* xrow = x + ih * g.in_w + kw - g.padding;
              T row = 0;
              if (g.stride == 1) {
                for (int64_t ow = lo; ow < hi; ++ow) row += grow[ow] * xrow[ow];
              } else {
                for (int64_t ow = lo; ow < hi; ++ow) row += grow[ow] * xrow[ow * g.stride];
              }
              acc += row;
            }
          }
          gw[kh * g.kernel_w + kw] += static_cast<T>(acc);
        }
      }
    }
  }
}

template <typename T>
void linear_forward(int64_t batch, int64_t in_features, int64_t out_features, const T* in, const T* weight,
                    const T* bias, T* out) {
#pragma omp parallel for schedule(static)
  for (int64_t n = 0; n < batch; ++n) {
    const T* x = in + n * in_features;
    for (int64_t o = 0; o < out_features; ++o) {
      const T* w = weight + o * in_features;
      T acc = bias ? bias[o] : T(0);
      for (int64_t i = 0; i < in_features; ++i) acc += w[i] * x[i];
      out[n * out_features + o] = acc;
    }
  }
}

template <typename T>
void linear_backward(int64_t batch, int64_t in_features, int64_t out_features, const T* in, const T* weight,
                     const T* grad_out, T* grad_in, T* grad_weight, T* grad_bias) {
#pragma omp parallel for schedule(static)
  for (int64_t n = 0; n < batch; ++n) {
    T* gi = grad_in + n * in_features;
    std::fill(gi, gi + in_features, T(0));
    for (int64_t o = 0; o < out_features; ++o) {
      const T go = grad_out[n * out_features + o];
      const T* w = weight + o * in_features;
      for (int64_t i = 0; i < in_features; ++i) gi[i] += go * w[i];
    }
  }
#pragma omp parallel for schedule(static)
  for (int64_t o = 0; o < out_features; ++o) {
    double bacc = 0;
    for (int64_t n = 0; n < batch; ++n) {
      const T go = grad_out[n * out_features + o];
      bacc += go;
      const T* x = in + n * in_features;
      T* gw = grad_weight + o * in_features;
      for (int64_t i = 0; i < in_features; ++i) gw[i] += go * x[i];
    }
    if (grad_bias) grad_bias[o] += static_cast<T>(bacc);
  }
}

#define CHPRUNE_INSTANTIATE(T)                                                                               \
  template void conv2d_forward<T>(const Conv2dGeometry&, const T*, const T*, const T*, T*);                  \
  template void conv2d_backward_input<T>(const Conv2dGeometry&, const T*, const T*, T*);                     \
  template void conv2d_backward_weight<T>(const Conv2dGeometry&, const T*, const T*, T*, T*);                \
  template void linear_forward<T>(int64_t, int64_t, int64_t, const T*, const T*, const T*, T*);              \
  template void linear_backward<T>(int64_t, int64_t, int64_t, const T*, const T*, const T*, T*, T*, T*);

CHPRUNE_INSTANTIATE(float)
CHPRUNE_INSTANTIATE(double)
#undef CHPRUNE_INSTANTIATE

}  // namespace chprune::kernels
