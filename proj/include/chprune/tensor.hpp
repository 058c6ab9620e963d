#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "chprune/error.hpp"
#include "chprune/graph.hpp"

namespace chprune {

/// Dense channels-first tensor, row-major over (batch, channel, spatial...).
template <typename T>
struct Tensor {
  TensorShape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(TensorShape s, T fill = T(0)) : shape(std::move(s)), data(static_cast<size_t>(shape.elements()), fill) {}
  Tensor(TensorShape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (static_cast<int64_t>(data.size()) != shape.elements())
      throw Error(ErrorCode::LengthMismatch, "tensor data does not match shape " + shape.str());
  }

  size_t size() const { return data.size(); }
  int64_t plane() const { return shape.spatial_size(); }
  T* channel(int64_t b, int64_t c) { return data.data() + (b * shape.channels + c) * plane(); }
  const T* channel(int64_t b, int64_t c) const { return data.data() + (b * shape.channels + c) * plane(); }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

}  // namespace chprune
