#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "rllm/common.hpp"
#include "rllm/rng.hpp"

namespace rllm::nn {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor with value semantics.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0))
      : shape(std::move(s)), data(static_cast<std::size_t>(numel_of(shape)), fill) {
    for (auto d : shape)
      if (d <= 0) throw ValidationError("Tensor: dimensions must be positive");
  }
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
      throw ValidationError("Tensor: data length does not match shape " + shape_str(shape));
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t dim(std::size_t i) const { return shape[i]; }
  std::size_t rank() const { return shape.size(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  static Tensor zeros(Shape s) { return Tensor(std::move(s), T(0)); }
  static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }

  static Tensor randn(Shape s, Rng& rng, T stddev = T(1)) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  static Tensor eye(std::int64_t n) {
    Tensor t({n, n});
    for (std::int64_t i = 0; i < n; ++i) t.data[static_cast<std::size_t>(i * n + i)] = T(1);
    return t;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

}  // namespace rllm::nn
