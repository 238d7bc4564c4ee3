#pragma once

// Dense row-major tensors over contiguous storage. double is the reference
// precision throughout the library; the float instantiation backs the
// reduced-precision fast path.

#include <cassert>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgm {

template <typename T>
struct TensorT {
  std::vector<std::size_t> shape;
  std::vector<T> v;

  TensorT() = default;

  explicit TensorT(std::vector<std::size_t> s)
      : shape(std::move(s)), v(element_count(shape), T(0)) {}

  TensorT(std::vector<std::size_t> s, std::vector<T> values)
      : shape(std::move(s)), v(std::move(values)) {
    if (v.size() != element_count(shape)) {
      throw std::invalid_argument("tensor: value count " + std::to_string(v.size()) +
                                  " does not match shape " + shape_string());
    }
  }

  // Empty shape means the empty tensor (used for absent weights), not a scalar.
  static std::size_t element_count(const std::vector<std::size_t>& s) {
    if (s.empty()) return 0;
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }

  std::size_t size() const { return v.size(); }
  bool empty() const { return v.empty(); }

  std::size_t dim(std::size_t i) const {
    assert(i < shape.size());
    return shape[i];
  }

  T& operator[](std::size_t i) { return v[i]; }
  const T& operator[](std::size_t i) const { return v[i]; }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  T& at2(std::size_t i, std::size_t j) {
    assert(shape.size() == 2);
    return v[i * shape[1] + j];
  }
  const T& at2(std::size_t i, std::size_t j) const {
    assert(shape.size() == 2);
    return v[i * shape[1] + j];
  }

  T& at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
    assert(shape.size() == 4);
    return v[((a * shape[1] + b) * shape[2] + c) * shape[3] + d];
  }
  const T& at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
    assert(shape.size() == 4);
    return v[((a * shape[1] + b) * shape[2] + c) * shape[3] + d];
  }

  void fill(T value) {
    for (T& x : v) x = value;
  }

  bool same_shape(const TensorT& other) const { return shape == other.shape; }

  std::string shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

}  // namespace sgm
