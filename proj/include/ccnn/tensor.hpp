#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "ccnn/core.hpp"

namespace ccnn {

// Dense NHWC tensor. Flat vectors use h = w = 1.
template <typename T>
struct tensor {
  int n = 0, h = 0, w = 0, c = 0;
  std::vector<T> v;

  tensor() = default;
  tensor(int n_, int h_, int w_, int c_)
      : n(n_), h(h_), w(w_), c(c_),
        v(static_cast<size_t>(n_) * h_ * w_ * c_, T(0)) {}

  static tensor flat(int count) { return tensor(1, 1, 1, count); }

  size_t size() const { return v.size(); }
  bool empty() const { return v.empty(); }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  T& at(int ni, int yi, int xi, int ci) {
    return v[((static_cast<size_t>(ni) * h + yi) * w + xi) * c + ci];
  }
  const T& at(int ni, int yi, int xi, int ci) const {
    return v[((static_cast<size_t>(ni) * h + yi) * w + xi) * c + ci];
  }

  // Pointer to the channel vector at one spatial position.
  T* row(int ni, int yi, int xi) {
    return v.data() + ((static_cast<size_t>(ni) * h + yi) * w + xi) * c;
  }
  const T* row(int ni, int yi, int xi) const {
    return v.data() + ((static_cast<size_t>(ni) * h + yi) * w + xi) * c;
  }

  void fill(T value) { std::fill(v.begin(), v.end(), value); }

  bool same_shape(const tensor& o) const {
    return n == o.n && h == o.h && w == o.w && c == o.c;
  }

  std::string shape_str() const {
    return std::to_string(n) + "x" + std::to_string(h) + "x" + std::to_string(w) +
           "x" + std::to_string(c);
  }

  template <typename U>
  tensor<U> cast() const {
    tensor<U> out(n, h, w, c);
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }
};

template <typename T>
void check_same_shape(const tensor<T>& a, const tensor<T>& b, const std::string& what) {
  if (!a.same_shape(b))
    throw error(what + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace ccnn
