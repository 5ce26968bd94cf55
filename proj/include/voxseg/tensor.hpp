#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <vector>

#include "voxseg/common.hpp"

namespace voxseg {

// Dense row-major tensor, rank <= 5. NN feature maps use (C,D,H,W),
// convolution weights (OC,IC,KD,KH,KW).
template <class T>
struct Tensor {
  std::array<int, 5> dims{1, 1, 1, 1, 1};
  int rank = 0;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::initializer_list<int> shape) { resize(shape); }

  void resize(std::initializer_list<int> shape) {
    rank = int(shape.size());
    int i = 0;
    std::int64_t n = 1;
    dims = {1, 1, 1, 1, 1};
    for (int d : shape) {
      dims[i++] = d;
      n *= d;
    }
    data.assign(std::size_t(n), T(0));
  }
  void resize_like(const Tensor& o) {
    dims = o.dims;
    rank = o.rank;
    data.assign(o.data.size(), T(0));
  }

  std::int64_t numel() const { return std::int64_t(data.size()); }
  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  // (C,D,H,W) accessors
  int c() const { return dims[0]; }
  int d() const { return dims[1]; }
  int h() const { return dims[2]; }
  int w() const { return dims[3]; }
  std::int64_t spatial() const { return std::int64_t(d()) * h() * w(); }

  T& at(int c, int z, int y, int x) {
    return data[std::size_t(((std::int64_t(c) * dims[1] + z) * dims[2] + y) * dims[3] + x)];
  }
  const T& at(int c, int z, int y, int x) const {
    return data[std::size_t(((std::int64_t(c) * dims[1] + z) * dims[2] + y) * dims[3] + x)];
  }

  bool same_shape(const Tensor& o) const { return rank == o.rank && dims == o.dims; }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.dims = dims;
    out.rank = rank;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }
};

template <class T>
inline bool all_finite(const Tensor<T>& t) {
  for (T v : t.data)
    if (!std::isfinite(double(v))) return false;
  return true;
}

}  // namespace voxseg
