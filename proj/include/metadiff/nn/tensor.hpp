#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace metadiff::nn {

/// Storage aligned to the widest SIMD width so vectorized reductions take
/// the same code path (and summation order) regardless of heap layout.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense row-major array. Feature maps use the channel-major layout
/// {C, N, H, W} so that a convolution over a whole batch is a single GEMM
/// and channel concatenation is a contiguous copy.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, T value = T(0)) : shape_(std::move(shape)) {
    data_.assign(count(shape_), value);
  }

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  void reshape(std::vector<int> shape) {
    if (count(shape) != data_.size()) throw std::invalid_argument("Tensor::reshape: element count mismatch");
    shape_ = std::move(shape);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (!same_shape(o)) throw std::invalid_argument(std::string(what) + ": shape " + shape_string() + " vs " + o.shape_string());
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << '{';
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << '}';
    return os.str();
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  std::vector<int> shape_;
  AlignedVector<T> data_;
};

/// Learnable array with its gradient accumulator.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> shape) : name(std::move(n)), value(shape), grad(shape) {}
};

template <typename T>
using ParameterList = std::vector<Parameter<T>*>;

using InitRng = std::mt19937_64;

template <typename T>
void init_uniform(Tensor<T>& t, double bound, InitRng& rng) {
  std::uniform_real_distribution<double> d(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
}

/// Thread-local scratch buffer reused across layers (im2col columns etc.).
template <typename T>
AlignedVector<T>& scratch(std::size_t n, int slot = 0) {
  thread_local AlignedVector<T> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b;
}

// ---------------------------------------------------------------------------
// Layout helpers for {C, N, H, W} maps

/// Channel concatenation: a {Ca,N,H,W} ++ b {Cb,N,H,W}.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw std::invalid_argument("concat_channels: incompatible maps " + a.shape_string() + " " + b.shape_string());
  Tensor<T> out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2), a.dim(3)});
  std::copy(a.values().begin(), a.values().end(), out.data());
  std::copy(b.values().begin(), b.values().end(), out.data() + a.numel());
  return out;
}

/// Inverse of concat_channels for gradients.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& g, int channels_first) {
  const int n = g.dim(1), h = g.dim(2), w = g.dim(3);
  Tensor<T> a({channels_first, n, h, w});
  Tensor<T> b({g.dim(0) - channels_first, n, h, w});
  std::copy(g.data(), g.data() + a.numel(), a.data());
  std::copy(g.data() + a.numel(), g.data() + g.numel(), b.data());
  return {std::move(a), std::move(b)};
}

/// {N,C,H,W} (sample-major, as images are stored) to {C,N,H,W}.
template <typename T>
Tensor<T> to_channel_major(const Tensor<T>& x) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<T> out({c, n, h, w});
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < c; ++k)
      std::copy_n(x.data() + (static_cast<std::size_t>(i) * c + k) * plane, plane,
                  out.data() + (static_cast<std::size_t>(k) * n + i) * plane);
  return out;
}

template <typename T>
Tensor<T> to_sample_major(const Tensor<T>& x) {
  const int c = x.dim(0), n = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<T> out({n, c, h, w});
  for (int k = 0; k < c; ++k)
    for (int i = 0; i < n; ++i)
      std::copy_n(x.data() + (static_cast<std::size_t>(k) * n + i) * plane, plane,
                  out.data() + (static_cast<std::size_t>(i) * c + k) * plane);
  return out;
}

}  // namespace metadiff::nn
