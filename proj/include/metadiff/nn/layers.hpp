#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "metadiff/nn/tensor.hpp"

namespace metadiff::nn {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

// ---------------------------------------------------------------------------

/// y = x W^T + b on {N, in} rows.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out, InitRng& rng, bool zero_init = false)
      : weight(name + ".weight", {out, in}), bias(name + ".bias", {out}), in_(in), out_(out) {
    if (!zero_init) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      init_uniform(weight.value, bound, rng);
      init_uniform(bias.value, bound, rng);
    }
  }

  int in_features() const { return in_; }
  int out_features() const { return out_; }

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.rank() != 2 || x.dim(1) != in_)
      throw std::invalid_argument(weight.name + ": expected {N," + std::to_string(in_) + "}, got " + x.shape_string());
    x_ = x;
    const int n = x.dim(0);
    Tensor<T> y({n, out_});
    MatMap<T> ym(y.data(), n, out_);
    ym.noalias() = ConstMatMap<T>(x.data(), n, in_) * ConstMatMap<T>(weight.value.data(), out_, in_).transpose();
    ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.value.data(), out_);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    const int n = x_.dim(0);
    ConstMatMap<T> g(gy.data(), n, out_);
    if (!frozen) {
      MatMap<T>(weight.grad.data(), out_, in_).noalias() += g.transpose() * ConstMatMap<T>(x_.data(), n, in_);
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.grad.data(), out_) += g.colwise().sum();
    }
    Tensor<T> gx({n, in_});
    MatMap<T>(gx.data(), n, in_).noalias() = g * ConstMatMap<T>(weight.value.data(), out_, in_);
    return gx;
  }

  void collect(ParameterList<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Parameter<T> weight, bias;
  bool frozen = false;

 private:
  int in_ = 0, out_ = 0;
  Tensor<T> x_;
};

// ---------------------------------------------------------------------------

namespace detail {

// Rows ordered (c, ky, kx); columns ordered (n, y, x).
template <typename T>
void im2col3x3(const T* x, int c_in, int n, int h, int w, T* col) {
  const std::size_t p = static_cast<std::size_t>(n) * h * w;
  for (int c = 0; c < c_in; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        T* dst = col + static_cast<std::size_t>(c * 9 + ky * 3 + kx) * p;
        const int dy = ky - 1, dx = kx - 1;
        for (int i = 0; i < n; ++i)
          for (int y = 0; y < h; ++y) {
            T* d = dst + (static_cast<std::size_t>(i) * h + y) * w;
            const int sy = y + dy;
            if (sy < 0 || sy >= h) {
              std::fill_n(d, w, T(0));
              continue;
            }
            const T* s = x + ((static_cast<std::size_t>(c) * n + i) * h + sy) * w;
            if (dx == 0) {
              std::copy_n(s, w, d);
            } else if (dx < 0) {
              d[0] = T(0);
              std::copy_n(s, w - 1, d + 1);
            } else {
              std::copy_n(s + 1, w - 1, d);
              d[w - 1] = T(0);
            }
          }
      }
}

template <typename T>
void col2im3x3(const T* col, int c_in, int n, int h, int w, T* x) {
  const std::size_t p = static_cast<std::size_t>(n) * h * w;
  std::fill_n(x, static_cast<std::size_t>(c_in) * p, T(0));
  for (int c = 0; c < c_in; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const T* src = col + static_cast<std::size_t>(c * 9 + ky * 3 + kx) * p;
        const int dy = ky - 1, dx = kx - 1;
        for (int i = 0; i < n; ++i)
          for (int y = 0; y < h; ++y) {
            const int sy = y + dy;
            if (sy < 0 || sy >= h) continue;
            const T* s = src + (static_cast<std::size_t>(i) * h + y) * w;
            T* d = x + ((static_cast<std::size_t>(c) * n + i) * h + sy) * w;
            const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
            for (int xx = x0; xx < x1; ++xx) d[xx + dx] += s[xx];
          }
      }
}

}  // namespace detail

/// Stride-1 "same" convolution with a 1x1 or 3x3 kernel on {C, N, H, W} maps.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in, int out, int kernel, InitRng& rng, bool zero_init = false)
      : weight(name + ".weight", {out, in, kernel, kernel}), bias(name + ".bias", {out}), in_(in), out_(out), k_(kernel) {
    if (kernel != 1 && kernel != 3) throw std::invalid_argument(name + ": only 1x1 and 3x3 kernels are supported");
    if (!zero_init) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
      init_uniform(weight.value, bound, rng);
      init_uniform(bias.value, bound, rng);
    }
  }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.rank() != 4 || x.dim(0) != in_)
      throw std::invalid_argument(weight.name + ": expected " + std::to_string(in_) + " input channels, got " +
                                  x.shape_string());
    x_ = x;
    const int n = x.dim(1), h = x.dim(2), w = x.dim(3);
    const Eigen::Index p = static_cast<Eigen::Index>(n) * h * w;
    const Eigen::Index kdim = static_cast<Eigen::Index>(in_) * k_ * k_;
    Tensor<T> y({out_, n, h, w});
    MatMap<T> ym(y.data(), out_, p);
    ConstMatMap<T> wm(weight.value.data(), out_, kdim);
    if (k_ == 1) {
      ym.noalias() = wm * ConstMatMap<T>(x.data(), kdim, p);
    } else {
      auto& col = scratch<T>(static_cast<std::size_t>(kdim * p));
      detail::im2col3x3(x.data(), in_, n, h, w, col.data());
      ym.noalias() = wm * ConstMatMap<T>(col.data(), kdim, p);
    }
    ym.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.value.data(), out_);
    return y;
  }

  /// Returns the input gradient (empty when need_input_grad is false).
  Tensor<T> backward(const Tensor<T>& gy, bool need_input_grad = true) {
    const int n = x_.dim(1), h = x_.dim(2), w = x_.dim(3);
    const Eigen::Index p = static_cast<Eigen::Index>(n) * h * w;
    const Eigen::Index kdim = static_cast<Eigen::Index>(in_) * k_ * k_;
    ConstMatMap<T> g(gy.data(), out_, p);
    ConstMatMap<T> wm(weight.value.data(), out_, kdim);
    const T* cols = x_.data();
    if (k_ == 3 && !frozen) {
      auto& col = scratch<T>(static_cast<std::size_t>(kdim * p));
      detail::im2col3x3(x_.data(), in_, n, h, w, col.data());
      cols = col.data();
    }
    if (!frozen) {
      MatMap<T>(weight.grad.data(), out_, kdim).noalias() += g * ConstMatMap<T>(cols, kdim, p).transpose();
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.grad.data(), out_) += g.rowwise().sum();
    }
    if (!need_input_grad) return {};
    Tensor<T> gx({in_, n, h, w});
    if (k_ == 1) {
      MatMap<T>(gx.data(), kdim, p).noalias() = wm.transpose() * g;
    } else {
      auto& dcol = scratch<T>(static_cast<std::size_t>(kdim * p), 1);
      MatMap<T>(dcol.data(), kdim, p).noalias() = wm.transpose() * g;
      detail::col2im3x3(dcol.data(), in_, n, h, w, gx.data());
    }
    return gx;
  }

  void collect(ParameterList<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Parameter<T> weight, bias;
  bool frozen = false;

 private:
  int in_ = 0, out_ = 0, k_ = 3;
  Tensor<T> x_;
};

// ---------------------------------------------------------------------------

/// Group normalization over (channels-in-group, H, W) per sample, with affine.
template <typename T>
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(const std::string& name, int channels, int groups, double eps = 1e-5)
      : weight(name + ".weight", {channels}), bias(name + ".bias", {channels}), channels_(channels),
        groups_(groups), eps_(eps) {
    if (groups <= 0 || channels % groups != 0)
      throw std::invalid_argument(name + ": channels must be divisible by groups");
    weight.value.fill(T(1));
  }

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.rank() != 4 || x.dim(0) != channels_)
      throw std::invalid_argument(weight.name + ": channel mismatch " + x.shape_string());
    const int n = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    const int cpg = channels_ / groups_;
    xhat_ = Tensor<T>(x.shape());
    rstd_ = Tensor<T>({n, groups_});
    Tensor<T> y(x.shape());
    const double m = static_cast<double>(cpg) * plane;
    for (int i = 0; i < n; ++i)
      for (int g = 0; g < groups_; ++g) {
        double sum = 0.0, sq = 0.0;
        for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
          const T* px = x.data() + (static_cast<std::size_t>(c) * n + i) * plane;
          for (std::size_t k = 0; k < plane; ++k) sum += px[k];
        }
        const double mean = sum / m;
        for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
          const T* px = x.data() + (static_cast<std::size_t>(c) * n + i) * plane;
          for (std::size_t k = 0; k < plane; ++k) {
            const double d = px[k] - mean;
            sq += d * d;
          }
        }
        const double rstd = 1.0 / std::sqrt(sq / m + eps_);
        rstd_[static_cast<std::size_t>(i * groups_ + g)] = static_cast<T>(rstd);
        for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
          const std::size_t off = (static_cast<std::size_t>(c) * n + i) * plane;
          const T gam = weight.value[static_cast<std::size_t>(c)], bet = bias.value[static_cast<std::size_t>(c)];
          for (std::size_t k = 0; k < plane; ++k) {
            const T xh = static_cast<T>((x[off + k] - mean) * rstd);
            xhat_[off + k] = xh;
            y[off + k] = xh * gam + bet;
          }
        }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    const int n = xhat_.dim(1);
    const std::size_t plane = static_cast<std::size_t>(xhat_.dim(2)) * xhat_.dim(3);
    const int cpg = channels_ / groups_;
    const double m = static_cast<double>(cpg) * plane;
    Tensor<T> gx(xhat_.shape());
    for (int i = 0; i < n; ++i)
      for (int g = 0; g < groups_; ++g) {
        double s1 = 0.0, s2 = 0.0;  // sum(dxhat), sum(dxhat * xhat)
        for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
          const std::size_t off = (static_cast<std::size_t>(c) * n + i) * plane;
          const T gam = weight.value[static_cast<std::size_t>(c)];
          double gw = 0.0, gb = 0.0;
          for (std::size_t k = 0; k < plane; ++k) {
            const double d = gy[off + k];
            gw += d * xhat_[off + k];
            gb += d;
            const double dxh = d * gam;
            s1 += dxh;
            s2 += dxh * xhat_[off + k];
          }
          if (!frozen) {
            weight.grad[static_cast<std::size_t>(c)] += static_cast<T>(gw);
            bias.grad[static_cast<std::size_t>(c)] += static_cast<T>(gb);
          }
        }
        const double rstd = rstd_[static_cast<std::size_t>(i * groups_ + g)];
        const double mean1 = s1 / m, mean2 = s2 / m;
        for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
          const std::size_t off = (static_cast<std::size_t>(c) * n + i) * plane;
          const double gam = weight.value[static_cast<std::size_t>(c)];
          for (std::size_t k = 0; k < plane; ++k)
            gx[off + k] = static_cast<T>(rstd * (gy[off + k] * gam - mean1 - xhat_[off + k] * mean2));
        }
      }
    return gx;
  }

  void collect(ParameterList<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Parameter<T> weight, bias;
  bool frozen = false;

 private:
  int channels_ = 0, groups_ = 1;
  double eps_ = 1e-5;
  Tensor<T> xhat_, rstd_;
};

// ---------------------------------------------------------------------------

/// x * sigmoid(x)
template <typename T>
class SiLU {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    x_ = x;
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] / (T(1) + std::exp(-x[i]));
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy) const {
    Tensor<T> gx(x_.shape());
    for (std::size_t i = 0; i < x_.numel(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-x_[i]));
      gx[i] = gy[i] * s * (T(1) + x_[i] * (T(1) - s));
    }
    return gx;
  }

 private:
  Tensor<T> x_;
};

template <typename T>
class Sigmoid {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    y_ = Tensor<T>(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) y_[i] = T(1) / (T(1) + std::exp(-x[i]));
    return y_;
  }
  Tensor<T> backward(const Tensor<T>& gy) const {
    Tensor<T> gx(y_.shape());
    for (std::size_t i = 0; i < y_.numel(); ++i) gx[i] = gy[i] * y_[i] * (T(1) - y_[i]);
    return gx;
  }

 private:
  Tensor<T> y_;
};

// ---------------------------------------------------------------------------
// Resampling on {C, N, H, W}

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  const int c = x.dim(0), n = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw std::invalid_argument("avg_pool2: odd spatial size " + x.shape_string());
  Tensor<T> y({c, n, h / 2, w / 2});
  const std::size_t planes = static_cast<std::size_t>(c) * n;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* s = x.data() + pl * h * w;
    T* d = y.data() + pl * (h / 2) * (w / 2);
    for (int yy = 0; yy < h / 2; ++yy)
      for (int xx = 0; xx < w / 2; ++xx)
        d[yy * (w / 2) + xx] = T(0.25) * (s[2 * yy * w + 2 * xx] + s[2 * yy * w + 2 * xx + 1] +
                                         s[(2 * yy + 1) * w + 2 * xx] + s[(2 * yy + 1) * w + 2 * xx + 1]);
  }
  return y;
}

template <typename T>
Tensor<T> avg_pool2_backward(const Tensor<T>& gy) {
  const int c = gy.dim(0), n = gy.dim(1), h = gy.dim(2) * 2, w = gy.dim(3) * 2;
  Tensor<T> gx({c, n, h, w});
  const std::size_t planes = static_cast<std::size_t>(c) * n;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* s = gy.data() + pl * (h / 2) * (w / 2);
    T* d = gx.data() + pl * h * w;
    for (int yy = 0; yy < h; ++yy)
      for (int xx = 0; xx < w; ++xx) d[yy * w + xx] = T(0.25) * s[(yy / 2) * (w / 2) + xx / 2];
  }
  return gx;
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
Tensor<T> upsample2(const Tensor<T>& x) {
  const int c = x.dim(0), n = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y({c, n, 2 * h, 2 * w});
  const std::size_t planes = static_cast<std::size_t>(c) * n;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* s = x.data() + pl * h * w;
    T* d = y.data() + pl * 4 * h * w;
    for (int yy = 0; yy < 2 * h; ++yy)
      for (int xx = 0; xx < 2 * w; ++xx) d[yy * 2 * w + xx] = s[(yy / 2) * w + xx / 2];
  }
  return y;
}

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& gy) {
  const int c = gy.dim(0), n = gy.dim(1), h = gy.dim(2) / 2, w = gy.dim(3) / 2;
  Tensor<T> gx({c, n, h, w});
  const std::size_t planes = static_cast<std::size_t>(c) * n;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* s = gy.data() + pl * 4 * h * w;
    T* d = gx.data() + pl * h * w;
    for (int yy = 0; yy < 2 * h; ++yy)
      for (int xx = 0; xx < 2 * w; ++xx) d[(yy / 2) * w + xx / 2] += s[yy * 2 * w + xx];
  }
  return gx;
}

}  // namespace metadiff::nn
