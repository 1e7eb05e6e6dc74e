#pragma once

#include <stdexcept>
#include <tuple>

#include "metadiff/nn/layers.hpp"

namespace metadiff::nn {

/// Feature-wise affine modulation: out[c, n, :] = gamma[n, c] * F[c, n, :] + beta[n, c].
/// F is {C, N, H, W}; gamma and beta are {N, C}.
template <typename T>
Tensor<T> film_modulate(const Tensor<T>& features, const Tensor<T>& gamma, const Tensor<T>& beta) {
  if (features.rank() != 4) throw std::invalid_argument("film_modulate: feature map must be {C,N,H,W}");
  const int c = features.dim(0), n = features.dim(1);
  if (gamma.rank() != 2 || gamma.dim(0) != n || gamma.dim(1) != c || !gamma.same_shape(beta))
    throw std::invalid_argument("film_modulate: gamma/beta " + gamma.shape_string() + " do not match " +
                                std::to_string(c) + " channels of " + features.shape_string());
  const std::size_t plane = static_cast<std::size_t>(features.dim(2)) * features.dim(3);
  Tensor<T> out(features.shape());
  for (int k = 0; k < c; ++k)
    for (int i = 0; i < n; ++i) {
      const std::size_t off = (static_cast<std::size_t>(k) * n + i) * plane;
      const T g = gamma[static_cast<std::size_t>(i * c + k)], b = beta[static_cast<std::size_t>(i * c + k)];
      for (std::size_t p = 0; p < plane; ++p) out[off + p] = g * features[off + p] + b;
    }
  return out;
}

template <typename T>
struct FilmGrads {
  Tensor<T> features, gamma, beta;
};

template <typename T>
FilmGrads<T> film_modulate_backward(const Tensor<T>& grad_out, const Tensor<T>& features, const Tensor<T>& gamma) {
  const int c = features.dim(0), n = features.dim(1);
  const std::size_t plane = static_cast<std::size_t>(features.dim(2)) * features.dim(3);
  FilmGrads<T> g{Tensor<T>(features.shape()), Tensor<T>({n, c}), Tensor<T>({n, c})};
  for (int k = 0; k < c; ++k)
    for (int i = 0; i < n; ++i) {
      const std::size_t off = (static_cast<std::size_t>(k) * n + i) * plane;
      const std::size_t gi = static_cast<std::size_t>(i * c + k);
      const T gam = gamma[gi];
      T dg = 0, db = 0;
      for (std::size_t p = 0; p < plane; ++p) {
        g.features[off + p] = gam * grad_out[off + p];
        dg += grad_out[off + p] * features[off + p];
        db += grad_out[off + p];
      }
      g.gamma[gi] = dg;
      g.beta[gi] = db;
    }
  return g;
}

/// Produces (gamma, beta) for C channels from a conditioning vector:
/// [dgamma, beta] = W silu(cond) + b, gamma = 1 + dgamma.
/// Zero-initialized so a fresh layer is the identity modulation.
template <typename T>
class FilmGenerator {
 public:
  FilmGenerator() = default;
  FilmGenerator(const std::string& name, int cond_dim, int channels, InitRng& rng)
      : proj_(name, cond_dim, 2 * channels, rng, /*zero_init=*/true), channels_(channels) {}

  std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& cond) {
    const Tensor<T> raw = proj_.forward(act_.forward(cond));
    const int n = cond.dim(0);
    Tensor<T> gamma({n, channels_}), beta({n, channels_});
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < channels_; ++k) {
        gamma[static_cast<std::size_t>(i * channels_ + k)] = T(1) + raw[static_cast<std::size_t>(i * 2 * channels_ + k)];
        beta[static_cast<std::size_t>(i * channels_ + k)] = raw[static_cast<std::size_t>(i * 2 * channels_ + channels_ + k)];
      }
    return {std::move(gamma), std::move(beta)};
  }

  /// Returns the gradient with respect to cond.
  Tensor<T> backward(const Tensor<T>& grad_gamma, const Tensor<T>& grad_beta) {
    const int n = grad_gamma.dim(0);
    Tensor<T> graw({n, 2 * channels_});
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < channels_; ++k) {
        graw[static_cast<std::size_t>(i * 2 * channels_ + k)] = grad_gamma[static_cast<std::size_t>(i * channels_ + k)];
        graw[static_cast<std::size_t>(i * 2 * channels_ + channels_ + k)] = grad_beta[static_cast<std::size_t>(i * channels_ + k)];
      }
    return act_.backward(proj_.backward(graw));
  }

  void collect(ParameterList<T>& out) { proj_.collect(out); }
  Linear<T>& projection() { return proj_; }

 private:
  Linear<T> proj_;
  SiLU<T> act_;
  int channels_ = 0;
};

}  // namespace metadiff::nn
