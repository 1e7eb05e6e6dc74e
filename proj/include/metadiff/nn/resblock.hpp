#pragma once

#include <optional>
#include <string>

#include "metadiff/nn/film.hpp"

namespace metadiff::nn {

/// GN -> SiLU -> conv -> GN -> FiLM(cond) -> SiLU -> conv, plus a (projected) identity path.
template <typename T>
class FilmResBlock {
 public:
  FilmResBlock() = default;
  FilmResBlock(const std::string& name, int in, int out, int cond_dim, int groups, InitRng& rng)
      : norm1_(name + ".norm1", in, groups),
        conv1_(name + ".conv1", in, out, 3, rng),
        norm2_(name + ".norm2", out, groups),
        film_(name + ".film", cond_dim, out, rng),
        conv2_(name + ".conv2", out, out, 3, rng) {
    if (in != out) skip_.emplace(name + ".skip", in, out, 1, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& cond) {
    Tensor<T> h = conv1_.forward(act1_.forward(norm1_.forward(x)));
    normed_ = norm2_.forward(h);
    std::tie(gamma_, beta_) = film_.forward(cond);
    Tensor<T> out = conv2_.forward(act2_.forward(film_modulate(normed_, gamma_, beta_)));
    out += skip_ ? skip_->forward(x) : x;
    return out;
  }

  /// Returns {grad x, grad cond}.
  std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& gy) {
    const Tensor<T> gm = act2_.backward(conv2_.backward(gy));
    FilmGrads<T> fg = film_modulate_backward(gm, normed_, gamma_);
    Tensor<T> gcond = film_.backward(fg.gamma, fg.beta);
    Tensor<T> gx = norm1_.backward(act1_.backward(conv1_.backward(norm2_.backward(fg.features))));
    gx += skip_ ? skip_->backward(gy) : gy;
    return {std::move(gx), std::move(gcond)};
  }

  void collect(ParameterList<T>& out) {
    norm1_.collect(out);
    conv1_.collect(out);
    norm2_.collect(out);
    film_.collect(out);
    conv2_.collect(out);
    if (skip_) skip_->collect(out);
  }

 private:
  GroupNorm<T> norm1_;
  SiLU<T> act1_;
  Conv2d<T> conv1_;
  GroupNorm<T> norm2_;
  FilmGenerator<T> film_;
  SiLU<T> act2_;
  Conv2d<T> conv2_;
  std::optional<Conv2d<T>> skip_;
  Tensor<T> normed_, gamma_, beta_;
};

}  // namespace metadiff::nn
