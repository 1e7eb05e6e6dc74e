#pragma once

#include <span>
#include <stdexcept>
#include <string>

#include "metadiff/nn/embedding.hpp"
#include "metadiff/nn/unet.hpp"

namespace metadiff::nn {

enum class Conditioning { film, input_concat };

inline std::string to_string(Conditioning c) { return c == Conditioning::film ? "film" : "input_concat"; }
inline Conditioning conditioning_from_string(const std::string& s) {
  if (s == "film") return Conditioning::film;
  if (s == "input_concat") return Conditioning::input_concat;
  throw std::invalid_argument("unknown conditioning '" + s + "' (expected film | input_concat)");
}

struct DenoiserConfig {
  int image_channels = 3;
  int image_size = 32;
  int base_channels = 32;
  std::vector<int> channel_mult{1, 2, 4};
  int blocks_per_level = 2;
  int groups = 8;
  int time_dim = 64;
  EmbedderConfig embedder;
  Conditioning conditioning = Conditioning::film;

  int cond_dim() const { return embedder.output_dim(); }

  /// 3x8x8 network with a handful of channels, for gradient checks.
  static DenoiserConfig toy() {
    DenoiserConfig c;
    c.image_size = 8;
    c.base_channels = 4;
    c.groups = 2;
    c.time_dim = 8;
    c.embedder = {6, 4};
    return c;
  }
};

/// Noise predictor eps(x_t, t, c). With FiLM conditioning the condition
/// embedding (plus the projected timestep features) drives every residual
/// block; with input concatenation the condition is projected to an extra
/// image channel and the blocks see only the timestep.
template <typename T>
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const DenoiserConfig& cfg, InitRng& rng) : cfg_(cfg) {
    embedder_ = ConditionEmbedder<T>(cfg.embedder, rng);
    const int d = cfg.cond_dim();
    time_proj_ = Linear<T>("time.proj", cfg.time_dim, d, rng);
    cond_mlp_ = Linear<T>("cond.mlp", d, d, rng);
    UNetConfig u;
    u.in_channels = cfg.image_channels + (cfg.conditioning == Conditioning::input_concat ? 1 : 0);
    u.out_channels = cfg.image_channels;
    u.base_channels = cfg.base_channels;
    u.channel_mult = cfg.channel_mult;
    u.blocks_per_level = cfg.blocks_per_level;
    u.groups = cfg.groups;
    u.cond_dim = d;
    u.image_size = cfg.image_size;
    if (cfg.conditioning == Conditioning::input_concat)
      concat_proj_ = Linear<T>("concat.proj", d, cfg.image_size * cfg.image_size, rng);
    unet_ = UNet<T>(u, rng);
  }

  const DenoiserConfig& config() const { return cfg_; }
  ConditionEmbedder<T>& embedder() { return embedder_; }

  /// x_t: {3, N, H, W} channel-major; t: N timesteps in [1, T]; returns predicted noise, same shape.
  Tensor<T> forward(const Tensor<T>& x_t, std::span<const int> t, const ConditionBatch<T>& cond) {
    const int n = x_t.rank() == 4 ? x_t.dim(1) : -1;
    if (x_t.rank() != 4 || x_t.dim(0) != cfg_.image_channels || x_t.dim(2) != cfg_.image_size ||
        x_t.dim(3) != cfg_.image_size)
      throw std::invalid_argument("Denoiser: expected {3,N," + std::to_string(cfg_.image_size) + "," +
                                  std::to_string(cfg_.image_size) + "} input, got " + x_t.shape_string());
    if (static_cast<int>(t.size()) != n || cond.size() != n)
      throw std::invalid_argument("Denoiser: batch size mismatch between x_t, t and condition");
    for (int v : t)
      if (v < 1) throw std::invalid_argument("Denoiser: timestep must be >= 1");
    cond_ = cond;
    const Tensor<T> c = embedder_.forward(cond);
    const Tensor<T> temb = time_proj_.forward(timestep_embedding<T>(t, cfg_.time_dim));
    Tensor<T> z = temb;
    if (cfg_.conditioning == Conditioning::film) z += c;
    const Tensor<T> h = cond_mlp_.forward(cond_act_.forward(z));
    if (cfg_.conditioning == Conditioning::film) return unet_.forward(x_t, h);
    Tensor<T> map = concat_proj_.forward(c);
    map.reshape({1, n, cfg_.image_size, cfg_.image_size});
    return unet_.forward(concat_channels(x_t, map), h);
  }

  /// Accumulates parameter gradients; returns the gradient with respect to x_t.
  Tensor<T> backward(const Tensor<T>& grad_eps, bool need_input_grad = true) {
    const bool concat = cfg_.conditioning == Conditioning::input_concat;
    auto [gx, gh] = unet_.backward(grad_eps, need_input_grad || concat);
    const Tensor<T> gz = cond_act_.backward(cond_mlp_.backward(gh));
    time_proj_.backward(gz);
    Tensor<T> gc;
    if (concat) {
      auto [gimg, gmap] = split_channels(gx, cfg_.image_channels);
      gmap.reshape({gmap.dim(1), cfg_.image_size * cfg_.image_size});
      gc = concat_proj_.backward(gmap);
      gx = std::move(gimg);
    } else {
      gc = gz;
    }
    embedder_.backward(gc, cond_);
    return gx;
  }

  void collect(ParameterList<T>& out) {
    embedder_.collect(out);
    time_proj_.collect(out);
    cond_mlp_.collect(out);
    if (cfg_.conditioning == Conditioning::input_concat) concat_proj_.collect(out);
    unet_.collect(out);
  }

  ParameterList<T> parameters() {
    ParameterList<T> p;
    collect(p);
    return p;
  }

 private:
  DenoiserConfig cfg_;
  ConditionEmbedder<T> embedder_;
  Linear<T> time_proj_, cond_mlp_, concat_proj_;
  SiLU<T> cond_act_;
  UNet<T> unet_;
  ConditionBatch<T> cond_;
};

}  // namespace metadiff::nn
