#pragma once

#include <string>
#include <vector>

#include "metadiff/nn/resblock.hpp"

namespace metadiff::nn {

struct UNetConfig {
  int in_channels = 3;
  int out_channels = 3;
  int base_channels = 32;
  std::vector<int> channel_mult{1, 2, 4};  // one entry per resolution level
  int blocks_per_level = 2;
  int groups = 8;
  int cond_dim = 128;
  int image_size = 32;

  int channels(std::size_t level) const { return base_channels * channel_mult.at(level); }
  std::size_t levels() const { return channel_mult.size(); }
};

/// Encoder/decoder of FiLM residual blocks. Each encoder level (except the
/// deepest) hands its output to the decoder by channel concatenation after
/// nearest upsampling.
template <typename T>
class UNet {
 public:
  UNet() = default;
  UNet(const UNetConfig& cfg, InitRng& rng, const std::string& name = "unet") : cfg_(cfg) {
    if (cfg.levels() == 0 || cfg.blocks_per_level < 1) throw std::invalid_argument("UNet: need >= 1 level and block");
    if (cfg.image_size % (1 << (cfg.levels() - 1)) != 0)
      throw std::invalid_argument("UNet: image size not divisible by 2^(levels-1)");
    in_conv_ = Conv2d<T>(name + ".in_conv", cfg.in_channels, cfg.base_channels, 3, rng);
    int ch = cfg.base_channels;
    encoder_.resize(cfg.levels());
    for (std::size_t l = 0; l < cfg.levels(); ++l)
      for (int b = 0; b < cfg.blocks_per_level; ++b) {
        encoder_[l].emplace_back(name + ".enc" + std::to_string(l) + "." + std::to_string(b), ch, cfg.channels(l),
                                 cfg.cond_dim, cfg.groups, rng);
        ch = cfg.channels(l);
      }
    decoder_.resize(cfg.levels());
    for (std::size_t l = cfg.levels(); l-- > 0;)
      for (int b = 0; b < cfg.blocks_per_level; ++b) {
        int in = ch;
        if (b == 0 && l + 1 < cfg.levels()) in = ch + cfg.channels(l);
        decoder_[l].emplace_back(name + ".dec" + std::to_string(l) + "." + std::to_string(b), in, cfg.channels(l),
                                 cfg.cond_dim, cfg.groups, rng);
        ch = cfg.channels(l);
      }
    out_norm_ = GroupNorm<T>(name + ".out_norm", ch, cfg.groups);
    out_conv_ = Conv2d<T>(name + ".out_conv", ch, cfg.out_channels, 3, rng, /*zero_init=*/true);
  }

  const UNetConfig& config() const { return cfg_; }

  /// x: {in_channels, N, H, W}; cond: {N, cond_dim}.
  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& cond) {
    if (x.rank() != 4 || x.dim(2) != cfg_.image_size || x.dim(3) != cfg_.image_size)
      throw std::invalid_argument("UNet: expected " + std::to_string(cfg_.image_size) + "x" +
                                  std::to_string(cfg_.image_size) + " input, got " + x.shape_string());
    if (cond.rank() != 2 || cond.dim(0) != x.dim(1) || cond.dim(1) != cfg_.cond_dim)
      throw std::invalid_argument("UNet: conditioning batch " + cond.shape_string() + " does not match input");
    skip_channels_.clear();
    std::vector<Tensor<T>> skips;
    Tensor<T> h = in_conv_.forward(x);
    const std::size_t levels = cfg_.levels();
    for (std::size_t l = 0; l < levels; ++l) {
      for (auto& blk : encoder_[l]) h = blk.forward(h, cond);
      if (l + 1 < levels) {
        skips.push_back(h);
        h = avg_pool2(h);
      }
    }
    for (std::size_t l = levels; l-- > 0;) {
      if (l + 1 < levels) {
        skip_channels_.push_back(skips[l].dim(0));
        h = concat_channels(upsample2(h), skips[l]);
      }
      for (auto& blk : decoder_[l]) h = blk.forward(h, cond);
    }
    return out_conv_.forward(out_act_.forward(out_norm_.forward(h)));
  }

  /// Returns {grad x, grad cond}.
  std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& gy, bool need_input_grad = true) {
    Tensor<T> g = out_norm_.backward(out_act_.backward(out_conv_.backward(gy)));
    Tensor<T> gcond;
    auto add_cond = [&gcond](Tensor<T>&& gc) {
      if (gcond.empty())
        gcond = std::move(gc);
      else
        gcond += gc;
    };
    const std::size_t levels = cfg_.levels();
    std::vector<Tensor<T>> skip_grads(levels);
    std::size_t skip_idx = skip_channels_.size();
    for (std::size_t l = 0; l < levels; ++l) {
      for (auto it = decoder_[l].rbegin(); it != decoder_[l].rend(); ++it) {
        auto [gx, gc] = it->backward(g);
        g = std::move(gx);
        add_cond(std::move(gc));
      }
      if (l + 1 < levels) {
        --skip_idx;
        const int up_channels = g.dim(0) - skip_channels_[skip_idx];
        auto [gup, gskip] = split_channels(g, up_channels);
        skip_grads[l] = std::move(gskip);
        g = upsample2_backward(gup);
      }
    }
    for (std::size_t l = levels; l-- > 0;) {
      if (l + 1 < levels) {
        g = avg_pool2_backward(g);
        g += skip_grads[l];
      }
      for (auto it = encoder_[l].rbegin(); it != encoder_[l].rend(); ++it) {
        auto [gx, gc] = it->backward(g);
        g = std::move(gx);
        add_cond(std::move(gc));
      }
    }
    return {in_conv_.backward(g, need_input_grad), std::move(gcond)};
  }

  void collect(ParameterList<T>& out) {
    in_conv_.collect(out);
    for (auto& level : encoder_)
      for (auto& b : level) b.collect(out);
    for (std::size_t l = decoder_.size(); l-- > 0;)
      for (auto& b : decoder_[l]) b.collect(out);
    out_norm_.collect(out);
    out_conv_.collect(out);
  }

 private:
  UNetConfig cfg_;
  Conv2d<T> in_conv_;
  std::vector<std::vector<FilmResBlock<T>>> encoder_, decoder_;
  GroupNorm<T> out_norm_;
  SiLU<T> out_act_;
  Conv2d<T> out_conv_;
  std::vector<int> skip_channels_;  // in decoder order
};

}  // namespace metadiff::nn
