#pragma once

#include <string>
#include <vector>

#include "metadiff/nn/embedding.hpp"

namespace metadiff::nn {

struct SurrogateConfig {
  int image_channels = 3;
  int image_size = 32;
  std::vector<int> stage_channels{32, 64, 128};  // each stage halves the resolution
  int material_dim = 32;
  int hidden = 256;
  int outputs = kSpectrumLength;

  int flat_features() const {
    const int side = image_size >> stage_channels.size();
    return stage_channels.back() * side * side;
  }

  static SurrogateConfig toy() {
    SurrogateConfig c;
    c.image_size = 8;
    c.stage_channels = {2, 3, 4};
    c.material_dim = 3;
    c.hidden = 5;
    return c;
  }
};

/// Forward electromagnetic surrogate: encoded image + material -> |S11| in [0,1].
template <typename T>
class Surrogate {
 public:
  Surrogate() = default;
  Surrogate(const SurrogateConfig& cfg, InitRng& rng, const std::string& name = "surrogate") : cfg_(cfg) {
    if (cfg.image_size % (1 << cfg.stage_channels.size()) != 0)
      throw std::invalid_argument("Surrogate: image size not divisible by 2^stages");
    int in = cfg.image_channels;
    for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
      const int out = cfg.stage_channels[s];
      const std::string p = name + ".stage" + std::to_string(s);
      stages_.push_back({Conv2d<T>(p + ".conv0", in, out, 3, rng), {}, Conv2d<T>(p + ".conv1", out, out, 3, rng), {}});
      in = out;
    }
    mat_ = Linear<T>(name + ".material", kMaterialFeatures, cfg.material_dim, rng);
    head1_ = Linear<T>(name + ".head.0", cfg.flat_features() + cfg.material_dim, cfg.hidden, rng);
    head2_ = Linear<T>(name + ".head.1", cfg.hidden, cfg.outputs, rng);
  }

  const SurrogateConfig& config() const { return cfg_; }

  /// image: {3, N, H, W} channel-major in [0,1]; materials: {N, 3} standardized. Returns {N, 201}.
  Tensor<T> forward(const Tensor<T>& image, const Tensor<T>& materials) {
    if (image.rank() != 4 || image.dim(0) != cfg_.image_channels || image.dim(2) != cfg_.image_size ||
        image.dim(3) != cfg_.image_size)
      throw std::invalid_argument("Surrogate: bad image shape " + image.shape_string());
    const int n = image.dim(1);
    if (materials.rank() != 2 || materials.dim(0) != n || materials.dim(1) != kMaterialFeatures)
      throw std::invalid_argument("Surrogate: material batch must be {N,3}");
    Tensor<T> h = image;
    for (auto& st : stages_) {
      h = st.act0.forward(st.conv0.forward(h));
      h = avg_pool2(st.act1.forward(st.conv1.forward(h)));
    }
    flat_shape_ = h.shape();
    const Tensor<T> flat = to_sample_major(h);
    const Tensor<T> em = mat_act_.forward(mat_.forward(materials));
    const int f = cfg_.flat_features(), m = cfg_.material_dim;
    Tensor<T> joined({n, f + m});
    for (int i = 0; i < n; ++i) {
      std::copy_n(flat.data() + static_cast<std::size_t>(i) * f, f, joined.data() + static_cast<std::size_t>(i) * (f + m));
      std::copy_n(em.data() + static_cast<std::size_t>(i) * m, m, joined.data() + static_cast<std::size_t>(i) * (f + m) + f);
    }
    return out_act_.forward(head2_.forward(head_act_.forward(head1_.forward(joined))));
  }

  /// Returns the gradient with respect to the image; parameter gradients
  /// accumulate unless the network is frozen.
  Tensor<T> backward(const Tensor<T>& grad_out) {
    const Tensor<T> gj = head1_.backward(head_act_.backward(head2_.backward(out_act_.backward(grad_out))));
    const int n = gj.dim(0), f = cfg_.flat_features(), m = cfg_.material_dim;
    Tensor<T> gflat({n, flat_shape_[0], flat_shape_[2], flat_shape_[3]}), gem({n, m});
    for (int i = 0; i < n; ++i) {
      std::copy_n(gj.data() + static_cast<std::size_t>(i) * (f + m), f, gflat.data() + static_cast<std::size_t>(i) * f);
      std::copy_n(gj.data() + static_cast<std::size_t>(i) * (f + m) + f, m, gem.data() + static_cast<std::size_t>(i) * m);
    }
    if (!frozen_) mat_.backward(mat_act_.backward(gem));
    Tensor<T> g = to_channel_major(gflat);
    for (std::size_t s = stages_.size(); s-- > 0;) {
      auto& st = stages_[s];
      g = st.conv1.backward(st.act1.backward(avg_pool2_backward(g)));
      g = st.conv0.backward(st.act0.backward(g));
    }
    return g;
  }

  /// Frozen: no parameter gradients are accumulated (gradients still flow to the input).
  void set_frozen(bool frozen) {
    frozen_ = frozen;
    for (auto& st : stages_) st.conv0.frozen = st.conv1.frozen = frozen;
    mat_.frozen = head1_.frozen = head2_.frozen = frozen;
  }
  bool frozen() const { return frozen_; }

  void collect(ParameterList<T>& out) {
    for (auto& st : stages_) {
      st.conv0.collect(out);
      st.conv1.collect(out);
    }
    mat_.collect(out);
    head1_.collect(out);
    head2_.collect(out);
  }

  ParameterList<T> parameters() {
    ParameterList<T> p;
    collect(p);
    return p;
  }

 private:
  struct Stage {
    Conv2d<T> conv0;
    SiLU<T> act0;
    Conv2d<T> conv1;
    SiLU<T> act1;
  };
  SurrogateConfig cfg_;
  std::vector<Stage> stages_;
  Linear<T> mat_, head1_, head2_;
  SiLU<T> mat_act_, head_act_;
  Sigmoid<T> out_act_;
  std::vector<int> flat_shape_;
  bool frozen_ = false;
};

}  // namespace metadiff::nn
