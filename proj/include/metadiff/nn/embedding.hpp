#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metadiff/nn/layers.hpp"

namespace metadiff::nn {

inline constexpr int kSpectrumLength = 201;
inline constexpr int kMaterialFeatures = 3;

/// Fixed standardization of (eps_r, tan_delta, thickness_mm).
template <typename T>
void standardize_material(double eps_r, double tan_delta, double thickness_mm, T* out) {
  out[0] = static_cast<T>(eps_r / 10.0);
  out[1] = static_cast<T>(tan_delta * 100.0);
  out[2] = static_cast<T>(thickness_mm / 5.0);
}

/// A batch of conditions. materials holds standardized features.
template <typename T>
struct ConditionBatch {
  Tensor<T> spectra;                // {N, 201}
  Tensor<T> materials;              // {N, 3}
  std::vector<std::uint8_t> is_null;  // per row; null rows ignore spectra/materials

  int size() const { return spectra.empty() ? static_cast<int>(is_null.size()) : spectra.dim(0); }
};

struct EmbedderConfig {
  int spectrum_dim = 96;
  int material_dim = 32;
  int output_dim() const { return spectrum_dim + material_dim; }
};

/// c = [e_S11, e_m] from two small MLPs, or a learned null vector.
template <typename T>
class ConditionEmbedder {
 public:
  ConditionEmbedder() = default;
  ConditionEmbedder(const EmbedderConfig& cfg, InitRng& rng, const std::string& name = "embed")
      : cfg_(cfg),
        spec1_(name + ".spectrum.0", kSpectrumLength, cfg.spectrum_dim, rng),
        spec2_(name + ".spectrum.1", cfg.spectrum_dim, cfg.spectrum_dim, rng),
        mat1_(name + ".material.0", kMaterialFeatures, cfg.material_dim, rng),
        mat2_(name + ".material.1", cfg.material_dim, cfg.material_dim, rng),
        null_(name + ".null", {cfg.output_dim()}) {
    init_uniform(null_.value, 1.0, rng);
  }

  int output_dim() const { return cfg_.output_dim(); }

  Tensor<T> forward(const ConditionBatch<T>& cond) {
    const int n = cond.size();
    if (static_cast<int>(cond.is_null.size()) != n) throw std::invalid_argument("ConditionEmbedder: null mask size mismatch");
    real_rows_.clear();
    for (int i = 0; i < n; ++i)
      if (!cond.is_null[static_cast<std::size_t>(i)]) real_rows_.push_back(i);
    null_rows_ = static_cast<int>(n - real_rows_.size());
    null_evaluations += static_cast<std::uint64_t>(null_rows_);
    real_evaluations += real_rows_.size();

    const int d = cfg_.output_dim();
    Tensor<T> c({n, d});
    for (int i = 0; i < n; ++i)
      if (cond.is_null[static_cast<std::size_t>(i)]) std::copy_n(null_.value.data(), d, c.data() + static_cast<std::size_t>(i) * d);
    if (real_rows_.empty()) return c;

    if (cond.spectra.rank() != 2 || cond.spectra.dim(1) != kSpectrumLength)
      throw std::invalid_argument("ConditionEmbedder: spectrum must have 201 points, got " + cond.spectra.shape_string());
    if (cond.materials.rank() != 2 || cond.materials.dim(1) != kMaterialFeatures || cond.materials.dim(0) != n)
      throw std::invalid_argument("ConditionEmbedder: material batch must be {N,3}");
    const int m = static_cast<int>(real_rows_.size());
    Tensor<T> s({m, kSpectrumLength}), mat({m, kMaterialFeatures});
    for (int k = 0; k < m; ++k) {
      const auto i = static_cast<std::size_t>(real_rows_[static_cast<std::size_t>(k)]);
      std::copy_n(cond.spectra.data() + i * kSpectrumLength, kSpectrumLength, s.data() + static_cast<std::size_t>(k) * kSpectrumLength);
      std::copy_n(cond.materials.data() + i * kMaterialFeatures, kMaterialFeatures,
                  mat.data() + static_cast<std::size_t>(k) * kMaterialFeatures);
    }
    const Tensor<T> es = spec2_.forward(spec_act_.forward(spec1_.forward(s)));
    const Tensor<T> em = mat2_.forward(mat_act_.forward(mat1_.forward(mat)));
    for (int k = 0; k < m; ++k) {
      T* row = c.data() + static_cast<std::size_t>(real_rows_[static_cast<std::size_t>(k)]) * d;
      std::copy_n(es.data() + static_cast<std::size_t>(k) * cfg_.spectrum_dim, cfg_.spectrum_dim, row);
      std::copy_n(em.data() + static_cast<std::size_t>(k) * cfg_.material_dim, cfg_.material_dim, row + cfg_.spectrum_dim);
    }
    return c;
  }

  /// Accumulates parameter gradients; condition inputs are data, so nothing is returned.
  void backward(const Tensor<T>& gc, const ConditionBatch<T>& cond) {
    const int n = gc.dim(0), d = cfg_.output_dim();
    for (int i = 0; i < n; ++i)
      if (cond.is_null[static_cast<std::size_t>(i)])
        for (int j = 0; j < d; ++j) null_.grad[static_cast<std::size_t>(j)] += gc[static_cast<std::size_t>(i) * d + j];
    if (real_rows_.empty()) return;
    const int m = static_cast<int>(real_rows_.size());
    Tensor<T> gs({m, cfg_.spectrum_dim}), gm({m, cfg_.material_dim});
    for (int k = 0; k < m; ++k) {
      const T* row = gc.data() + static_cast<std::size_t>(real_rows_[static_cast<std::size_t>(k)]) * d;
      std::copy_n(row, cfg_.spectrum_dim, gs.data() + static_cast<std::size_t>(k) * cfg_.spectrum_dim);
      std::copy_n(row + cfg_.spectrum_dim, cfg_.material_dim, gm.data() + static_cast<std::size_t>(k) * cfg_.material_dim);
    }
    spec1_.backward(spec_act_.backward(spec2_.backward(gs)));
    mat1_.backward(mat_act_.backward(mat2_.backward(gm)));
  }

  void collect(ParameterList<T>& out) {
    spec1_.collect(out);
    spec2_.collect(out);
    mat1_.collect(out);
    mat2_.collect(out);
    out.push_back(&null_);
  }

  const Parameter<T>& null_embedding() const { return null_; }

  // Row counters, for checking which branch classifier-free dropout exercised.
  std::uint64_t real_evaluations = 0;
  std::uint64_t null_evaluations = 0;

 private:
  EmbedderConfig cfg_;
  Linear<T> spec1_, spec2_, mat1_, mat2_;
  SiLU<T> spec_act_, mat_act_;
  Parameter<T> null_;
  std::vector<int> real_rows_;
  int null_rows_ = 0;
};

/// Sinusoidal timestep features: [sin(t w_k), cos(t w_k)], w_k = 10000^(-k/half).
template <typename T>
Tensor<T> timestep_embedding(std::span<const int> t, int dim) {
  const int half = dim / 2;
  Tensor<T> e({static_cast<int>(t.size()), dim});
  for (std::size_t i = 0; i < t.size(); ++i)
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / half);
      e[i * dim + static_cast<std::size_t>(k)] = static_cast<T>(std::sin(t[i] * freq));
      e[i * dim + static_cast<std::size_t>(half + k)] = static_cast<T>(std::cos(t[i] * freq));
    }
  return e;
}

}  // namespace metadiff::nn
