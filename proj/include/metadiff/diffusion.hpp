#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metadiff/codec.hpp"
#include "metadiff/nn/denoiser.hpp"

namespace metadiff {

using nn::Tensor;

// ---------------------------------------------------------------------------
// Noise schedule

enum class ScheduleKind { linear };

inline std::string to_string(ScheduleKind) { return "linear"; }
inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  throw std::invalid_argument("unknown schedule kind '" + s + "'");
}

inline constexpr int kDefaultTimesteps = 300;
inline constexpr double kBetaStart = 1e-4;
inline constexpr double kBetaEnd = 0.02;

/// Arrays are indexed by t - 1 for t in [1, T].
struct DiffusionSchedule {
  int T = 0;
  std::vector<double> beta, alpha, alpha_bar;

  void check_t(int t) const {
    if (t < 1 || t > T)
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  }
  double beta_at(int t) const { return check_t(t), beta[static_cast<std::size_t>(t - 1)]; }
  double alpha_at(int t) const { return check_t(t), alpha[static_cast<std::size_t>(t - 1)]; }
  /// alpha_bar_at(0) = 1.
  double alpha_bar_at(int t) const {
    if (t == 0) return 1.0;
    check_t(t);
    return alpha_bar[static_cast<std::size_t>(t - 1)];
  }
  double terminal_alpha_bar() const { return alpha_bar.back(); }
  /// Posterior variance beta_t (1 - abar_{t-1}) / (1 - abar_t).
  double posterior_variance(int t) const {
    return beta_at(t) * (1.0 - alpha_bar_at(t - 1)) / (1.0 - alpha_bar_at(t));
  }
};

inline DiffusionSchedule make_schedule(int T, ScheduleKind kind = ScheduleKind::linear) {
  if (T < 2) throw std::invalid_argument("make_schedule: T must be >= 2, got " + std::to_string(T));
  (void)kind;
  DiffusionSchedule s;
  s.T = T;
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    const double b = kBetaStart + (kBetaEnd - kBetaStart) * i / (T - 1);
    prod *= 1.0 - b;
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    s.alpha_bar.push_back(prod);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Forward process, guidance, reverse step

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, elementwise.
template <typename T>
void forward_sample(std::span<const T> x0, int t, std::span<const T> eps, const DiffusionSchedule& s, std::span<T> out) {
  if (x0.size() != eps.size() || out.size() != x0.size()) throw std::invalid_argument("forward_sample: size mismatch");
  s.check_t(t);
  const double ab = s.alpha_bar_at(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = static_cast<T>(a * x0[i] + b * eps[i]);
}

/// Batched forward process on {C, N, H, W} maps with one timestep per sample.
template <typename T>
Tensor<T> forward_sample(const Tensor<T>& x0, std::span<const int> t, const Tensor<T>& eps, const DiffusionSchedule& s) {
  x0.require_same_shape(eps, "forward_sample");
  const int c = x0.dim(0), n = x0.dim(1);
  if (static_cast<int>(t.size()) != n) throw std::invalid_argument("forward_sample: one timestep per sample required");
  const std::size_t plane = static_cast<std::size_t>(x0.dim(2)) * x0.dim(3);
  Tensor<T> out(x0.shape());
  for (int k = 0; k < c; ++k)
    for (int i = 0; i < n; ++i) {
      const std::size_t off = (static_cast<std::size_t>(k) * n + i) * plane;
      forward_sample<T>({x0.data() + off, plane}, t[static_cast<std::size_t>(i)], {eps.data() + off, plane}, s,
                        {out.data() + off, plane});
    }
  return out;
}

/// eps_hat = eps_cond + w (eps_cond - eps_uncond).
template <typename T>
Tensor<T> guided_noise(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double w) {
  eps_cond.require_same_shape(eps_uncond, "guided_noise");
  Tensor<T> out(eps_cond.shape());
  const T wt = static_cast<T>(w);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = eps_cond[i] + wt * (eps_cond[i] - eps_uncond[i]);
  return out;
}

/// Posterior mean of x_{t-1}; the whole tensor shares timestep t.
template <typename T>
Tensor<T> reverse_mean(const Tensor<T>& x_t, int t, const Tensor<T>& eps_hat, const DiffusionSchedule& s) {
  x_t.require_same_shape(eps_hat, "reverse_step");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha_at(t));
  const double coef = s.beta_at(t) / std::sqrt(1.0 - s.alpha_bar_at(t));
  Tensor<T> mu(x_t.shape());
  for (std::size_t i = 0; i < mu.numel(); ++i) mu[i] = static_cast<T>(inv_sqrt_alpha * (x_t[i] - coef * eps_hat[i]));
  return mu;
}

/// x_{t-1} = mu + sigma_t z; at t = 1 the mean is returned without noise.
/// Noise is drawn element by element in storage order from rng.
template <typename T, typename Rng>
Tensor<T> reverse_step(const Tensor<T>& x_t, int t, const Tensor<T>& eps_hat, const DiffusionSchedule& s, Rng& rng) {
  Tensor<T> mu = reverse_mean(x_t, t, eps_hat, s);
  if (t == 1) return mu;
  const double sigma = std::sqrt(s.posterior_variance(t));
  std::normal_distribution<double> z;
  for (auto& v : mu.values()) v = static_cast<T>(v + sigma * z(rng));
  return mu;
}

// ---------------------------------------------------------------------------
// Training objective

/// How the squared spectral error is reduced over the 201 frequency points.
/// With sum, lambda_spec = 5 outweighs the noise-prediction terms so heavily
/// that the denoiser stops learning the noise; mean keeps both in play.
enum class SpectralReduction { mean, sum };

inline std::string to_string(SpectralReduction r) { return r == SpectralReduction::mean ? "mean" : "sum"; }
inline SpectralReduction spectral_reduction_from_string(const std::string& s) {
  if (s == "mean") return SpectralReduction::mean;
  if (s == "sum") return SpectralReduction::sum;
  throw std::invalid_argument("unknown spectral reduction '" + s + "' (expected mean or sum)");
}

struct LossWeights {
  double w_R = 2.0;
  double w_G = 1.5;
  double w_B = 1.5;
  double lambda_spec = 5.0;
  double cfg_dropout = 0.1;
  double guidance_w = 5.0;
  SpectralReduction spectral_reduction = SpectralReduction::mean;

  void validate() const {
    if (w_R < 0 || w_G < 0 || w_B < 0 || lambda_spec < 0 || guidance_w < 0)
      throw std::invalid_argument("LossWeights: weights must be nonnegative");
    // 1 is accepted so the unconditional branch can be trained in isolation.
    if (!(cfg_dropout >= 0.0 && cfg_dropout <= 1.0))
      throw std::invalid_argument("LossWeights: cfg_dropout must lie in [0, 1]");
  }
};

struct LossParts {
  double total = 0, r = 0, g = 0, b = 0, spec = 0;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A training batch: x0 in [-1, 1] as {3, N, H, W}, the conditioning spectra
/// and standardized materials as {N, 201} and {N, 3}.
template <typename T>
struct TrainBatch {
  Tensor<T> x0;
  Tensor<T> spectra;
  Tensor<T> materials;
  int size() const { return x0.dim(1); }
};

/// The random quantities of one training step.
template <typename T>
struct StepNoise {
  std::vector<int> t;
  Tensor<T> eps;
  std::vector<std::uint8_t> null_mask;
};

template <typename T, typename Rng>
StepNoise<T> draw_step_noise(const std::vector<int>& x_shape, const DiffusionSchedule& s, double cfg_dropout, Rng& rng) {
  const int n = x_shape.at(1);
  StepNoise<T> d{std::vector<int>(static_cast<std::size_t>(n)), Tensor<T>(x_shape),
                 std::vector<std::uint8_t>(static_cast<std::size_t>(n))};
  std::uniform_int_distribution<int> ut(1, s.T);
  std::bernoulli_distribution drop(cfg_dropout);
  for (int i = 0; i < n; ++i) {
    d.t[static_cast<std::size_t>(i)] = ut(rng);
    d.null_mask[static_cast<std::size_t>(i)] = drop(rng) ? 1 : 0;
  }
  std::normal_distribution<double> z;
  for (auto& v : d.eps.values()) v = static_cast<T>(z(rng));
  return d;
}

/// Evaluates the weighted loss for fixed (t, eps, null mask) and, when
/// accumulate is set, backpropagates it into the denoiser parameters. The
/// surrogate (may be null when lambda_spec = 0) must be frozen: gradients pass
/// through it to the denoiser but never into its parameters.
template <typename T, typename Net, typename Sur>
LossParts training_loss(Net& net, Sur* surrogate, const TrainBatch<T>& batch, const StepNoise<T>& noise,
                        const LossWeights& w, const DiffusionSchedule& s, bool accumulate = true) {
  const Tensor<T>& x0 = batch.x0;
  const int channels = x0.dim(0), n = x0.dim(1);
  if (channels < 1 || channels > 3) throw std::invalid_argument("training_loss: expected 1 to 3 image channels");
  const bool use_spec = w.lambda_spec > 0.0;
  if (use_spec && surrogate == nullptr) throw std::invalid_argument("training_loss: lambda_spec > 0 needs a surrogate");
  if (use_spec && !surrogate->frozen()) throw std::logic_error("training_loss: surrogate must be frozen");

  const Tensor<T> x_t = forward_sample(x0, noise.t, noise.eps, s);
  nn::ConditionBatch<T> cond{batch.spectra, batch.materials, noise.null_mask};
  const Tensor<T> eps_pred = net.forward(x_t, noise.t, cond);

  const std::size_t plane = static_cast<std::size_t>(x0.dim(2)) * x0.dim(3);
  const std::size_t per_channel = plane * static_cast<std::size_t>(n);
  const double cw[3] = {w.w_R, w.w_G, w.w_B};
  double mse[3] = {0, 0, 0};
  Tensor<T> grad(x0.shape());
  for (int k = 0; k < channels; ++k) {
    const std::size_t off = static_cast<std::size_t>(k) * per_channel;
    double acc = 0;
    for (std::size_t i = 0; i < per_channel; ++i) {
      const double d = static_cast<double>(eps_pred[off + i]) - noise.eps[off + i];
      acc += d * d;
      grad[off + i] = static_cast<T>(2.0 * cw[k] * d / per_channel);
    }
    mse[k] = acc / per_channel;
  }

  LossParts parts{0, mse[0], mse[1], mse[2], 0};
  Tensor<T> x0_hat, unclamped;
  if (use_spec) {
    // One-step estimate x0_hat = clamp((x_t - sqrt(1-abar) eps_pred) / sqrt(abar), -1, 1) mapped to [0, 1].
    x0_hat = Tensor<T>(x0.shape());
    unclamped = Tensor<T>(x0.shape());
    for (int k = 0; k < channels; ++k)
      for (int i = 0; i < n; ++i) {
        const double ab = s.alpha_bar_at(noise.t[static_cast<std::size_t>(i)]);
        const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
        const std::size_t off = (static_cast<std::size_t>(k) * n + i) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          const double u = (x_t[off + p] - sb * eps_pred[off + p]) / sa;
          unclamped[off + p] = static_cast<T>(u);
          x0_hat[off + p] = static_cast<T>(0.5 * (std::clamp(u, -1.0, 1.0) + 1.0));
        }
      }
    const Tensor<T> pred = surrogate->forward(x0_hat, batch.materials);
    Tensor<T> gpred(pred.shape());
    const double per_row = w.spectral_reduction == SpectralReduction::mean ? 1.0 / pred.dim(1) : 1.0;
    double sse = 0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
      const double d = static_cast<double>(pred[i]) - batch.spectra[i];
      sse += d * d;
      gpred[i] = static_cast<T>(w.lambda_spec * 2.0 * d * per_row / n);
    }
    parts.spec = sse * per_row / n;
    parts.total = w.w_R * mse[0] + w.w_G * mse[1] + w.w_B * mse[2] + w.lambda_spec * parts.spec;
    if (!std::isfinite(parts.total)) throw NonFiniteError("non-finite training loss");
    if (accumulate) {
      const Tensor<T> gimg = surrogate->backward(gpred);
      for (int k = 0; k < channels; ++k)
        for (int i = 0; i < n; ++i) {
          const double ab = s.alpha_bar_at(noise.t[static_cast<std::size_t>(i)]);
          const double chain = -0.5 * std::sqrt(1.0 - ab) / std::sqrt(ab);
          const std::size_t off = (static_cast<std::size_t>(k) * n + i) * plane;
          for (std::size_t p = 0; p < plane; ++p) {
            const double u = unclamped[off + p];
            if (u > -1.0 && u < 1.0) grad[off + p] += static_cast<T>(chain * gimg[off + p]);
          }
        }
    }
  } else {
    parts.total = w.w_R * mse[0] + w.w_G * mse[1] + w.w_B * mse[2];
    if (!std::isfinite(parts.total)) throw NonFiniteError("non-finite training loss");
  }
  if (accumulate) net.backward(grad, /*need_input_grad=*/false);
  return parts;
}

// ---------------------------------------------------------------------------
// Sampling

/// Classifier-free guided ancestral sampling of one image per condition row.
/// Row i uses its own generator seeded by seeds[i], so a design depends only
/// on (seed, condition) and not on how jobs are batched. Returns {3, N, H, W}
/// in [0, 1].
template <typename T>
Tensor<T> sample_images(nn::Denoiser<T>& net, const Tensor<T>& spectra, const Tensor<T>& materials,
                        const DiffusionSchedule& s, double guidance_w, std::span<const std::uint64_t> seeds) {
  const int n = static_cast<int>(seeds.size());
  if (spectra.dim(0) != n || materials.dim(0) != n) throw std::invalid_argument("sample_images: one seed per condition");
  const int size = net.config().image_size, channels = net.config().image_channels;
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  std::vector<std::mt19937_64> rngs;
  for (auto sd : seeds) rngs.emplace_back(sd);

  // Per-row noise in (channel, row, col) order, scattered into the channel-major batch.
  auto draw = [&](Tensor<T>& x, double scale) {
    std::normal_distribution<double> z;
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < channels; ++k) {
        T* dst = x.data() + (static_cast<std::size_t>(k) * n + i) * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] += static_cast<T>(scale * z(rngs[static_cast<std::size_t>(i)]));
      }
  };

  // Conditional rows first, then null rows, in one batched evaluation.
  nn::ConditionBatch<T> cond;
  cond.spectra = Tensor<T>({2 * n, nn::kSpectrumLength});
  cond.materials = Tensor<T>({2 * n, nn::kMaterialFeatures});
  std::copy(spectra.values().begin(), spectra.values().end(), cond.spectra.data());
  std::copy(materials.values().begin(), materials.values().end(), cond.materials.data());
  cond.is_null.assign(static_cast<std::size_t>(2 * n), 0);
  std::fill(cond.is_null.begin() + n, cond.is_null.end(), 1);

  Tensor<T> x({channels, n, size, size});
  draw(x, 1.0);
  std::vector<int> tt(static_cast<std::size_t>(2 * n));
  for (int t = s.T; t >= 1; --t) {
    std::fill(tt.begin(), tt.end(), t);
    Tensor<T> both({channels, 2 * n, size, size});
    for (int k = 0; k < channels; ++k) {
      const T* src = x.data() + static_cast<std::size_t>(k) * n * plane;
      std::copy_n(src, n * plane, both.data() + static_cast<std::size_t>(k) * 2 * n * plane);
      std::copy_n(src, n * plane, both.data() + (static_cast<std::size_t>(k) * 2 * n + n) * plane);
    }
    const Tensor<T> out = net.forward(both, tt, cond);
    Tensor<T> ec(x.shape()), eu(x.shape());
    for (int k = 0; k < channels; ++k) {
      const T* src = out.data() + static_cast<std::size_t>(k) * 2 * n * plane;
      std::copy_n(src, n * plane, ec.data() + static_cast<std::size_t>(k) * n * plane);
      std::copy_n(src + n * plane, n * plane, eu.data() + static_cast<std::size_t>(k) * n * plane);
    }
    x = reverse_mean(x, t, guided_noise(ec, eu, guidance_w), s);
    if (t > 1) draw(x, std::sqrt(s.posterior_variance(t)));
    for (auto v : x.values())
      if (!std::isfinite(static_cast<double>(v)))
        throw NonFiniteError("non-finite sampler state at step t=" + std::to_string(t));
  }
  for (auto& v : x.values()) v = static_cast<T>(0.5 * (std::clamp(static_cast<double>(v), -1.0, 1.0) + 1.0));
  return x;
}

/// Extracts sample i of a {3, N, H, W} batch in [0, 1] as an EncodedImage.
template <typename T>
EncodedImage to_encoded_image(const Tensor<T>& batch, int i) {
  const int c = batch.dim(0), n = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  EncodedImage img(h, w);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int k = 0; k < c; ++k)
    for (std::size_t p = 0; p < plane; ++p)
      img.data[static_cast<std::size_t>(k) * plane + p] =
          static_cast<float>(batch[(static_cast<std::size_t>(k) * n + i) * plane + p]);
  return img;
}

/// Writes images into a {3, N, H, W} batch mapped to [-1, 1].
template <typename T>
Tensor<T> images_to_batch(const std::vector<const EncodedImage*>& images) {
  const int n = static_cast<int>(images.size());
  const int h = images.at(0)->height, w = images.at(0)->width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<T> x({EncodedImage::kChannels, n, h, w});
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < EncodedImage::kChannels; ++k)
      for (std::size_t p = 0; p < plane; ++p)
        x[(static_cast<std::size_t>(k) * n + i) * plane + p] =
            static_cast<T>(2.0 * images[static_cast<std::size_t>(i)]->data[static_cast<std::size_t>(k) * plane + p] - 1.0);
  return x;
}

/// Single-design convenience wrapper around sample_images.
template <typename T>
EncodedImage sample_design(nn::Denoiser<T>& net, const Tensor<T>& spectrum, const Tensor<T>& material,
                           const DiffusionSchedule& s, double guidance_w, std::uint64_t seed) {
  const std::uint64_t seeds[1] = {seed};
  return to_encoded_image(sample_images(net, spectrum, material, s, guidance_w, seeds), 0);
}

}  // namespace metadiff
