#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metadiff/codec.hpp"
#include "metadiff/dataset.hpp"
#include "metadiff/em_oracle.hpp"

namespace metadiff {

/// Grid indices where |S11| <= 10^(-1/2), ascending.
using BandSet = std::vector<int>;

inline BandSet band_set(const Spectrum& s) {
  BandSet b;
  for (int i = 0; i < kSpectrumPoints; ++i)
    if (s[i] <= kAbsorbingThreshold) b.push_back(i);
  return b;
}

struct SpectrumPair {
  Spectrum generated;
  Spectrum target;
};

struct PairMetric {
  std::vector<double> per_pair;
  double mean = 0.0;
};

namespace detail {
template <typename F>
PairMetric over_pairs(const std::vector<SpectrumPair>& pairs, F&& f) {
  PairMetric m;
  for (const auto& p : pairs) m.per_pair.push_back(f(p.generated, p.target));
  double sum = 0;
  for (double v : m.per_pair) sum += v;
  m.mean = pairs.empty() ? 0.0 : sum / static_cast<double>(pairs.size());
  return m;
}
}  // namespace detail

inline double spectral_mse(const Spectrum& gen, const Spectrum& target) {
  double s = 0;
  for (int i = 0; i < kSpectrumPoints; ++i) s += (gen[i] - target[i]) * (gen[i] - target[i]);
  return s / kSpectrumPoints;
}

inline double aae(const Spectrum& gen, const Spectrum& target) {
  double s = 0;
  for (int i = 0; i < kSpectrumPoints; ++i) s += std::abs(gen[i] - target[i]);
  return s / kSpectrumPoints;
}

inline PairMetric spectral_mse(const std::vector<SpectrumPair>& pairs) {
  return detail::over_pairs(pairs, [](const Spectrum& g, const Spectrum& t) { return spectral_mse(g, t); });
}
inline PairMetric aae(const std::vector<SpectrumPair>& pairs) {
  return detail::over_pairs(pairs, [](const Spectrum& g, const Spectrum& t) { return aae(g, t); });
}

enum class BaaVariant { normalized, literal };

/// Band alignment from band sets. normalized = I^2 / (|Bt| |Bg|), literal =
/// I^2 / |Bt|. Both empty scores 1, exactly one empty scores 0.
inline double baa(const BandSet& target, const BandSet& gen, BaaVariant variant = BaaVariant::normalized) {
  if (target.empty() && gen.empty()) return 1.0;
  if (target.empty() || gen.empty()) return 0.0;
  std::vector<int> inter;
  std::set_intersection(target.begin(), target.end(), gen.begin(), gen.end(), std::back_inserter(inter));
  const double i = static_cast<double>(inter.size());
  if (variant == BaaVariant::literal) return i * i / static_cast<double>(target.size());
  return i * i / (static_cast<double>(target.size()) * static_cast<double>(gen.size()));
}

inline double baa(const Spectrum& target, const Spectrum& gen, BaaVariant variant = BaaVariant::normalized) {
  return baa(band_set(target), band_set(gen), variant);
}

inline PairMetric baa(const std::vector<SpectrumPair>& pairs, BaaVariant variant = BaaVariant::normalized) {
  return detail::over_pairs(pairs, [variant](const Spectrum& g, const Spectrum& t) { return baa(t, g, variant); });
}

inline constexpr double kValidBaaThreshold = 0.8;

/// Fraction of pairs whose normalized BAA exceeds 0.8.
inline double valid_fraction(const std::vector<SpectrumPair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("valid_fraction: no pairs");
  std::size_t ok = 0;
  for (const auto& p : pairs)
    if (baa(p.target, p.generated) > kValidBaaThreshold) ++ok;
  return static_cast<double>(ok) / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Structural diversity

struct DiversityConfig {
  double lambda_mix = 0.5;
  int delta_px = 2;
  double eps_stab = 1e-8;

  void validate() const {
    if (!(lambda_mix >= 0.0 && lambda_mix <= 1.0)) throw std::invalid_argument("diversity: lambda_mix must be in [0,1]");
    if (delta_px < 0) throw std::invalid_argument("diversity: delta_px must be >= 0");
    if (!(eps_stab > 0.0)) throw std::invalid_argument("diversity: eps_stab must be positive");
  }
};

/// Pattern pixels within Chebyshev distance delta of an edge pixel.
inline Mask boundary_band(const Mask& m, int delta) {
  const int h = m.rows(), w = m.cols();
  Mask edge(h, w), band(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (m(r, c) && is_edge_pixel(m, r, c)) edge.set(r, c, true);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (!edge(r, c)) continue;
      for (int dr = -delta; dr <= delta; ++dr)
        for (int dc = -delta; dc <= delta; ++dc)
          if (m.in_bounds(r + dr, c + dc) && m(r + dr, c + dc)) band.set(r + dr, c + dc, true);
    }
  return band;
}

namespace detail {
inline double jaccard_distance(const Mask& a, const Mask& b, double eps) {
  std::size_t inter = 0, uni = 0;
  const auto& x = a.bits();
  const auto& y = b.bits();
  for (std::size_t i = 0; i < x.size(); ++i) {
    inter += (x[i] && y[i]) ? 1 : 0;
    uni += (x[i] || y[i]) ? 1 : 0;
  }
  if (uni == 0) return 0.0;
  return 1.0 - static_cast<double>(inter) / (static_cast<double>(uni) + eps);
}
}  // namespace detail

/// Mean over unordered pairs of lambda d1 + (1 - lambda) d2, where d1 is the
/// Jaccard distance of the masks and d2 that of their boundary bands.
inline double diversity(const std::vector<Mask>& masks, const DiversityConfig& cfg = {}) {
  cfg.validate();
  const std::size_t n = masks.size();
  if (n < 2) throw std::invalid_argument("diversity: need at least 2 masks");
  std::vector<Mask> bands;
  for (const auto& m : masks) {
    if (m.rows() != masks[0].rows() || m.cols() != masks[0].cols()) throw std::invalid_argument("diversity: mask size mismatch");
    bands.push_back(boundary_band(m, cfg.delta_px));
  }
  double total = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d1 = detail::jaccard_distance(masks[i], masks[j], cfg.eps_stab);
      const double d2 = detail::jaccard_distance(bands[i], bands[j], cfg.eps_stab);
      total += cfg.lambda_mix * d1 + (1.0 - cfg.lambda_mix) * d2;
    }
  return 2.0 * total / (static_cast<double>(n) * static_cast<double>(n - 1));
}

/// Mean pairwise spectral MSE within a group of spectra.
inline double mean_pairwise_mse(const std::vector<Spectrum>& spectra) {
  if (spectra.size() < 2) throw std::invalid_argument("mean_pairwise_mse: need at least 2 spectra");
  double s = 0;
  std::size_t k = 0;
  for (std::size_t i = 0; i < spectra.size(); ++i)
    for (std::size_t j = i + 1; j < spectra.size(); ++j, ++k) s += spectral_mse(spectra[i], spectra[j]);
  return s / static_cast<double>(k);
}

struct EvaluationReport {
  double mse = 0, aae = 0, baa_normalized = 0, baa_literal = 0, valid_fraction = 0;
  double diversity = 0;
  bool has_diversity = false;
  std::size_t n_pairs = 0;
};

inline EvaluationReport evaluate_pairs(const std::vector<SpectrumPair>& pairs, const std::vector<Mask>& masks,
                                       const DiversityConfig& cfg = {}) {
  EvaluationReport r;
  r.n_pairs = pairs.size();
  r.mse = spectral_mse(pairs).mean;
  r.aae = aae(pairs).mean;
  r.baa_normalized = baa(pairs, BaaVariant::normalized).mean;
  r.baa_literal = baa(pairs, BaaVariant::literal).mean;
  r.valid_fraction = valid_fraction(pairs);
  if (masks.size() >= 2) {
    r.diversity = diversity(masks, cfg);
    r.has_diversity = true;
  }
  return r;
}

inline nlohmann::json to_json(const EvaluationReport& r, const DiversityConfig& cfg) {
  nlohmann::json j{{"mse", r.mse},
                   {"aae", r.aae},
                   {"baa_normalized", r.baa_normalized},
                   {"baa_literal", r.baa_literal},
                   {"valid_fraction", r.valid_fraction},
                   {"diversity", r.has_diversity ? nlohmann::json(r.diversity) : nlohmann::json(nullptr)},
                   {"n_pairs", r.n_pairs},
                   {"config",
                    {{"lambda_mix", cfg.lambda_mix},
                     {"delta_px", cfg.delta_px},
                     {"eps_stab", cfg.eps_stab},
                     {"band_threshold", kAbsorbingThreshold},
                     {"valid_baa_threshold", kValidBaaThreshold}}}};
  return j;
}

}  // namespace metadiff
