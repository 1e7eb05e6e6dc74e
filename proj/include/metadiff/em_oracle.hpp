#pragma once

// Analytic reflection model for a patterned sheet on a metal-backed dielectric.
// The patterned layer is a lumped series RLC shunt whose element values follow
// from simple mask statistics; the substrate is a shorted transmission line.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metadiff/codec.hpp"

namespace metadiff {

using cdouble = std::complex<double>;

inline constexpr double kFreeSpaceImpedance = 376.730;  // Ohm
inline constexpr double kSpeedOfLight = 299792458.0;    // m/s
inline constexpr int kSpectrumPoints = 201;
inline constexpr double kFreqStartGHz = 2.0;
inline constexpr double kFreqStopGHz = 18.0;
inline constexpr double kFreqStepGHz = (kFreqStopGHz - kFreqStartGHz) / (kSpectrumPoints - 1);

inline constexpr double frequency_ghz(int i) { return kFreqStartGHz + kFreqStepGHz * i; }

struct Material {
  std::string name;
  double eps_r = 1.0;
  double tan_delta = 0.0;
  double thickness_mm = 1.0;

  void validate() const {
    if (!(eps_r >= 1.0)) throw std::invalid_argument("Material '" + name + "': eps_r must be >= 1");
    if (!(tan_delta >= 0.0)) throw std::invalid_argument("Material '" + name + "': tan_delta must be >= 0");
    if (!(thickness_mm > 0.0)) throw std::invalid_argument("Material '" + name + "': thickness must be > 0");
  }
  bool operator==(const Material&) const = default;
};

/// Linear |S11| on the 201-point 2-18 GHz grid.
struct Spectrum {
  std::array<double, kSpectrumPoints> values{};

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  static constexpr std::size_t size() { return kSpectrumPoints; }
  bool operator==(const Spectrum&) const = default;

  static Spectrum constant(double v) {
    Spectrum s;
    s.values.fill(v);
    return s;
  }

  static Spectrum from(std::span<const double> v) {
    if (v.size() != kSpectrumPoints)
      throw std::invalid_argument("Spectrum: expected 201 values, got " + std::to_string(v.size()));
    Spectrum s;
    std::copy(v.begin(), v.end(), s.values.begin());
    return s;
  }

  void validate() const {
    for (double v : values)
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("Spectrum: value outside [0,1]");
  }
};

struct PatternFeatures {
  double fill = 0.0;
  double edge_density = 0.0;
  int components = 0;  // 8-connected, capped at kMaxComponents
  static constexpr int kMaxComponents = 8;
};

/// Pattern pixel with at least one 4-neighbour inside the grid that is empty.
inline bool is_edge_pixel(const Mask& m, int r, int c) {
  if (!m(r, c)) return false;
  constexpr int dr[4] = {-1, 1, 0, 0};
  constexpr int dc[4] = {0, 0, -1, 1};
  for (int k = 0; k < 4; ++k) {
    const int rr = r + dr[k], cc = c + dc[k];
    if (m.in_bounds(rr, cc) && !m(rr, cc)) return true;
  }
  return false;
}

inline int count_components(const Mask& m) {
  std::vector<std::uint8_t> seen(m.size(), 0);
  std::vector<std::pair<int, int>> stack;
  int n = 0;
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) {
      if (!m(r, c) || seen[r * m.cols() + c]) continue;
      ++n;
      stack.assign(1, {r, c});
      seen[r * m.cols() + c] = 1;
      while (!stack.empty()) {
        auto [pr, pc] = stack.back();
        stack.pop_back();
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const int rr = pr + dr, cc = pc + dc;
            if (!m.at_or_empty(rr, cc) || seen[rr * m.cols() + cc]) continue;
            seen[rr * m.cols() + cc] = 1;
            stack.emplace_back(rr, cc);
          }
      }
    }
  return n;
}

inline PatternFeatures pattern_features(const MetaAtom& atom) {
  const Mask& m = atom.pattern;
  const double cells = static_cast<double>(m.size());
  PatternFeatures f;
  f.fill = static_cast<double>(m.count()) / cells;
  int edges = 0;
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) edges += is_edge_pixel(m, r, c);
  f.edge_density = edges / cells;
  f.components = std::min(count_components(m), PatternFeatures::kMaxComponents);
  return f;
}

// Lumped-element constants of the patterned sheet.
inline constexpr double kBaseInductance = 1.0e-9;     // H
inline constexpr double kBaseCapacitance = 0.08e-12;  // F
inline constexpr double kFillFloor = 0.05;
inline constexpr double kMetalResistanceFloor = 0.01;  // Ohm
inline constexpr double kContinuousFill = 0.999;
inline constexpr double kCoverThicknessRatio = 0.2;

inline void check_frequency(double f_ghz) {
  if (!(f_ghz >= kFreqStartGHz - 1e-9 && f_ghz <= kFreqStopGHz + 1e-9))
    throw std::invalid_argument("frequency " + std::to_string(f_ghz) + " GHz outside [2,18]");
}

/// Series impedance of the patterned sheet; nullopt when there is no pattern (open circuit).
inline std::optional<cdouble> sheet_impedance(const PatternFeatures& feat, double sheet_resistance, double f_ghz) {
  check_frequency(f_ghz);
  if (!(sheet_resistance >= 0.0)) throw std::invalid_argument("sheet_impedance: negative sheet resistance");
  if (feat.fill <= 0.0) return std::nullopt;
  const double rs = std::max(sheet_resistance, kMetalResistanceFloor);
  if (feat.fill >= kContinuousFill) return cdouble(rs, 0.0);
  const double r_eff = rs / (feat.fill + kFillFloor);
  const double l_eff = kBaseInductance * (0.3 + 1.4 * (1.0 - feat.fill));
  const double c_eff = kBaseCapacitance * (0.3 + 6.0 * feat.fill * (1.0 - feat.fill) + 2.0 * feat.edge_density);
  const double w = 2.0 * std::numbers::pi * f_ghz * 1e9;
  return cdouble(r_eff, w * l_eff - 1.0 / (w * c_eff));
}

struct LineSection {
  cdouble impedance;  // characteristic impedance Z_d
  cdouble gamma;      // propagation constant (1/m)
};

inline LineSection dielectric_line(const Material& mat, double f_ghz) {
  const cdouble eps = mat.eps_r * cdouble(1.0, -mat.tan_delta);
  const cdouble root = std::sqrt(eps);
  return {kFreeSpaceImpedance / root, cdouble(0.0, 2.0 * std::numbers::pi * f_ghz * 1e9 / kSpeedOfLight) * root};
}

/// Input impedance of the metal-backed substrate: Z_d tanh(gamma t).
inline cdouble grounded_slab_impedance(const Material& mat, double f_ghz) {
  mat.validate();
  check_frequency(f_ghz);
  const LineSection line = dielectric_line(mat, f_ghz);
  return line.impedance * std::tanh(line.gamma * (mat.thickness_mm * 1e-3));
}

inline cdouble input_impedance(const MetaAtom& atom, const PatternFeatures& feat, const Material& mat, double f_ghz) {
  const cdouble z_slab = grounded_slab_impedance(mat, f_ghz);
  const auto z_sheet = sheet_impedance(feat, atom.sheet_resistance, f_ghz);
  const cdouble z_p = z_sheet ? (*z_sheet * z_slab) / (*z_sheet + z_slab) : z_slab;
  if (atom.layers == LayerConfig::single) return z_p;
  const LineSection line = dielectric_line(mat, f_ghz);
  const cdouble th = std::tanh(line.gamma * (kCoverThicknessRatio * mat.thickness_mm * 1e-3));
  return line.impedance * (z_p + line.impedance * th) / (line.impedance + z_p * th);
}

inline Spectrum reflection_spectrum(const MetaAtom& atom, const Material& mat) {
  atom.validate(atom.pattern.rows());
  mat.validate();
  const PatternFeatures feat = pattern_features(atom);
  Spectrum s;
  for (int i = 0; i < kSpectrumPoints; ++i) {
    const cdouble z = input_impedance(atom, feat, mat, frequency_ghz(i));
    const cdouble gamma = (z - kFreeSpaceImpedance) / (z + kFreeSpaceImpedance);
    s[static_cast<std::size_t>(i)] = std::clamp(std::abs(gamma), 0.0, 1.0);
  }
  return s;
}

/// Absorbed power fraction with a metal ground plane (no transmission).
inline std::array<double, kSpectrumPoints> absorption(const Spectrum& s) {
  std::array<double, kSpectrumPoints> a{};
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = 1.0 - s[i] * s[i];
  return a;
}

}  // namespace metadiff
