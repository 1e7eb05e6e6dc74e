#include <gtest/gtest.h>

#include <complex>
#include <filesystem>
#include <numbers>
#include <random>

#include "metadiff/em_oracle.hpp"
#include "metadiff/materials.hpp"
#include "metadiff/spectrum_io.hpp"

using namespace metadiff;
using cd = std::complex<double>;

namespace {

constexpr double kPi = std::numbers::pi;

Material lossless(double eps_r, double thickness_mm) { return {"test", eps_r, 0.0, thickness_mm}; }

MetaAtom with_pattern(const Mask& m) {
  MetaAtom a;
  a.pattern = m;
  return a;
}

Mask plus_sign() {
  Mask m(32, 32);
  for (int d = -1; d <= 1; ++d) {
    m.set(16 + d, 16);
    m.set(16, 16 + d);
  }
  // Arms of length 2 from the centre.
  m.set(14, 16);
  m.set(18, 16);
  m.set(16, 14);
  m.set(16, 18);
  return m;
}

Mask cross_mask() {
  Mask m(32, 32);
  for (int i = 6; i < 26; ++i)
    for (int w = 15; w < 17; ++w) {
      m.set(i, w);
      m.set(w, i);
    }
  return m;
}

// Second implementation of the oracle, written from the closed-form description.
std::vector<double> reference_spectrum(const MetaAtom& a, const Material& mat) {
  const Mask& m = a.pattern;
  const double cells = 1024.0;
  int filled = 0, edges = 0;
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) {
      if (!m(r, c)) continue;
      ++filled;
      bool edge = false;
      if (r > 0 && !m(r - 1, c)) edge = true;
      if (r < 31 && !m(r + 1, c)) edge = true;
      if (c > 0 && !m(r, c - 1)) edge = true;
      if (c < 31 && !m(r, c + 1)) edge = true;
      edges += edge;
    }
  const double fill = filled / cells, ed = edges / cells;
  std::vector<double> out;
  for (int i = 0; i <= 200; ++i) {
    const double f = (2.0 + 16.0 * i / 200.0) * 1e9;
    const double w = 2 * kPi * f;
    const cd eps = cd(mat.eps_r, -mat.eps_r * mat.tan_delta);
    const cd n = std::sqrt(eps);
    const cd zd = 376.730 / n;
    const cd g = cd(0, w / 299792458.0) * n;
    auto tanh_ = [](cd x) { return (std::exp(x) - std::exp(-x)) / (std::exp(x) + std::exp(-x)); };
    const cd zslab = zd * tanh_(g * mat.thickness_mm * 1e-3);
    cd zp = zslab;
    if (fill > 0) {
      const double rs = std::max(a.sheet_resistance, 0.01);
      cd zs;
      if (fill >= 0.999) {
        zs = rs;
      } else {
        const double L = 1e-9 * (0.3 + 1.4 * (1 - fill));
        const double C = 0.08e-12 * (0.3 + 6.0 * fill * (1 - fill) + 2.0 * ed);
        zs = cd(rs / (fill + 0.05), w * L - 1.0 / (w * C));
      }
      zp = 1.0 / (1.0 / zs + 1.0 / zslab);
    }
    cd ztop = zp;
    if (a.layers == LayerConfig::dual) {
      const cd t = tanh_(g * 0.2 * mat.thickness_mm * 1e-3);
      ztop = zd * (zp + zd * t) / (zd + zp * t);
    }
    out.push_back(std::min(1.0, std::abs((ztop - 376.730) / (ztop + 376.730))));
  }
  return out;
}

}  // namespace

TEST(Grid, EndpointsAndSpacing) {
  EXPECT_DOUBLE_EQ(frequency_ghz(0), 2.0);
  EXPECT_NEAR(frequency_ghz(200), 18.0, 1e-12);
  EXPECT_NEAR(frequency_ghz(1) - frequency_ghz(0), 0.08, 1e-15);
  EXPECT_EQ(Spectrum::size(), 201u);
}

TEST(PatternFeatures, HandCases) {
  auto f = pattern_features(MetaAtom{});
  EXPECT_EQ(f.fill, 0.0);
  EXPECT_EQ(f.edge_density, 0.0);
  EXPECT_EQ(f.components, 0);

  Mask full(32, 32);
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) full.set(r, c);
  f = pattern_features(with_pattern(full));
  EXPECT_EQ(f.fill, 1.0);
  EXPECT_EQ(f.edge_density, 0.0);
  EXPECT_EQ(f.components, 1);

  Mask plus(32, 32);
  for (int d = -1; d <= 1; ++d) {
    plus.set(16 + d, 16);
    plus.set(16, 16 + d);
  }
  // 5-pixel plus: every pixel except the centre touches empty space.
  f = pattern_features(with_pattern(plus));
  EXPECT_DOUBLE_EQ(f.fill, 5.0 / 1024);
  EXPECT_DOUBLE_EQ(f.edge_density, 4.0 / 1024);
  EXPECT_EQ(f.components, 1);

  // 9-pixel plus with 2-pixel arms: the centre is the only interior pixel.
  f = pattern_features(with_pattern(plus_sign()));
  EXPECT_DOUBLE_EQ(f.fill, 9.0 / 1024);
  EXPECT_DOUBLE_EQ(f.edge_density, 8.0 / 1024);
  EXPECT_EQ(f.components, 1);
}

TEST(PatternFeatures, EightConnectivityAndCap) {
  Mask diag(32, 32);
  diag.set(0, 0);
  diag.set(1, 1);
  EXPECT_EQ(pattern_features(with_pattern(diag)).components, 1);
  Mask dots(32, 32);
  for (int k = 0; k < 12; ++k) dots.set(2 * k + 1, 3);
  EXPECT_EQ(count_components(dots), 12);
  EXPECT_EQ(pattern_features(with_pattern(dots)).components, 8);
}

TEST(SheetImpedance, Branches) {
  PatternFeatures full{1.0, 0.0, 1};
  for (double f : {2.0, 10.0, 18.0}) {
    const auto z = sheet_impedance(full, 376.73, f);
    ASSERT_TRUE(z.has_value());
    EXPECT_EQ(z->real(), 376.73);
    EXPECT_EQ(z->imag(), 0.0);
  }
  EXPECT_FALSE(sheet_impedance(PatternFeatures{}, 100.0, 10.0).has_value());
  PatternFeatures half{0.5, 0.1, 1};
  const auto z = *sheet_impedance(half, 100.0, 10.0);
  const double w = 2 * kPi * 10e9;
  const double L = 1e-9 * (0.3 + 1.4 * 0.5), C = 0.08e-12 * (0.3 + 6.0 * 0.25 + 0.2);
  EXPECT_NEAR(z.real(), 100.0 / 0.55, 1e-12);
  EXPECT_NEAR(z.imag(), w * L - 1 / (w * C), 1e-9);
  EXPECT_THROW(sheet_impedance(half, 100.0, 1.0), std::invalid_argument);
  EXPECT_THROW(sheet_impedance(half, 100.0, 19.0), std::invalid_argument);
  EXPECT_THROW(sheet_impedance(half, -1.0, 10.0), std::invalid_argument);
}

TEST(GroundedSlab, LimitsAndReferenceValue) {
  EXPECT_LT(std::abs(grounded_slab_impedance(lossless(3.0, 1e-9), 10.0)), 1e-4);
  const double f0 = 10.0, er = 2.2;
  const double quarter = 299792458.0 / (4 * f0 * 1e9 * std::sqrt(er)) * 1e3;
  EXPECT_GT(std::abs(grounded_slab_impedance(lossless(er, quarter), f0)), 1e10);

  const Material ro4835{"RO4835", 3.48, 0.0037, 1.524};
  const cd eps(3.48, -3.48 * 0.0037);
  const cd n = std::sqrt(eps);
  const cd arg = cd(0, 2 * kPi * 10e9 / 299792458.0) * n * 1.524e-3;
  const cd want = 376.730 / n * std::sinh(arg) / std::cosh(arg);
  const cd got = grounded_slab_impedance(ro4835, 10.0);
  EXPECT_NEAR(got.real(), want.real(), 1e-9);
  EXPECT_NEAR(got.imag(), want.imag(), 1e-9);
  EXPECT_THROW(grounded_slab_impedance(Material{"bad", 0.5, 0.0, 1.0}, 10.0), std::invalid_argument);
  EXPECT_THROW(grounded_slab_impedance(Material{"bad", 2.0, -0.1, 1.0}, 10.0), std::invalid_argument);
  EXPECT_THROW(grounded_slab_impedance(Material{"bad", 2.0, 0.0, 0.0}, 10.0), std::invalid_argument);
}

TEST(Reflection, LosslessEmptyPatternReflectsFully) {
  for (double t : {0.5, 1.524, 3.2, 5.0}) {
    const auto s = reflection_spectrum(MetaAtom{}, lossless(3.5, t));
    for (int i = 0; i < kSpectrumPoints; ++i) EXPECT_NEAR(s[i], 1.0, 1e-9) << "t=" << t << " i=" << i;
  }
  MetaAtom dual;
  dual.layers = LayerConfig::dual;
  const auto s = reflection_spectrum(dual, lossless(2.2, 3.0));
  for (int i = 0; i < kSpectrumPoints; ++i) EXPECT_NEAR(s[i], 1.0, 1e-9);
}

TEST(Reflection, SalisburyScreenNull) {
  const int i0 = 100;
  const double f0 = frequency_ghz(i0);
  const double er = 1.05;
  const double quarter_mm = 299792458.0 / (4 * f0 * 1e9 * std::sqrt(er)) * 1e3;
  MetaAtom sheet;
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) sheet.pattern.set(r, c);
  sheet.kind = PatternKind::resistive;
  sheet.sheet_resistance = 376.73 / 2;  // any valid value for validate(); replaced below
  // 376.73 exceeds the encodable maximum, so the atom is built without validation.
  const PatternFeatures feat = pattern_features(sheet);
  sheet.sheet_resistance = 376.73;
  const cd z = input_impedance(sheet, feat, lossless(er, quarter_mm), f0);
  const double gamma = std::abs((z - kFreeSpaceImpedance) / (z + kFreeSpaceImpedance));
  EXPECT_LE(gamma, 1e-6);
}

TEST(Reflection, MatchesIndependentImplementation) {
  const Material ro4835{"RO4835", 3.48, 0.0037, 1.524};
  MetaAtom cross = with_pattern(cross_mask());
  const auto s = reflection_spectrum(cross, ro4835);
  const auto ref = reference_spectrum(cross, ro4835);
  for (int i = 0; i < kSpectrumPoints; ++i) EXPECT_NEAR(s[i], ref[i], 1e-12) << i;

  std::mt19937_64 rng(3);
  const auto presets = default_material_presets();
  for (int k = 0; k < 20; ++k) {
    MetaAtom a;
    std::bernoulli_distribution on(0.4);
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c) a.pattern.set(r, c, on(rng));
    a.sheet_resistance = kAllowedSheetResistances[k % 5];
    a.kind = a.sheet_resistance == 0 ? PatternKind::metal : PatternKind::resistive;
    a.layers = k % 2 ? LayerConfig::dual : LayerConfig::single;
    const Material& m = presets[static_cast<std::size_t>(k) % presets.size()].material;
    const auto got = reflection_spectrum(a, m);
    const auto want = reference_spectrum(a, m);
    for (int i = 0; i < kSpectrumPoints; ++i) ASSERT_NEAR(got[i], want[i], 1e-12) << "case " << k << " i " << i;
  }
}

TEST(Reflection, DeterministicBoundedAndContinuous) {
  std::mt19937_64 rng(4);
  const auto presets = default_material_presets();
  for (int k = 0; k < 30; ++k) {
    MetaAtom a;
    std::bernoulli_distribution on(0.5);
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c) a.pattern.set(r, c, on(rng));
    const Material& m = presets[static_cast<std::size_t>(k) % presets.size()].material;
    const auto s1 = reflection_spectrum(a, m), s2 = reflection_spectrum(a, m);
    EXPECT_EQ(s1, s2);
    for (double v : s1.values) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    MetaAtom b = a;
    const int r = k % 32, c = (7 * k) % 32;
    b.pattern.set(r, c, !a.pattern(r, c));
    if (b.pattern.empty()) continue;
    const auto s3 = reflection_spectrum(b, m);
    double maxd = 0;
    for (int i = 0; i < kSpectrumPoints; ++i) maxd = std::max(maxd, std::abs(s3[i] - s1[i]));
    EXPECT_LT(maxd, 0.5);
  }
}

TEST(Reflection, ResonanceSweepCoversBand) {
  const Material m = default_material_presets()[1].material;
  double lo = 1e9, hi = -1e9;
  for (int k = 1; k <= 9; ++k) {
    PatternFeatures f{k / 10.0, 0.05, 1};
    double best = 2.0;
    int arg = 0;
    for (int i = 0; i < kSpectrumPoints; ++i) {
      const double fg = frequency_ghz(i);
      const cd zs = *sheet_impedance(f, 70.0, fg);
      const cd zl = grounded_slab_impedance(m, fg);
      const cd z = zs * zl / (zs + zl);
      const double g = std::abs((z - kFreeSpaceImpedance) / (z + kFreeSpaceImpedance));
      if (g < best) best = g, arg = i;
    }
    lo = std::min(lo, frequency_ghz(arg));
    hi = std::max(hi, frequency_ghz(arg));
  }
  EXPECT_GE(hi - lo, 6.0) << "minimum-|S11| frequencies span [" << lo << ", " << hi << "]";
}

TEST(Absorption, HandValues) {
  Spectrum s = Spectrum::constant(1.0);
  s[1] = 0.0;
  s[2] = std::pow(10.0, -0.5);
  const auto a = absorption(s);
  EXPECT_EQ(a[0], 0.0);
  EXPECT_EQ(a[1], 1.0);
  EXPECT_NEAR(a[2], 0.9, 1e-12);
}

TEST(SpectrumIo, Float32RoundTripAndErrors) {
  const auto dir = std::filesystem::temp_directory_path() / "metadiff_oracle_io";
  std::filesystem::create_directories(dir);
  std::vector<Spectrum> v{reflection_spectrum(with_pattern(cross_mask()), default_material_presets()[0].material),
                          Spectrum::constant(0.25)};
  write_spectra(dir / "s.bin", v);
  EXPECT_EQ(std::filesystem::file_size(dir / "s.bin"), 2u * 201 * 4);
  const auto back = read_spectra(dir / "s.bin");
  ASSERT_EQ(back.size(), 2u);
  for (int i = 0; i < kSpectrumPoints; ++i) EXPECT_EQ(back[0][i], static_cast<double>(static_cast<float>(v[0][i])));
  {
    std::ofstream bad(dir / "bad.bin", std::ios::binary);
    bad << "abc";
  }
  EXPECT_THROW(read_spectra(dir / "bad.bin"), std::runtime_error);
  EXPECT_THROW(read_spectra(dir / "missing.bin"), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(Materials, PresetsIncludeReferenceLaminatesAndRoundTrip) {
  const auto p = default_material_presets();
  const auto& ro = find_material(p, "RO4835");
  EXPECT_EQ(ro.eps_r, 3.48);
  EXPECT_EQ(ro.tan_delta, 0.0037);
  EXPECT_EQ(ro.thickness_mm, 1.524);
  for (const char* name : {"RT/Duroid 5880", "AD255C", "RO4533", "Kappa 438", "RO4360G2"})
    EXPECT_NO_THROW(find_material(p, name)) << name;
  const auto back = presets_from_json(presets_to_json(p));
  ASSERT_EQ(back.size(), p.size());
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(back[i].material, p[i].material);
  EXPECT_THROW(find_material(p, "unobtainium"), std::invalid_argument);
}
