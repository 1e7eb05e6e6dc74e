#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metadiff/codec.hpp"
#include "metadiff/em_oracle.hpp"
#include "metadiff/materials.hpp"
#include "metadiff/png_io.hpp"
#include "metadiff/spectrum_io.hpp"

namespace metadiff {

// ---------------------------------------------------------------------------
// Seeds

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(splitmix64(seed) ^ (index * 0xd1b54a32d192ed03ULL));
}

// ---------------------------------------------------------------------------
// Procedural meta-atom families

enum class Family { patch, ring, cross, split_ring, grid, concentric_squares, dipole_array, windmill };

inline constexpr std::array<Family, 8> kAllFamilies{Family::patch,        Family::ring,
                                                   Family::cross,        Family::split_ring,
                                                   Family::grid,         Family::concentric_squares,
                                                   Family::dipole_array, Family::windmill};

inline std::string to_string(Family f) {
  switch (f) {
    case Family::patch: return "patch";
    case Family::ring: return "ring";
    case Family::cross: return "cross";
    case Family::split_ring: return "split_ring";
    case Family::grid: return "grid";
    case Family::concentric_squares: return "concentric_squares";
    case Family::dipole_array: return "dipole_array";
    case Family::windmill: return "windmill";
  }
  return "?";
}

inline Family family_from_string(const std::string& s) {
  for (Family f : kAllFamilies)
    if (to_string(f) == s) return f;
  throw std::invalid_argument("unknown meta-atom family '" + s + "'");
}

/// Families whose masks are invariant under a 90 degree rotation.
inline bool is_four_fold_symmetric(Family f) {
  return f == Family::ring || f == Family::cross || f == Family::grid || f == Family::concentric_squares ||
         f == Family::windmill;
}

namespace detail {

// Parameter ranges below are in pixels of a 32x32 cell.
//   patch:              width, height in [6, 28], even, centred
//   ring:               outer half-size a in [6, 16], width in [2, 5]   (fill 0.078 .. 0.527)
//   cross:              arm half-length in [6, 16], arm width in {2, 4, 6, 8}
//   split_ring:         ring as above with one or two opposite gaps of width {2, 4}
//   grid:               period {8, 16}, line width [2, period/2]; wire mesh or patch array
//   concentric_squares: 2-3 nested rings of width 2-3 separated by gaps of 2-4
//   dipole_array:       1-3 parallel bars, length [10, 30], width [2, 4], gap >= 2
//   windmill:           four rotated L-shaped arms, arm length [6, 15], width [2, 4]
// All families draw sheet resistance uniformly from the allowed set and the
// layer flag with probability 1/2, then apply a random quarter-turn rotation.

class Painter {
 public:
  explicit Painter(int n) : mask_(n, n), n_(n) {}
  // Chebyshev ring index of a pixel: 0 for the central 2x2 block (even n).
  double cu(int r) const { return r - (n_ - 1) / 2.0; }
  double ring(int r, int c) const { return std::max(std::abs(cu(r)), std::abs(cu(c))) - 0.5; }
  void rect(int r0, int c0, int r1, int c1) {  // half-open
    for (int r = std::max(0, r0); r < std::min(n_, r1); ++r)
      for (int c = std::max(0, c0); c < std::min(n_, c1); ++c) mask_.set(r, c);
  }
  void square_ring(int outer, int width) {
    for (int r = 0; r < n_; ++r)
      for (int c = 0; c < n_; ++c) {
        const double q = ring(r, c);
        if (q <= outer - 1 && q >= outer - width) mask_.set(r, c);
      }
  }
  Mask& mask() { return mask_; }
  int n() const { return n_; }

 private:
  Mask mask_;
  int n_;
};

inline int scaled(int px, int n) { return std::max(1, static_cast<int>(std::lround(px * n / 32.0))); }

template <typename Rng>
int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

template <typename Rng>
Mask paint_family(Family family, int n, Rng& rng) {
  Painter p(n);
  const int mid = n / 2;
  auto S = [n](int px) { return scaled(px, n); };
  switch (family) {
    case Family::patch: {
      const int w = 2 * uniform_int(rng, S(3), S(14));
      const int h = 2 * uniform_int(rng, S(3), S(14));
      p.rect(mid - h / 2, mid - w / 2, mid + h / 2, mid + w / 2);
      break;
    }
    case Family::ring: {
      const int a = uniform_int(rng, S(6), mid);
      const int w = uniform_int(rng, S(2), std::min(S(5), a - 1));
      p.square_ring(a, w);
      break;
    }
    case Family::cross: {
      const int len = uniform_int(rng, S(6), mid);
      const int w = 2 * uniform_int(rng, 1, S(4));
      p.rect(mid - w / 2, mid - len, mid + w / 2, mid + len);
      p.rect(mid - len, mid - w / 2, mid + len, mid + w / 2);
      break;
    }
    case Family::split_ring: {
      const int a = uniform_int(rng, S(7), mid);
      const int w = uniform_int(rng, S(2), std::min(S(5), a - 2));
      const int gap = 2 * uniform_int(rng, 1, 2);
      const bool two_gaps = uniform_int(rng, 0, 1) == 1;
      p.square_ring(a, w);
      Mask& m = p.mask();
      for (int r = mid - gap / 2; r < mid + gap / 2; ++r)
        for (int c = 0; c < n; ++c) {
          if (c >= mid) m.set(r, c, false);
          if (two_gaps && c < mid) m.set(r, c, false);
        }
      break;
    }
    case Family::grid: {
      const int period = uniform_int(rng, 0, 1) == 0 ? S(8) : S(16);
      const int w = uniform_int(rng, S(2), std::max(S(2), period / 2));
      const bool mesh = uniform_int(rng, 0, 1) == 0;
      auto on_line = [&](int x) {
        // Line centres symmetric about the cell centre.
        const double centre = (n - 1) / 2.0;
        for (double c0 = centre + period / 2.0; c0 < n + period; c0 += period)
          for (double cc : {c0, 2 * centre - c0})
            if (std::abs(x - cc) < w / 2.0) return true;
        return false;
      };
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
          const bool lr = on_line(r), lc = on_line(c);
          if (mesh ? (lr || lc) : (lr && lc)) p.mask().set(r, c);
        }
      break;
    }
    case Family::concentric_squares: {
      const int rings = uniform_int(rng, 2, 3);
      int outer = uniform_int(rng, mid - S(4), mid);
      for (int k = 0; k < rings && outer >= 2; ++k) {
        const int w = std::min(uniform_int(rng, S(2), S(3)), outer);
        p.square_ring(outer, w);
        outer -= w + uniform_int(rng, S(2), S(4));
      }
      break;
    }
    case Family::dipole_array: {
      const int count = uniform_int(rng, 1, 3);
      const int len = uniform_int(rng, S(10), n - 2);
      const int w = uniform_int(rng, S(2), S(4));
      const int gap = uniform_int(rng, S(2), std::max(S(2), (n - count * w) / std::max(1, count)));
      const int span = count * w + (count - 1) * gap;
      int top = mid - span / 2;
      for (int k = 0; k < count; ++k, top += w + gap) p.rect(top, mid - len / 2, top + w, mid - len / 2 + len);
      break;
    }
    case Family::windmill: {
      const int len = uniform_int(rng, S(6), mid - 1);
      const int w = uniform_int(rng, S(2), S(4));
      const int hook = uniform_int(rng, S(3), std::max(S(3), len - 1));
      Painter arm(n);
      arm.rect(mid - w, mid, mid, mid + len);                   // radial bar
      arm.rect(mid - w - hook + w, mid + len - w, mid, mid + len);  // hook toward the neighbour arm
      Mask orbit = arm.mask();
      Mask rot = orbit;
      for (int k = 0; k < 3; ++k) {
        rot = rot.rotated90();
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < n; ++c)
            if (rot(r, c)) orbit.set(r, c);
      }
      p.mask() = orbit;
      break;
    }
  }
  return p.mask();
}

}  // namespace detail

/// Deterministic in (seed, family).
inline MetaAtom sample_meta_atom(std::uint64_t seed, Family family, int grid_size = kDefaultGridSize,
                                 double cell_size_mm = kDefaultCellSizeMm) {
  std::mt19937_64 rng(splitmix64(seed));
  MetaAtom atom;
  atom.cell_size_mm = cell_size_mm;
  atom.pattern = detail::paint_family(family, grid_size, rng);
  const int rotations = detail::uniform_int(rng, 0, 3);
  for (int k = 0; k < rotations; ++k) atom.pattern = atom.pattern.rotated90();
  const std::size_t rs_index = static_cast<std::size_t>(
      detail::uniform_int(rng, 0, static_cast<int>(kAllowedSheetResistances.size()) - 1));
  atom.sheet_resistance = kAllowedSheetResistances[rs_index];
  atom.kind = atom.sheet_resistance == 0.0 ? PatternKind::metal : PatternKind::resistive;
  atom.layers = detail::uniform_int(rng, 0, 1) == 0 ? LayerConfig::single : LayerConfig::dual;
  return atom;
}

inline MetaAtom sample_meta_atom(std::uint64_t seed, const std::string& family) {
  return sample_meta_atom(seed, family_from_string(family));
}

// ---------------------------------------------------------------------------
// Spectral categories

enum class SpectralCategory { non_absorbing, single_resonance, multiple_resonance, wideband, ultra_wideband };

inline constexpr std::array<SpectralCategory, 5> kAllCategories{
    SpectralCategory::non_absorbing, SpectralCategory::single_resonance, SpectralCategory::multiple_resonance,
    SpectralCategory::wideband, SpectralCategory::ultra_wideband};

inline std::string to_string(SpectralCategory c) {
  switch (c) {
    case SpectralCategory::non_absorbing: return "non_absorbing";
    case SpectralCategory::single_resonance: return "single_resonance";
    case SpectralCategory::multiple_resonance: return "multiple_resonance";
    case SpectralCategory::wideband: return "wideband";
    case SpectralCategory::ultra_wideband: return "ultra_wideband";
  }
  return "?";
}

inline SpectralCategory category_from_string(const std::string& s) {
  for (auto c : kAllCategories)
    if (to_string(c) == s) return c;
  throw std::invalid_argument("unknown spectral category '" + s + "'");
}

/// |S11| at or below this linear magnitude (-10 dB) counts as absorbing.
inline const double kAbsorbingThreshold = std::pow(10.0, -0.5);
inline constexpr double kWidebandGHz = 2.0;
inline constexpr double kUltraWidebandGHz = 10.0;

/// Lengths (in grid points) of maximal runs with |S11| <= -10 dB.
inline std::vector<int> absorption_bands(const Spectrum& s) {
  std::vector<int> runs;
  int run = 0;
  for (double v : s.values) {
    if (v <= kAbsorbingThreshold) {
      ++run;
    } else if (run > 0) {
      runs.push_back(run);
      run = 0;
    }
  }
  if (run > 0) runs.push_back(run);
  return runs;
}

inline SpectralCategory categorize_spectrum(const Spectrum& s) {
  const auto bands = absorption_bands(s);
  if (bands.empty()) return SpectralCategory::non_absorbing;
  if (bands.size() >= 2) return SpectralCategory::multiple_resonance;
  const double width = bands.front() * kFreqStepGHz;
  if (width > kUltraWidebandGHz) return SpectralCategory::ultra_wideband;
  if (width >= kWidebandGHz) return SpectralCategory::wideband;
  return SpectralCategory::single_resonance;
}

// ---------------------------------------------------------------------------
// Dataset

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "'");
}

struct Sample {
  MetaAtom meta_atom;
  Material material;
  EncodedImage image;
  Spectrum spectrum;
  SpectralCategory category = SpectralCategory::non_absorbing;
  Split split = Split::train;
  std::uint64_t seed = 0;
  Family family = Family::patch;
};

struct ForgeConfig {
  std::size_t n = 4000;
  std::uint64_t seed = 1;
  std::vector<Family> families{kAllFamilies.begin(), kAllFamilies.end()};
  std::vector<MaterialPreset> materials = default_material_presets();
  int grid_size = kDefaultGridSize;
  double cell_size_mm = kDefaultCellSizeMm;
  int max_resample = 10;
  double train_ratio = 0.8;
  double val_ratio = 0.1;
  int min_eval = 1;
};

struct Dataset {
  ForgeConfig config;
  std::vector<Sample> samples;
  std::size_t skipped = 0;  // indices whose resample budget ran out
  std::vector<std::string> warnings;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].split == s) out.push_back(i);
    return out;
  }

  std::map<std::string, std::size_t> category_histogram() const {
    std::map<std::string, std::size_t> h;
    for (auto c : kAllCategories) h[to_string(c)] = 0;
    for (const auto& s : samples) ++h[to_string(s.category)];
    return h;
  }
};

inline Sample make_sample(const MetaAtom& atom, const Material& material, std::uint64_t seed, Family family) {
  Sample s;
  s.meta_atom = atom;
  s.material = material;
  s.image = encode(atom, atom.pattern.rows());
  s.spectrum = reflection_spectrum(atom, material);
  s.category = categorize_spectrum(s.spectrum);
  s.seed = seed;
  s.family = family;
  return s;
}

struct SplitResult {
  std::vector<Split> assignment;
  std::vector<std::string> warnings;
};

/// Per category: 80/10/10 (floors, remainder to train) when count >= 10;
/// otherwise min_eval each to val and test when count >= 3, rest to train.
inline SplitResult stratified_split(const std::vector<SpectralCategory>& categories, std::uint64_t seed,
                                    double train_ratio = 0.8, double val_ratio = 0.1, int min_eval = 1) {
  SplitResult res;
  res.assignment.assign(categories.size(), Split::train);
  for (auto cat : kAllCategories) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < categories.size(); ++i)
      if (categories[i] == cat) members.push_back(i);
    const std::size_t count = members.size();
    if (count == 0) continue;
    std::mt19937_64 rng(hash_seed(seed, static_cast<std::uint64_t>(cat)));
    std::shuffle(members.begin(), members.end(), rng);
    std::size_t n_val = 0, n_test = 0;
    if (count >= 10) {
      n_val = static_cast<std::size_t>(std::floor(count * val_ratio));
      n_test = static_cast<std::size_t>(std::floor(count * (1.0 - train_ratio - val_ratio) + 1e-9));
    } else if (count >= 3) {
      n_val = n_test = std::min(static_cast<std::size_t>(std::max(min_eval, 1)), (count - 1) / 2);
    } else {
      // Too few to guarantee evaluation coverage without emptying train.
      n_test = count == 2 ? 1 : 0;
      res.warnings.push_back("category " + to_string(cat) + " has only " + std::to_string(count) +
                             " sample(s); validation split left empty");
    }
    for (std::size_t k = 0; k < n_val; ++k) res.assignment[members[k]] = Split::val;
    for (std::size_t k = n_val; k < n_val + n_test; ++k) res.assignment[members[k]] = Split::test;
  }
  return res;
}

/// Inverse class-frequency weights, one per training sample.
inline std::vector<double> sampling_weights(const std::vector<SpectralCategory>& train_categories) {
  if (train_categories.empty()) throw std::invalid_argument("sampling_weights: empty training split");
  std::map<SpectralCategory, std::size_t> counts;
  for (auto c : train_categories) ++counts[c];
  std::vector<double> w;
  w.reserve(train_categories.size());
  for (auto c : train_categories) w.push_back(1.0 / static_cast<double>(counts[c]));
  return w;
}

/// Sampling with replacement proportional to sampling_weights.
class WeightedSampler {
 public:
  explicit WeightedSampler(std::vector<double> weights) : dist_(weights.begin(), weights.end()) {}
  template <typename Rng>
  std::size_t operator()(Rng& rng) {
    return dist_(rng);
  }

 private:
  std::discrete_distribution<std::size_t> dist_;
};

inline Dataset build_dataset(const ForgeConfig& cfg) {
  if (cfg.n == 0) throw std::invalid_argument("build_dataset: N must be >= 1");
  if (cfg.materials.empty()) throw std::invalid_argument("build_dataset: material table is empty");
  if (cfg.families.empty()) throw std::invalid_argument("build_dataset: no families selected");
  Dataset ds;
  ds.config = cfg;
  std::vector<double> mat_w;
  for (const auto& m : cfg.materials) mat_w.push_back(m.weight);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const std::uint64_t seed_i = hash_seed(cfg.seed, i);
    std::mt19937_64 pick(seed_i);
    const Family fam = cfg.families[std::uniform_int_distribution<std::size_t>(0, cfg.families.size() - 1)(pick)];
    const Material& mat = cfg.materials[std::discrete_distribution<std::size_t>(mat_w.begin(), mat_w.end())(pick)].material;
    bool ok = false;
    for (int attempt = 0; attempt <= cfg.max_resample && !ok; ++attempt) {
      const std::uint64_t s = attempt == 0 ? seed_i : hash_seed(seed_i, static_cast<std::uint64_t>(attempt));
      MetaAtom atom = sample_meta_atom(s, fam, cfg.grid_size, cfg.cell_size_mm);
      if (atom.pattern.empty() || !check_fabricable(atom).passed) continue;
      ds.samples.push_back(make_sample(atom, mat, s, fam));
      ok = true;
    }
    if (!ok) ++ds.skipped;
  }
  if (ds.samples.empty()) throw std::runtime_error("build_dataset: every index was skipped");
  std::vector<SpectralCategory> cats;
  for (const auto& s : ds.samples) cats.push_back(s.category);
  auto split = stratified_split(cats, cfg.seed, cfg.train_ratio, cfg.val_ratio, cfg.min_eval);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) ds.samples[i].split = split.assignment[i];
  ds.warnings = std::move(split.warnings);
  return ds;
}

// ---------------------------------------------------------------------------
// On-disk layout: manifest.json, spectra.bin (float32 LE, N x 201), images/*.png

inline nlohmann::json forge_config_json(const ForgeConfig& cfg) {
  nlohmann::json fams = nlohmann::json::array();
  for (auto f : cfg.families) fams.push_back(to_string(f));
  return {{"n", cfg.n},
          {"seed", cfg.seed},
          {"families", fams},
          {"materials", presets_to_json(cfg.materials).at("materials")},
          {"grid_size", cfg.grid_size},
          {"cell_size_mm", cfg.cell_size_mm},
          {"max_resample", cfg.max_resample},
          {"train_ratio", cfg.train_ratio},
          {"val_ratio", cfg.val_ratio},
          {"min_eval", cfg.min_eval}};
}

inline ForgeConfig forge_config_from_json(const nlohmann::json& j) {
  ForgeConfig cfg;
  cfg.n = j.at("n").get<std::size_t>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.families.clear();
  for (const auto& f : j.at("families")) cfg.families.push_back(family_from_string(f.get<std::string>()));
  cfg.materials = presets_from_json(j.at("materials"));
  cfg.grid_size = j.value("grid_size", kDefaultGridSize);
  cfg.cell_size_mm = j.value("cell_size_mm", kDefaultCellSizeMm);
  cfg.max_resample = j.value("max_resample", 10);
  cfg.train_ratio = j.value("train_ratio", 0.8);
  cfg.val_ratio = j.value("val_ratio", 0.1);
  cfg.min_eval = j.value("min_eval", 1);
  return cfg;
}

inline constexpr const char* kManifestSchema = "metadiff.dataset/1";

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir, bool with_images = true) {
  std::filesystem::create_directories(dir);
  if (with_images) std::filesystem::create_directories(dir / "images");
  std::vector<Spectrum> spectra;
  spectra.reserve(ds.samples.size());
  nlohmann::json records = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.png", i);
    if (with_images) write_png(dir / "images" / name, s.image);
    spectra.push_back(s.spectrum);
    records.push_back({{"index", i},
                       {"seed", s.seed},
                       {"family", to_string(s.family)},
                       {"material", s.material.name},
                       {"category", to_string(s.category)},
                       {"split", to_string(s.split)},
                       {"image", with_images ? std::string("images/") + name : std::string()},
                       {"spectrum_offset", i * kSpectrumPoints * sizeof(float)},
                       {"meta_atom", to_json(s.meta_atom)}});
  }
  write_spectra(dir / "spectra.bin", spectra);
  nlohmann::json hist(ds.category_histogram());
  nlohmann::json manifest{{"schema", kManifestSchema},
                          {"config", forge_config_json(ds.config)},
                          {"count", ds.samples.size()},
                          {"skipped", ds.skipped},
                          {"warnings", ds.warnings},
                          {"category_histogram", hist},
                          {"samples", records}};
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(1) << '\n';
  if (!out) throw std::runtime_error("write failed: " + (dir / "manifest.json").string());
}

/// Loads a forged dataset; images are re-encoded from the stored meta-atoms.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
  const auto manifest = nlohmann::json::parse(in);
  if (manifest.value("schema", std::string()) != kManifestSchema)
    throw std::runtime_error("dataset schema mismatch in " + dir.string());
  Dataset ds;
  ds.config = forge_config_from_json(manifest.at("config"));
  ds.skipped = manifest.value("skipped", std::size_t{0});
  ds.warnings = manifest.value("warnings", std::vector<std::string>{});
  const auto spectra = read_spectra(dir / "spectra.bin");
  const auto& records = manifest.at("samples");
  if (spectra.size() != records.size()) throw std::runtime_error("spectra.bin record count does not match manifest");
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    Sample s;
    s.meta_atom = meta_atom_from_json(r.at("meta_atom"));
    s.material = find_material(ds.config.materials, r.at("material").get<std::string>());
    s.image = encode(s.meta_atom, s.meta_atom.pattern.rows());
    s.spectrum = spectra[i];
    s.category = category_from_string(r.at("category").get<std::string>());
    s.split = split_from_string(r.at("split").get<std::string>());
    s.seed = r.at("seed").get<std::uint64_t>();
    s.family = family_from_string(r.at("family").get<std::string>());
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace metadiff
