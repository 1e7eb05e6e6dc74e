#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace metadiff {

inline constexpr int kDefaultGridSize = 32;

/// Reference value for the G-channel resistivity normalization (Ohm/sq).
inline constexpr double kMaxSheetResistance = 200.0;

/// Sheet resistances a decoded design may carry. 0 denotes a metal pattern.
inline constexpr std::array<double, 5> kAllowedSheetResistances{0.0, 50.0, 70.0, 75.0, 100.0};

/// Physical edge length of a unit cell when none is given (mm).
inline constexpr double kDefaultCellSizeMm = 8.0;

/// Minimum printable feature for the laser-etching process (mm).
inline constexpr double kMinFeatureMm = 0.1;

enum class PatternKind { metal, resistive };
enum class LayerConfig { single, dual };

inline std::string to_string(PatternKind k) { return k == PatternKind::metal ? "metal" : "resistive"; }
inline std::string to_string(LayerConfig l) { return l == LayerConfig::single ? "single" : "dual"; }

/// Row-major binary grid.
class Mask {
 public:
  Mask() = default;
  Mask(int rows, int cols) : rows_(rows), cols_(cols), bits_(static_cast<std::size_t>(rows * cols), 0) {
    if (rows <= 0 || cols <= 0) throw std::invalid_argument("Mask: dimensions must be positive");
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return bits_.size(); }

  bool operator()(int r, int c) const { return bits_[static_cast<std::size_t>(r * cols_ + c)] != 0; }
  void set(int r, int c, bool v = true) { bits_[static_cast<std::size_t>(r * cols_ + c)] = v ? 1 : 0; }
  bool in_bounds(int r, int c) const { return r >= 0 && r < rows_ && c >= 0 && c < cols_; }

  /// Value at (r, c), false outside the grid.
  bool at_or_empty(int r, int c) const { return in_bounds(r, c) && (*this)(r, c); }

  std::size_t count() const { return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1)); }
  bool empty() const { return count() == 0; }
  const std::vector<std::uint8_t>& bits() const { return bits_; }

  /// 90 degree clockwise rotation of a square mask.
  Mask rotated90() const {
    Mask out(cols_, rows_);
    for (int r = 0; r < rows_; ++r)
      for (int c = 0; c < cols_; ++c) out.set(c, rows_ - 1 - r, (*this)(r, c));
    return out;
  }

  std::string to_bitstring() const {
    std::string s(bits_.size(), '0');
    for (std::size_t i = 0; i < bits_.size(); ++i)
      if (bits_[i]) s[i] = '1';
    return s;
  }

  static Mask from_bitstring(int rows, int cols, const std::string& s) {
    Mask m(rows, cols);
    if (s.size() != m.size()) throw std::invalid_argument("Mask: bitstring length does not match dimensions");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] != '0' && s[i] != '1') throw std::invalid_argument("Mask: bitstring must contain only 0/1");
      m.bits_[i] = s[i] == '1';
    }
    return m;
  }

  bool operator==(const Mask&) const = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

struct MetaAtom {
  Mask pattern{kDefaultGridSize, kDefaultGridSize};
  PatternKind kind = PatternKind::metal;
  double sheet_resistance = 0.0;  // Ohm/sq
  LayerConfig layers = LayerConfig::single;
  double cell_size_mm = kDefaultCellSizeMm;

  bool operator==(const MetaAtom&) const = default;

  void validate(int grid_size = kDefaultGridSize) const {
    if (pattern.rows() != grid_size || pattern.cols() != grid_size)
      throw std::invalid_argument("MetaAtom: pattern is " + std::to_string(pattern.rows()) + "x" +
                                  std::to_string(pattern.cols()) + ", expected " + std::to_string(grid_size) +
                                  "x" + std::to_string(grid_size));
    if (!(sheet_resistance >= 0.0)) throw std::invalid_argument("MetaAtom: negative sheet resistance");
    if (sheet_resistance > kMaxSheetResistance)
      throw std::invalid_argument("MetaAtom: sheet resistance exceeds " + std::to_string(kMaxSheetResistance));
    if ((kind == PatternKind::metal) != (sheet_resistance == 0.0))
      throw std::invalid_argument("MetaAtom: sheet resistance must be 0 exactly for metal patterns");
    if (!(cell_size_mm > 0.0)) throw std::invalid_argument("MetaAtom: cell size must be positive");
  }
};

/// Three planar channels in [0,1]: R presence, G resistivity-weighted presence,
/// B layer-flag-weighted presence.
struct EncodedImage {
  static constexpr int kChannels = 3;
  int height = 0;
  int width = 0;
  std::vector<float> data;  // [channel][row][col]

  EncodedImage() = default;
  EncodedImage(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(kChannels * h * w), 0.0f) {}

  std::size_t plane() const { return static_cast<std::size_t>(height * width); }
  float& at(int ch, int r, int c) { return data[ch * plane() + static_cast<std::size_t>(r * width + c)]; }
  float at(int ch, int r, int c) const { return data[ch * plane() + static_cast<std::size_t>(r * width + c)]; }
  bool operator==(const EncodedImage&) const = default;
};

inline EncodedImage encode(const MetaAtom& atom, int grid_size = kDefaultGridSize) {
  atom.validate(grid_size);
  const float g = static_cast<float>(atom.sheet_resistance / kMaxSheetResistance);
  const float b = atom.layers == LayerConfig::dual ? 1.0f : 0.0f;
  EncodedImage img(grid_size, grid_size);
  for (int r = 0; r < grid_size; ++r)
    for (int c = 0; c < grid_size; ++c) {
      if (!atom.pattern(r, c)) continue;
      img.at(0, r, c) = 1.0f;
      img.at(1, r, c) = g;
      img.at(2, r, c) = b;
    }
  return img;
}

inline double snap_sheet_resistance(double ohms) {
  double best = kAllowedSheetResistances.front();
  for (double v : kAllowedSheetResistances)
    if (std::abs(v - ohms) < std::abs(best - ohms)) best = v;
  return best;
}

/// Inverse of encode for possibly noisy images; values are clamped to [0,1] first.
inline MetaAtom decode(const EncodedImage& image, double cell_size_mm = kDefaultCellSizeMm) {
  if (image.height <= 0 || image.width <= 0 || image.data.size() != 3 * image.plane())
    throw std::invalid_argument("decode: image must be shaped 3xHxW");
  auto clamp01 = [](float v) { return std::clamp(static_cast<double>(v), 0.0, 1.0); };
  MetaAtom atom;
  atom.pattern = Mask(image.height, image.width);
  atom.cell_size_mm = cell_size_mm;
  double g_sum = 0.0, b_sum = 0.0;
  std::size_t n = 0;
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c) {
      if (clamp01(image.at(0, r, c)) < 0.5) continue;
      atom.pattern.set(r, c);
      g_sum += clamp01(image.at(1, r, c));
      b_sum += clamp01(image.at(2, r, c));
      ++n;
    }
  if (n == 0) return atom;
  atom.sheet_resistance = snap_sheet_resistance(g_sum / static_cast<double>(n) * kMaxSheetResistance);
  atom.kind = atom.sheet_resistance == 0.0 ? PatternKind::metal : PatternKind::resistive;
  atom.layers = b_sum / static_cast<double>(n) >= 0.5 ? LayerConfig::dual : LayerConfig::single;
  return atom;
}

struct FabricabilityReport {
  double min_feature_mm = std::numeric_limits<double>::infinity();
  int min_feature_px = 0;  // 0 for an empty pattern
  bool passed = true;
};

/// Largest k such that every pattern pixel lies inside some k x k all-pattern
/// square (i.e. a morphological opening with a k x k square leaves the mask intact).
inline int min_feature_pixels(const Mask& mask) {
  if (mask.empty()) return 0;
  const int rows = mask.rows(), cols = mask.cols();
  // Largest all-ones square with bottom-right corner at (r, c).
  std::vector<int> sq(static_cast<std::size_t>(rows * cols), 0);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      if (!mask(r, c)) continue;
      int up = r > 0 ? sq[(r - 1) * cols + c] : 0;
      int left = c > 0 ? sq[r * cols + c - 1] : 0;
      int diag = r > 0 && c > 0 ? sq[(r - 1) * cols + c - 1] : 0;
      sq[r * cols + c] = 1 + std::min({up, left, diag});
    }
  // cover[p] = largest square size that contains p; propagate by painting.
  std::vector<int> cover(sq.size(), 0);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const int k = sq[r * cols + c];
      if (k == 0) continue;
      for (int dr = 0; dr < k; ++dr)
        for (int dc = 0; dc < k; ++dc) {
          int& v = cover[(r - dr) * cols + (c - dc)];
          v = std::max(v, k);
        }
    }
  int best = std::numeric_limits<int>::max();
  for (std::size_t i = 0; i < cover.size(); ++i)
    if (mask.bits()[i]) best = std::min(best, cover[i]);
  return best;
}

inline FabricabilityReport check_fabricable(const MetaAtom& atom) {
  FabricabilityReport rep;
  const int k = min_feature_pixels(atom.pattern);
  if (k == 0) return rep;
  const double pitch = atom.cell_size_mm / atom.pattern.rows();
  rep.min_feature_px = k;
  rep.min_feature_mm = pitch * k;
  rep.passed = rep.min_feature_mm > kMinFeatureMm;
  return rep;
}

inline nlohmann::json to_json(const MetaAtom& atom) {
  return {{"rows", atom.pattern.rows()},
          {"cols", atom.pattern.cols()},
          {"pattern", atom.pattern.to_bitstring()},
          {"pattern_kind", to_string(atom.kind)},
          {"sheet_resistance", atom.sheet_resistance},
          {"layers", to_string(atom.layers)},
          {"cell_size_mm", atom.cell_size_mm}};
}

inline MetaAtom meta_atom_from_json(const nlohmann::json& j) {
  MetaAtom atom;
  const int rows = j.at("rows").get<int>();
  const int cols = j.at("cols").get<int>();
  atom.pattern = Mask::from_bitstring(rows, cols, j.at("pattern").get<std::string>());
  const auto kind = j.at("pattern_kind").get<std::string>();
  if (kind != "metal" && kind != "resistive") throw std::invalid_argument("unknown pattern_kind '" + kind + "'");
  atom.kind = kind == "metal" ? PatternKind::metal : PatternKind::resistive;
  atom.sheet_resistance = j.at("sheet_resistance").get<double>();
  const auto layers = j.at("layers").get<std::string>();
  if (layers != "single" && layers != "dual") throw std::invalid_argument("unknown layers '" + layers + "'");
  atom.layers = layers == "single" ? LayerConfig::single : LayerConfig::dual;
  atom.cell_size_mm = j.value("cell_size_mm", kDefaultCellSizeMm);
  atom.validate(rows);
  return atom;
}

}  // namespace metadiff
