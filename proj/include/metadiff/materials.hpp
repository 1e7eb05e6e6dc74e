#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metadiff/em_oracle.hpp"

namespace metadiff {

struct MaterialPreset {
  Material material;
  double weight = 1.0;  // relative draw probability in the dataset forge
};

/// Commercial substrates. The first six are the laminates used for the
/// reported sample designs; the rest widen the thickness range so that
/// broadband and multi-band responses occur in the synthetic data.
inline std::vector<MaterialPreset> default_material_presets() {
  return {
      {{"RT/Duroid 5880", 2.2, 0.0009, 1.575}, 1.0},
      {{"RO4835", 3.48, 0.0037, 1.524}, 1.0},
      {{"AD255C", 2.6, 0.0013, 3.175}, 1.0},
      {{"RO4533", 3.45, 0.0025, 1.524}, 1.0},
      {{"Kappa 438", 4.38, 0.005, 1.524}, 1.0},
      {{"RO4360G2", 6.4, 0.0038, 1.524}, 1.0},
      {{"FR-4", 4.3, 0.025, 3.2}, 1.0},
      {{"RO4003C", 3.38, 0.0027, 3.251}, 1.0},
      {{"RO3006", 6.15, 0.002, 2.56}, 1.0},
      {{"Rohacell 31 HF", 1.05, 0.0017, 5.0}, 3.0},
  };
}

inline nlohmann::json to_json(const Material& m) {
  return {{"name", m.name}, {"eps_r", m.eps_r}, {"tan_delta", m.tan_delta}, {"thickness_mm", m.thickness_mm}};
}

inline Material material_from_json(const nlohmann::json& j) {
  Material m{j.value("name", std::string("custom")), j.at("eps_r").get<double>(), j.at("tan_delta").get<double>(),
             j.at("thickness_mm").get<double>()};
  m.validate();
  return m;
}

inline nlohmann::json presets_to_json(const std::vector<MaterialPreset>& presets) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : presets) {
    auto j = to_json(p.material);
    j["weight"] = p.weight;
    arr.push_back(j);
  }
  return {{"materials", arr}};
}

inline std::vector<MaterialPreset> presets_from_json(const nlohmann::json& j) {
  const auto& arr = j.contains("materials") ? j.at("materials") : j;
  if (!arr.is_array() || arr.empty()) throw std::invalid_argument("material table must be a nonempty array");
  std::vector<MaterialPreset> out;
  for (const auto& e : arr) {
    MaterialPreset p{material_from_json(e), e.value("weight", 1.0)};
    if (!(p.weight > 0.0)) throw std::invalid_argument("material '" + p.material.name + "': weight must be > 0");
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<MaterialPreset> load_material_presets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open material table " + path.string());
  return presets_from_json(nlohmann::json::parse(in));
}

inline const Material& find_material(const std::vector<MaterialPreset>& presets, const std::string& name) {
  for (const auto& p : presets)
    if (p.material.name == name) return p.material;
  throw std::invalid_argument("unknown material '" + name + "'");
}

}  // namespace metadiff
