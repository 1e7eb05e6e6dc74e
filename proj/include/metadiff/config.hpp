#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "metadiff/dataset.hpp"
#include "metadiff/diffusion.hpp"
#include "metadiff/metrics.hpp"
#include "metadiff/nn/denoiser.hpp"
#include "metadiff/nn/optim.hpp"
#include "metadiff/nn/surrogate.hpp"

namespace metadiff {

inline constexpr const char* kRunConfigSchema = "metadiff.run/1";

struct SurrogateTrainConfig {
  int epochs = 60;
  int batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 11;
  nn::SurrogateConfig net;
};

struct DiffusionTrainConfig {
  int epochs = 60;
  int batch_size = 32;
  double lr = nn::kDefaultLearningRate;
  int timesteps = kDefaultTimesteps;
  ScheduleKind schedule = ScheduleKind::linear;
  LossWeights weights;
  bool spectral_loss = true;
  int checkpoint_every = 10;
  std::uint64_t seed = 21;
  nn::DenoiserConfig net;
};

struct EvalConfig {
  int conditions = 32;            // held-out test conditions, one design each
  int diversity_conditions = 10;  // conditions for the diversity study
  int diversity_samples = 8;      // designs per diversity condition
  std::uint64_t seed = 31;
  int batch = 16;  // conditions sampled together
  DiversityConfig diversity;
};

struct RunConfig {
  ForgeConfig forge;
  SurrogateTrainConfig surrogate;
  DiffusionTrainConfig diffusion;
  EvalConfig eval;
};

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const nn::SurrogateConfig& c) {
  return {{"image_size", c.image_size}, {"stage_channels", c.stage_channels}, {"material_dim", c.material_dim},
          {"hidden", c.hidden}};
}

inline nn::SurrogateConfig surrogate_config_from_json(const nlohmann::json& j) {
  nn::SurrogateConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.stage_channels = j.value("stage_channels", c.stage_channels);
  c.material_dim = j.value("material_dim", c.material_dim);
  c.hidden = j.value("hidden", c.hidden);
  return c;
}

inline nlohmann::json to_json(const nn::DenoiserConfig& c) {
  return {{"image_size", c.image_size},
          {"base_channels", c.base_channels},
          {"channel_mult", c.channel_mult},
          {"blocks_per_level", c.blocks_per_level},
          {"groups", c.groups},
          {"time_dim", c.time_dim},
          {"spectrum_dim", c.embedder.spectrum_dim},
          {"material_dim", c.embedder.material_dim},
          {"conditioning", nn::to_string(c.conditioning)}};
}

inline nn::DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
  nn::DenoiserConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.channel_mult = j.value("channel_mult", c.channel_mult);
  c.blocks_per_level = j.value("blocks_per_level", c.blocks_per_level);
  c.groups = j.value("groups", c.groups);
  c.time_dim = j.value("time_dim", c.time_dim);
  c.embedder.spectrum_dim = j.value("spectrum_dim", c.embedder.spectrum_dim);
  c.embedder.material_dim = j.value("material_dim", c.embedder.material_dim);
  c.conditioning = nn::conditioning_from_string(j.value("conditioning", nn::to_string(c.conditioning)));
  return c;
}

inline nlohmann::json to_json(const LossWeights& w) {
  return {{"w_R", w.w_R},
          {"w_G", w.w_G},
          {"w_B", w.w_B},
          {"lambda_spec", w.lambda_spec},
          {"spectral_reduction", to_string(w.spectral_reduction)},
          {"cfg_dropout", w.cfg_dropout},
          {"guidance_w", w.guidance_w}};
}

inline LossWeights loss_weights_from_json(const nlohmann::json& j) {
  LossWeights w;
  w.w_R = j.value("w_R", w.w_R);
  w.w_G = j.value("w_G", w.w_G);
  w.w_B = j.value("w_B", w.w_B);
  w.lambda_spec = j.value("lambda_spec", w.lambda_spec);
  w.spectral_reduction = spectral_reduction_from_string(j.value("spectral_reduction", to_string(w.spectral_reduction)));
  w.cfg_dropout = j.value("cfg_dropout", w.cfg_dropout);
  w.guidance_w = j.value("guidance_w", w.guidance_w);
  w.validate();
  return w;
}

inline nlohmann::json to_json(const SurrogateTrainConfig& c) {
  return {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"seed", c.seed}, {"net", to_json(c.net)}};
}

inline nlohmann::json to_json(const DiffusionTrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"timesteps", c.timesteps},
          {"schedule", to_string(c.schedule)},
          {"weights", to_json(c.weights)},
          {"conditioning", nn::to_string(c.net.conditioning)},
          {"spectral_loss", c.spectral_loss ? "on" : "off"},
          {"checkpoint_every", c.checkpoint_every},
          {"seed", c.seed},
          {"net", to_json(c.net)}};
}

inline nlohmann::json to_json(const EvalConfig& c) {
  return {{"conditions", c.conditions},
          {"diversity_conditions", c.diversity_conditions},
          {"diversity_samples", c.diversity_samples},
          {"seed", c.seed},
          {"batch", c.batch},
          {"diversity",
           {{"lambda_mix", c.diversity.lambda_mix}, {"delta_px", c.diversity.delta_px}, {"eps_stab", c.diversity.eps_stab}}}};
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"schema", kRunConfigSchema},
          {"forge", forge_config_json(c.forge)},
          {"surrogate", to_json(c.surrogate)},
          {"diffusion", to_json(c.diffusion)},
          {"eval", to_json(c.eval)}};
}

namespace detail {
inline bool parse_on_off(const nlohmann::json& v) {
  if (v.is_boolean()) return v.get<bool>();
  const auto s = v.get<std::string>();
  if (s == "on") return true;
  if (s == "off") return false;
  throw std::invalid_argument("expected \"on\" or \"off\", got \"" + s + "\"");
}
}  // namespace detail

/// Parses a fully resolved or partial config; absent keys keep their defaults.
inline RunConfig run_config_from_json(const nlohmann::json& user) {
  if (user.contains("schema") && user.at("schema") != kRunConfigSchema)
    throw std::runtime_error("config schema mismatch: expected " + std::string(kRunConfigSchema) + ", got " +
                             user.at("schema").dump());
  nlohmann::json j = to_json(RunConfig{});
  j.merge_patch(user);
  RunConfig c;
  c.forge = forge_config_from_json(j.at("forge"));

  const auto& s = j.at("surrogate");
  c.surrogate.epochs = s.at("epochs");
  c.surrogate.batch_size = s.at("batch_size");
  c.surrogate.lr = s.at("lr");
  c.surrogate.seed = s.at("seed");
  c.surrogate.net = surrogate_config_from_json(s.at("net"));

  const auto& d = j.at("diffusion");
  c.diffusion.epochs = d.at("epochs");
  c.diffusion.batch_size = d.at("batch_size");
  c.diffusion.lr = d.at("lr");
  c.diffusion.timesteps = d.at("timesteps");
  c.diffusion.schedule = schedule_kind_from_string(d.at("schedule"));
  c.diffusion.weights = loss_weights_from_json(d.at("weights"));
  c.diffusion.spectral_loss = detail::parse_on_off(d.at("spectral_loss"));
  c.diffusion.checkpoint_every = d.at("checkpoint_every");
  c.diffusion.seed = d.at("seed");
  c.diffusion.net = denoiser_config_from_json(d.at("net"));
  // The ablation flag is authoritative over the nested network field.
  c.diffusion.net.conditioning = nn::conditioning_from_string(d.at("conditioning"));

  const auto& e = j.at("eval");
  c.eval.conditions = e.at("conditions");
  c.eval.diversity_conditions = e.at("diversity_conditions");
  c.eval.diversity_samples = e.at("diversity_samples");
  c.eval.seed = e.at("seed");
  c.eval.batch = e.at("batch");
  c.eval.diversity.lambda_mix = e.at("diversity").at("lambda_mix");
  c.eval.diversity.delta_px = e.at("diversity").at("delta_px");
  c.eval.diversity.eps_stab = e.at("diversity").at("eps_stab");

  if (c.surrogate.epochs < 1 || c.diffusion.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (c.surrogate.batch_size < 1 || c.diffusion.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (c.diffusion.checkpoint_every < 1) throw std::invalid_argument("checkpoint_every must be >= 1");
  c.eval.diversity.validate();
  make_schedule(c.diffusion.timesteps);
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("malformed config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

/// Stable 64-bit digest of a JSON value (FNV-1a over its canonical dump).
inline std::uint64_t fingerprint(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

}  // namespace metadiff
