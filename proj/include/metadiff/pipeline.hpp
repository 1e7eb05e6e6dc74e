#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metadiff/codec.hpp"
#include "metadiff/config.hpp"
#include "metadiff/dataset.hpp"
#include "metadiff/diffusion.hpp"
#include "metadiff/em_oracle.hpp"
#include "metadiff/metrics.hpp"
#include "metadiff/nn/checkpoint.hpp"
#include "metadiff/nn/denoiser.hpp"
#include "metadiff/nn/optim.hpp"
#include "metadiff/nn/surrogate.hpp"

namespace metadiff {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

/// Progress sink; a null stream silences training output.
struct Log {
  std::ostream* out = &std::cerr;
  template <typename... A>
  void operator()(const A&... a) const {
    if (!out) return;
    (*out << ... << a) << std::endl;
  }
};

// ---------------------------------------------------------------------------
// Batch assembly

template <typename T>
void standardized_material(const Material& m, T* out) {
  nn::standardize_material(m.eps_r, m.tan_delta, m.thickness_mm, out);
}

/// Images mapped to [-1, 1], spectra and standardized materials for the given samples.
template <typename T>
TrainBatch<T> make_batch(const Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<const EncodedImage*> imgs;
  for (auto i : idx) imgs.push_back(&ds.samples[i].image);
  const int n = static_cast<int>(idx.size());
  TrainBatch<T> b{images_to_batch<T>(imgs), Tensor<T>({n, kSpectrumPoints}), Tensor<T>({n, nn::kMaterialFeatures})};
  for (int k = 0; k < n; ++k) {
    const Sample& s = ds.samples[idx[static_cast<std::size_t>(k)]];
    for (int p = 0; p < kSpectrumPoints; ++p)
      b.spectra[static_cast<std::size_t>(k) * kSpectrumPoints + p] = static_cast<T>(s.spectrum[p]);
    standardized_material(s.material, b.materials.data() + static_cast<std::size_t>(k) * nn::kMaterialFeatures);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Surrogate

inline constexpr const char* kSurrogateSchema = "metadiff.surrogate/1";
inline constexpr const char* kDiffusionSchema = "metadiff.diffusion/1";

inline void save_surrogate(const fs::path& path, nn::Surrogate<float>& net, const nlohmann::json& extra = {}) {
  nlohmann::json meta{{"net", to_json(net.config())}};
  if (!extra.is_null()) meta["info"] = extra;
  nn::write_checkpoint(path, kSurrogateSchema, meta, nn::snapshot(net.parameters()));
}

inline nn::Surrogate<float> load_surrogate(const fs::path& path) {
  const auto ck = nn::read_checkpoint(path);
  if (ck.schema != kSurrogateSchema) throw std::runtime_error(path.string() + ": not a surrogate checkpoint (" + ck.schema + ")");
  nn::InitRng rng(0);
  nn::Surrogate<float> net(surrogate_config_from_json(ck.metadata.at("net")), rng);
  const auto params = net.parameters();
  nn::require_exact_table(ck, params);
  nn::restore(ck, params);
  return net;
}

/// Mean over samples and frequency points of (prediction - oracle)^2.
inline double surrogate_mse(nn::Surrogate<float>& net, const Dataset& ds, const std::vector<std::size_t>& idx,
                            int batch = 64) {
  if (idx.empty()) return 0.0;
  double sse = 0;
  for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch)) {
    std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                   idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), start + batch)));
    const auto b = make_batch<float>(ds, chunk);
    Tensor<float> img = b.x0;
    for (auto& v : img.values()) v = 0.5f * (v + 1.0f);
    const auto pred = net.forward(img, b.materials);
    for (std::size_t i = 0; i < pred.numel(); ++i) {
      const double d = static_cast<double>(pred[i]) - b.spectra[i];
      sse += d * d;
    }
  }
  return sse / (static_cast<double>(idx.size()) * kSpectrumPoints);
}

struct SurrogateReport {
  std::vector<double> train_mse, val_mse;
  double test_mse = 0;
  double seconds = 0;
};

inline nlohmann::json to_json(const SurrogateReport& r) {
  return {{"train_mse", r.train_mse}, {"val_mse", r.val_mse}, {"test_mse", r.test_mse}, {"seconds", r.seconds}};
}

/// Fits the surrogate to oracle spectra on the train split (uniform shuffling,
/// MSE loss, Adam with per-epoch cosine decay) and reports held-out MSE.
inline SurrogateReport train_surrogate(nn::Surrogate<float>& net, const Dataset& ds, const SurrogateTrainConfig& cfg,
                                       const Log& log = {}) {
  const auto t0 = Clock::now();
  SurrogateReport rep;
  auto train = ds.indices(Split::train);
  const auto val = ds.indices(Split::val), test = ds.indices(Split::test);
  if (train.empty()) throw std::runtime_error("train_surrogate: empty training split");
  net.set_frozen(false);
  nn::Adam<float> opt(net.parameters());
  std::mt19937_64 rng(cfg.seed);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = nn::lr_at(epoch, cfg.epochs, cfg.lr);
    std::shuffle(train.begin(), train.end(), rng);
    double sse = 0;
    for (std::size_t start = 0; start < train.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<std::size_t> chunk(train.begin() + static_cast<std::ptrdiff_t>(start),
                                     train.begin() + static_cast<std::ptrdiff_t>(std::min(train.size(), start + cfg.batch_size)));
      const auto b = make_batch<float>(ds, chunk);
      Tensor<float> img = b.x0;
      for (auto& v : img.values()) v = 0.5f * (v + 1.0f);
      opt.zero_grad();
      const auto pred = net.forward(img, b.materials);
      Tensor<float> g(pred.shape());
      const double scale = 2.0 / static_cast<double>(pred.numel());
      for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double d = static_cast<double>(pred[i]) - b.spectra[i];
        sse += d * d;
        g[i] = static_cast<float>(scale * d);
      }
      if (!std::isfinite(sse)) throw NonFiniteError("surrogate training diverged in epoch " + std::to_string(epoch));
      net.backward(g);
      opt.step(lr);
    }
    rep.train_mse.push_back(sse / (static_cast<double>(train.size()) * kSpectrumPoints));
    rep.val_mse.push_back(surrogate_mse(net, ds, val));
    log("surrogate epoch ", epoch + 1, "/", cfg.epochs, " lr ", lr, " train_mse ", rep.train_mse.back(), " val_mse ",
        rep.val_mse.back(), " (", static_cast<int>(seconds_since(t0)), " s)");
  }
  rep.test_mse = surrogate_mse(net, ds, test);
  rep.seconds = seconds_since(t0);
  net.set_frozen(true);
  return rep;
}

// ---------------------------------------------------------------------------
// Diffusion model

struct DiffusionModel {
  nn::DenoiserConfig config;
  DiffusionSchedule schedule;
  LossWeights weights;
  nn::Denoiser<float> net;

  DiffusionModel() = default;
  DiffusionModel(const nn::DenoiserConfig& cfg, int timesteps, const LossWeights& w, std::uint64_t init_seed)
      : config(cfg), schedule(make_schedule(timesteps)), weights(w) {
    nn::InitRng rng(init_seed);
    net = nn::Denoiser<float>(cfg, rng);
  }
};

struct DiffusionCheckpointState {
  int epochs_done = 0;
  long long optimizer_steps = 0;
  std::string rng_state;
  std::string fingerprint;
  nlohmann::json history = nlohmann::json::array();
};

inline void save_diffusion(const fs::path& path, DiffusionModel& m, nn::Adam<float>* opt, const DiffusionCheckpointState& st) {
  nlohmann::json meta{{"net", to_json(m.config)},
                      {"timesteps", m.schedule.T},
                      {"weights", to_json(m.weights)},
                      {"epochs_done", st.epochs_done},
                      {"optimizer_steps", st.optimizer_steps},
                      {"rng_state", st.rng_state},
                      {"fingerprint", st.fingerprint},
                      {"history", st.history}};
  auto params = m.net.parameters();
  auto arrays = nn::snapshot(params, "model.");
  if (opt) {
    for (auto& a : nn::snapshot(opt->first_moments(), params, "adam.m.")) arrays.push_back(std::move(a));
    for (auto& a : nn::snapshot(opt->second_moments(), params, "adam.v.")) arrays.push_back(std::move(a));
  }
  nn::write_checkpoint(path, kDiffusionSchema, meta, arrays);
}

inline DiffusionModel load_diffusion(const fs::path& path, DiffusionCheckpointState* state = nullptr) {
  const auto ck = nn::read_checkpoint(path);
  if (ck.schema != kDiffusionSchema) throw std::runtime_error(path.string() + ": not a diffusion checkpoint (" + ck.schema + ")");
  const auto& meta = ck.metadata;
  DiffusionModel m(denoiser_config_from_json(meta.at("net")), meta.at("timesteps").get<int>(),
                   loss_weights_from_json(meta.at("weights")), 0);
  const auto params = m.net.parameters();
  nn::require_exact_table(ck, params, "model.");
  nn::restore(ck, params, "model.");
  if (state) {
    state->epochs_done = meta.value("epochs_done", 0);
    state->optimizer_steps = meta.value("optimizer_steps", 0LL);
    state->rng_state = meta.value("rng_state", std::string());
    state->fingerprint = meta.value("fingerprint", std::string());
    state->history = meta.value("history", nlohmann::json::array());
  }
  return m;
}

/// Restores Adam moments and step count saved alongside the model.
inline void restore_optimizer(const fs::path& path, nn::Adam<float>& opt) {
  const auto ck = nn::read_checkpoint(path);
  const auto& params = opt.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto* a = ck.find("adam.m." + params[k]->name);
    const auto* b = ck.find("adam.v." + params[k]->name);
    if (!a || !b || a->values.size() != params[k]->value.numel() || b->values.size() != params[k]->value.numel())
      throw std::runtime_error(path.string() + ": optimizer state missing for " + params[k]->name);
    std::copy(a->values.begin(), a->values.end(), opt.first_moments()[k].data());
    std::copy(b->values.begin(), b->values.end(), opt.second_moments()[k].data());
  }
  opt.set_steps(ck.metadata.value("optimizer_steps", 0LL));
}

struct EpochStats {
  int epoch = 0;
  double lr = 0;
  LossParts mean;
  double seconds = 0;
};

inline nlohmann::json to_json(const EpochStats& e) {
  return {{"epoch", e.epoch}, {"lr", e.lr},         {"loss", e.mean.total}, {"L_R", e.mean.r},
          {"L_G", e.mean.g},  {"L_B", e.mean.b},    {"L_spec", e.mean.spec}, {"seconds", e.seconds}};
}

/// Identity of a diffusion training run: resolved config + dataset identity.
inline std::string diffusion_fingerprint(const DiffusionTrainConfig& cfg, const Dataset& ds) {
  return hex64(fingerprint({{"train", to_json(cfg)}, {"forge", forge_config_json(ds.config)}, {"count", ds.samples.size()}}));
}

/// Trains the denoiser with inverse-frequency weighted sampling. Every
/// checkpoint_every epochs (and at the end) writes out_dir/model.ckpt; a run
/// with a matching fingerprint resumes from it.
inline DiffusionModel train_diffusion(const Dataset& ds, nn::Surrogate<float>* surrogate, const DiffusionTrainConfig& cfg,
                                      const fs::path& out_dir, const Log& log = {}) {
  LossWeights w = cfg.weights;
  if (!cfg.spectral_loss) w.lambda_spec = 0.0;
  w.validate();
  if (w.lambda_spec > 0 && !surrogate) throw std::invalid_argument("train_diffusion: spectral loss requires a surrogate");
  if (surrogate) surrogate->set_frozen(true);
  fs::create_directories(out_dir);
  const auto ckpt = out_dir / "model.ckpt";
  const std::string fp = diffusion_fingerprint(cfg, ds);

  const auto train = ds.indices(Split::train);
  if (train.empty()) throw std::runtime_error("train_diffusion: empty training split");
  std::vector<SpectralCategory> cats;
  for (auto i : train) cats.push_back(ds.samples[i].category);
  WeightedSampler sampler(sampling_weights(cats));

  DiffusionModel model;
  DiffusionCheckpointState st;
  std::mt19937_64 rng(cfg.seed);
  bool resumed = false;
  if (fs::exists(ckpt)) {
    try {
      DiffusionCheckpointState prev;
      DiffusionModel m = load_diffusion(ckpt, &prev);
      if (prev.fingerprint == fp) {
        model = std::move(m);
        st = prev;
        std::istringstream(st.rng_state) >> rng;
        resumed = true;
        log("diffusion: resuming ", out_dir.string(), " after epoch ", st.epochs_done);
      }
    } catch (const std::exception& e) {
      log("diffusion: ignoring unreadable checkpoint ", ckpt.string(), ": ", e.what());
    }
  }
  if (!resumed) {
    model = DiffusionModel(cfg.net, cfg.timesteps, w, hash_seed(cfg.seed, 0xd1ff));
    st.fingerprint = fp;
  }
  nn::Adam<float> opt(model.net.parameters());
  if (resumed) restore_optimizer(ckpt, opt);

  const int steps_per_epoch = static_cast<int>((train.size() + cfg.batch_size - 1) / cfg.batch_size);
  write_json(out_dir / "config.json", {{"diffusion", to_json(cfg)}, {"fingerprint", fp}});
  auto save = [&] {
    std::ostringstream rs;
    rs << rng;
    st.rng_state = rs.str();
    st.optimizer_steps = opt.steps();
    save_diffusion(ckpt, model, &opt, st);
  };

  for (int epoch = st.epochs_done; epoch < cfg.epochs; ++epoch) {
    const auto t0 = Clock::now();
    const double lr = nn::lr_at(epoch, cfg.epochs, cfg.lr);
    LossParts acc;
    for (int step = 0; step < steps_per_epoch; ++step) {
      std::vector<std::size_t> idx;
      for (int k = 0; k < cfg.batch_size; ++k) idx.push_back(train[sampler(rng)]);
      const auto batch = make_batch<float>(ds, idx);
      const auto noise = draw_step_noise<float>(batch.x0.shape(), model.schedule, w.cfg_dropout, rng);
      opt.zero_grad();
      LossParts p;
      try {
        p = training_loss(model.net, surrogate, batch, noise, w, model.schedule);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError(std::string(e.what()) + " at epoch " + std::to_string(epoch + 1) + ", step " +
                             std::to_string(step + 1));
      }
      opt.step(lr);
      acc.total += p.total;
      acc.r += p.r;
      acc.g += p.g;
      acc.b += p.b;
      acc.spec += p.spec;
    }
    const double k = steps_per_epoch;
    EpochStats es{epoch + 1, lr, {acc.total / k, acc.r / k, acc.g / k, acc.b / k, acc.spec / k}, seconds_since(t0)};
    st.history.push_back(to_json(es));
    st.epochs_done = epoch + 1;
    log("diffusion epoch ", es.epoch, "/", cfg.epochs, " lr ", lr, " loss ", es.mean.total, " (R ", es.mean.r, " G ",
        es.mean.g, " B ", es.mean.b, " spec ", es.mean.spec, ") ", static_cast<int>(es.seconds), " s");
    if (st.epochs_done % cfg.checkpoint_every == 0 || st.epochs_done == cfg.epochs) {
      save();
      if (st.epochs_done != cfg.epochs) {
        char name[32];
        std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", st.epochs_done);
        fs::copy_file(ckpt, out_dir / name, fs::copy_options::overwrite_existing);
      }
    }
  }
  if (!fs::exists(ckpt)) save();
  write_json(out_dir / "train_log.json", {{"fingerprint", fp}, {"history", st.history}});
  return model;
}

// ---------------------------------------------------------------------------
// Generation

struct DesignCondition {
  Spectrum target;
  Material material;
};

struct GeneratedDesign {
  std::uint64_t seed = 0;
  EncodedImage image;
  MetaAtom atom;
  FabricabilityReport fabrication;
  Spectrum resimulated;
  double baa = 0;
  double mse = 0;
};

/// Samples one design per (condition, seed) job in batches, decodes each
/// image and re-simulates it with the oracle.
inline std::vector<GeneratedDesign> generate_designs(DiffusionModel& model, const std::vector<DesignCondition>& conds,
                                                     const std::vector<std::uint64_t>& seeds, double cell_size_mm,
                                                     int batch = 16, const Log& log = {}) {
  if (conds.size() != seeds.size()) throw std::invalid_argument("generate_designs: one seed per condition");
  std::vector<GeneratedDesign> out;
  for (std::size_t start = 0; start < conds.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(conds.size(), start + static_cast<std::size_t>(batch));
    const int n = static_cast<int>(end - start);
    Tensor<float> spectra({n, kSpectrumPoints}), mats({n, nn::kMaterialFeatures});
    for (int i = 0; i < n; ++i) {
      const auto& c = conds[start + static_cast<std::size_t>(i)];
      for (int p = 0; p < kSpectrumPoints; ++p) spectra[static_cast<std::size_t>(i) * kSpectrumPoints + p] = static_cast<float>(c.target[p]);
      standardized_material(c.material, mats.data() + static_cast<std::size_t>(i) * nn::kMaterialFeatures);
    }
    const auto t0 = Clock::now();
    const auto imgs = sample_images(model.net, spectra, mats, model.schedule, model.weights.guidance_w,
                                    std::span<const std::uint64_t>(seeds.data() + start, static_cast<std::size_t>(n)));
    for (int i = 0; i < n; ++i) {
      const auto& c = conds[start + static_cast<std::size_t>(i)];
      GeneratedDesign d;
      d.seed = seeds[start + static_cast<std::size_t>(i)];
      d.image = to_encoded_image(imgs, i);
      d.atom = decode(d.image, cell_size_mm);
      d.fabrication = check_fabricable(d.atom);
      d.resimulated = reflection_spectrum(d.atom, c.material);
      d.baa = baa(c.target, d.resimulated);
      d.mse = spectral_mse(d.resimulated, c.target);
      out.push_back(std::move(d));
    }
    log("generated ", end, "/", conds.size(), " designs (", seconds_since(t0), " s for ", n, ")");
  }
  return out;
}

inline nlohmann::json spectrum_json(const Spectrum& s) {
  return std::vector<double>(s.values.begin(), s.values.end());
}

inline Spectrum spectrum_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Spectrum::from(v);
}

inline nlohmann::json to_json(const GeneratedDesign& d) {
  return {{"seed", d.seed},
          {"meta_atom", to_json(d.atom)},
          {"fabricable", d.fabrication.passed},
          {"min_feature_mm", std::isfinite(d.fabrication.min_feature_mm) ? nlohmann::json(d.fabrication.min_feature_mm)
                                                                          : nlohmann::json("inf")},
          {"resimulated", spectrum_json(d.resimulated)},
          {"baa_normalized", d.baa},
          {"mse", d.mse}};
}

// ---------------------------------------------------------------------------
// Evaluation on held-out conditions

/// Deterministically chosen test-split samples used as target conditions.
inline std::vector<std::size_t> held_out_conditions(const Dataset& ds, int count, std::uint64_t seed) {
  auto test = ds.indices(Split::test);
  std::mt19937_64 rng(seed);
  std::shuffle(test.begin(), test.end(), rng);
  if (static_cast<int>(test.size()) > count) test.resize(static_cast<std::size_t>(count));
  return test;
}

struct HeldOutResult {
  std::vector<std::size_t> sample_indices;
  std::vector<GeneratedDesign> designs;
  EvaluationReport report;
  double fabricable_fraction = 0;
  double seconds = 0;
};

inline HeldOutResult evaluate_held_out(DiffusionModel& model, const Dataset& ds, const EvalConfig& cfg, const Log& log = {}) {
  const auto t0 = Clock::now();
  HeldOutResult r;
  r.sample_indices = held_out_conditions(ds, cfg.conditions, cfg.seed);
  std::vector<DesignCondition> conds;
  std::vector<std::uint64_t> seeds;
  for (std::size_t k = 0; k < r.sample_indices.size(); ++k) {
    const auto& s = ds.samples[r.sample_indices[k]];
    conds.push_back({s.spectrum, s.material});
    seeds.push_back(hash_seed(cfg.seed, k));
  }
  r.designs = generate_designs(model, conds, seeds, ds.config.cell_size_mm, cfg.batch, log);
  std::vector<SpectrumPair> pairs;
  std::vector<Mask> masks;
  std::size_t fab = 0;
  for (std::size_t k = 0; k < r.designs.size(); ++k) {
    pairs.push_back({r.designs[k].resimulated, conds[k].target});
    masks.push_back(r.designs[k].atom.pattern);
    fab += r.designs[k].fabrication.passed ? 1 : 0;
  }
  r.report = evaluate_pairs(pairs, masks, cfg.diversity);
  r.fabricable_fraction = r.designs.empty() ? 0.0 : static_cast<double>(fab) / r.designs.size();
  r.seconds = seconds_since(t0);
  return r;
}

struct DiversityResult {
  std::vector<double> per_condition_diversity;
  std::vector<double> per_condition_pairwise_mse;
  double diversity = 0;
  double pairwise_mse = 0;
  double seconds = 0;
};

/// Several designs per condition: structural diversity within each group and
/// the spread of their re-simulated spectra, averaged over conditions.
inline DiversityResult evaluate_diversity(DiffusionModel& model, const Dataset& ds, const EvalConfig& cfg, const Log& log = {}) {
  const auto t0 = Clock::now();
  DiversityResult r;
  const auto idx = held_out_conditions(ds, cfg.diversity_conditions, hash_seed(cfg.seed, 0xd17));
  std::vector<DesignCondition> conds;
  std::vector<std::uint64_t> seeds;
  for (std::size_t k = 0; k < idx.size(); ++k)
    for (int j = 0; j < cfg.diversity_samples; ++j) {
      conds.push_back({ds.samples[idx[k]].spectrum, ds.samples[idx[k]].material});
      seeds.push_back(hash_seed(hash_seed(cfg.seed, 0xd17 + k), static_cast<std::uint64_t>(j)));
    }
  const auto designs = generate_designs(model, conds, seeds, ds.config.cell_size_mm, cfg.batch, log);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::vector<Mask> masks;
    std::vector<Spectrum> spectra;
    for (int j = 0; j < cfg.diversity_samples; ++j) {
      const auto& d = designs[k * static_cast<std::size_t>(cfg.diversity_samples) + static_cast<std::size_t>(j)];
      masks.push_back(d.atom.pattern);
      spectra.push_back(d.resimulated);
    }
    r.per_condition_diversity.push_back(diversity(masks, cfg.diversity));
    r.per_condition_pairwise_mse.push_back(mean_pairwise_mse(spectra));
  }
  for (std::size_t k = 0; k < idx.size(); ++k) {
    r.diversity += r.per_condition_diversity[k] / static_cast<double>(idx.size());
    r.pairwise_mse += r.per_condition_pairwise_mse[k] / static_cast<double>(idx.size());
  }
  r.seconds = seconds_since(t0);
  return r;
}

}  // namespace metadiff
