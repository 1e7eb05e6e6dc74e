#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "metadiff/config.hpp"
#include "metadiff/dataset.hpp"
#include "metadiff/materials.hpp"
#include "metadiff/pipeline.hpp"
#include "metadiff/plot.hpp"
#include "metadiff/png_io.hpp"
#include "metadiff/spectrum_io.hpp"

namespace metadiff::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr const char* kOutputRootEnv = "METADIFF_OUTPUT_ROOT";

/// Relative output paths are placed under $METADIFF_OUTPUT_ROOT when it is set.
inline fs::path output_path(const std::string& p) {
  fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / path;
  return path;
}

/// Accepts a preset name, an inline JSON object or a path to a JSON file.
inline Material parse_material(const std::string& arg, const std::vector<MaterialPreset>& presets) {
  if (!arg.empty() && arg.front() == '{') return material_from_json(nlohmann::json::parse(arg));
  for (const auto& p : presets)
    if (p.material.name == arg) return p.material;
  if (fs::exists(arg)) return material_from_json(read_json(arg));
  throw std::runtime_error("unknown material '" + arg + "' (not a preset, JSON object or file)");
}

/// "concat" is accepted as shorthand for input_concat.
inline nn::Conditioning parse_conditioning(const std::string& s) {
  return nn::conditioning_from_string(s == "concat" ? "input_concat" : s);
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

struct Options {
  std::string config_path;
  bool quiet = false;

  // forge
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::string materials_path;
  std::vector<std::string> families;
  bool no_images = false;

  // shared paths
  std::string out;
  std::string data;
  std::string surrogate;
  std::string model;

  int epochs = 0;
  std::string conditioning;
  std::string spectral_loss;

  // generate
  std::string target;
  int target_index = 0;
  std::string material;
  int count = 1;

  // evaluate / plot
  std::string generated;
  int conditions = 0;
  bool skip_diversity = false;
  std::vector<std::string> cells;
  std::string title;
};

class Runner {
 public:
  Runner(const Options& o, std::ostream& out, std::ostream& err) : o_(o), out_(out), log_{o.quiet ? nullptr : &err} {}

  RunConfig config() const {
    RunConfig c = o_.config_path.empty() ? RunConfig{} : load_run_config(o_.config_path);
    return c;
  }

  int forge() {
    RunConfig c = config();
    if (o_.n) c.forge.n = o_.n;
    if (o_.seed) c.forge.seed = o_.seed;
    if (!o_.materials_path.empty()) c.forge.materials = load_material_presets(o_.materials_path);
    if (!o_.families.empty()) {
      c.forge.families.clear();
      for (const auto& f : o_.families) c.forge.families.push_back(family_from_string(f));
    }
    const auto dir = output_path(o_.out);
    log_("forging ", c.forge.n, " samples (seed ", c.forge.seed, ")");
    const Dataset ds = build_dataset(c.forge);
    write_dataset(ds, dir, !o_.no_images);
    write_json(dir / "config.json", to_json(c));
    for (const auto& w : ds.warnings) log_("warning: ", w);
    out_ << "forged " << ds.samples.size() << " samples into " << dir.string() << '\n';
    return kExitOk;
  }

  int train_surrogate() {
    RunConfig c = config();
    if (o_.epochs) c.surrogate.epochs = o_.epochs;
    if (o_.seed) c.surrogate.seed = o_.seed;
    const Dataset ds = load_dataset(o_.data);
    const auto dir = output_path(o_.out);
    fs::create_directories(dir);
    write_json(dir / "config.json", to_json(c));
    nn::InitRng rng(c.surrogate.seed);
    nn::Surrogate<float> net(c.surrogate.net, rng);
    const auto rep = train_surrogate_model(net, ds, c.surrogate);
    save_surrogate(dir / "surrogate.ckpt", net, to_json(rep));
    write_json(dir / "report.json", to_json(rep));
    out_ << "surrogate held-out MSE " << rep.test_mse << " (" << dir.string() << ")\n";
    return kExitOk;
  }

  int train_diffusion() {
    RunConfig c = config();
    apply_diffusion_overrides(c);
    const Dataset ds = load_dataset(o_.data);
    std::optional<nn::Surrogate<float>> sur;
    if (c.diffusion.spectral_loss) {
      if (o_.surrogate.empty()) throw std::runtime_error("--surrogate is required when the spectral loss is on");
      sur = load_surrogate(o_.surrogate);
    }
    const auto dir = output_path(o_.out);
    metadiff::train_diffusion(ds, sur ? &*sur : nullptr, c.diffusion, dir, log_);
    write_json(dir / "config.json", to_json(c));
    out_ << "diffusion model written to " << (dir / "model.ckpt").string() << '\n';
    return kExitOk;
  }

  int generate() {
    RunConfig c = config();
    if (o_.count < 1) throw std::invalid_argument("--n must be >= 1");
    const auto targets = read_spectra(o_.target);
    if (o_.target_index < 0 || o_.target_index >= static_cast<int>(targets.size()))
      throw std::runtime_error("--index " + std::to_string(o_.target_index) + " out of range for " + o_.target);
    const auto presets = o_.materials_path.empty() ? default_material_presets() : load_material_presets(o_.materials_path);
    const Material mat = parse_material(o_.material, presets);
    DiffusionModel model = load_diffusion(o_.model);
    const Spectrum& target = targets[static_cast<std::size_t>(o_.target_index)];

    std::vector<DesignCondition> conds(static_cast<std::size_t>(o_.count), DesignCondition{target, mat});
    std::vector<std::uint64_t> seeds;
    for (int k = 0; k < o_.count; ++k) seeds.push_back(hash_seed(o_.seed, static_cast<std::uint64_t>(k)));
    const auto t0 = Clock::now();
    const auto designs = generate_designs(model, conds, seeds, c.forge.cell_size_mm, c.eval.batch, log_);
    const double secs = seconds_since(t0);

    const auto dir = output_path(o_.out);
    fs::create_directories(dir);
    nlohmann::json list = nlohmann::json::array();
    std::vector<Spectrum> resim;
    std::vector<PlotCurve> curves;
    for (std::size_t k = 0; k < designs.size(); ++k) {
      char name[32];
      std::snprintf(name, sizeof(name), "design_%03zu.png", k);
      write_png(dir / name, designs[k].image);
      auto j = to_json(designs[k]);
      j["image"] = name;
      list.push_back(std::move(j));
      resim.push_back(designs[k].resimulated);
      curves.push_back({"design " + std::to_string(k), designs[k].resimulated});
    }
    write_spectra(dir / "resimulated.bin", resim);
    write_spectra(dir / "target.bin", {target});
    plot_comparison(target, curves, dir / "comparison.svg", "generated vs target");
    std::vector<SpectrumPair> pairs;
    for (const auto& d : designs) pairs.push_back({d.resimulated, target});
    std::vector<Mask> masks;
    for (const auto& d : designs) masks.push_back(d.atom.pattern);
    const auto rep = evaluate_pairs(pairs, masks, c.eval.diversity);
    write_json(dir / "report.json", {{"target", o_.target},
                                      {"target_index", o_.target_index},
                                      {"material", to_json(mat)},
                                      {"seed", o_.seed},
                                      {"model", o_.model},
                                      {"designs", list},
                                      {"summary", to_json(rep, c.eval.diversity)},
                                      {"seconds", secs},
                                      {"seconds_per_design", secs / static_cast<double>(designs.size())}});
    write_json(dir / "config.json", to_json(c));
    out_ << designs.size() << " designs in " << secs << " s, mean BAA " << rep.baa_normalized << ", mean MSE " << rep.mse
         << " (" << dir.string() << ")\n";
    return kExitOk;
  }

  int evaluate() {
    RunConfig c = config();
    if (o_.conditions) c.eval.conditions = o_.conditions;
    const auto dir = output_path(o_.out);
    nlohmann::json report;
    if (!o_.generated.empty()) {
      // Pure metric evaluation of a generated set against its targets.
      const auto gen = read_spectra(o_.generated);
      const auto tgt = read_spectra(o_.target);
      if (gen.size() != tgt.size() && tgt.size() != 1)
        throw std::runtime_error("evaluate: " + std::to_string(gen.size()) + " generated vs " + std::to_string(tgt.size()) +
                                 " target spectra");
      std::vector<SpectrumPair> pairs;
      for (std::size_t k = 0; k < gen.size(); ++k) pairs.push_back({gen[k], tgt.size() == 1 ? tgt[0] : tgt[k]});
      const auto rep = evaluate_pairs(pairs, {}, c.eval.diversity);
      report = to_json(rep, c.eval.diversity);
    } else {
      const Dataset ds = load_dataset(o_.data);
      DiffusionModel model = load_diffusion(o_.model);
      report = evaluate_model(model, ds, c.eval, !o_.skip_diversity);
      report["model"] = o_.model;
    }
    write_json(dir / "report.json", report);
    write_json(dir / "config.json", to_json(c));
    out_ << report.dump(2) << '\n';
    return kExitOk;
  }

  int ablate() {
    RunConfig c = config();
    apply_diffusion_overrides(c);
    if (o_.conditions) c.eval.conditions = o_.conditions;
    const Dataset ds = load_dataset(o_.data);
    std::optional<nn::Surrogate<float>> sur;
    const auto dir = output_path(o_.out);
    fs::create_directories(dir);
    std::vector<std::string> cells = o_.cells;
    if (cells.empty()) cells = {"film+spec", "film+nospec", "concat+spec", "concat+nospec"};
    nlohmann::json rows = nlohmann::json::array();
    std::string md = "| conditioning | spectral loss | MSE | AAE | BAA | valid | diversity |\n|---|---|---|---|---|---|---|\n";
    for (const auto& cell : cells) {
      const auto plus = cell.find('+');
      if (plus == std::string::npos) throw std::invalid_argument("bad ablation cell '" + cell + "'");
      DiffusionTrainConfig dc = c.diffusion;
      dc.net.conditioning = parse_conditioning(cell.substr(0, plus));
      const std::string sl = cell.substr(plus + 1);
      if (sl != "spec" && sl != "nospec") throw std::invalid_argument("bad ablation cell '" + cell + "'");
      dc.spectral_loss = sl == "spec";
      if (dc.spectral_loss && !sur) {
        if (o_.surrogate.empty()) throw std::runtime_error("--surrogate is required for spectral-loss cells");
        sur = load_surrogate(o_.surrogate);
      }
      log_("ablation cell ", cell);
      DiffusionModel model = metadiff::train_diffusion(ds, dc.spectral_loss ? &*sur : nullptr, dc, dir / cell, log_);
      auto rep = evaluate_model(model, ds, c.eval, !o_.skip_diversity);
      rep["cell"] = cell;
      rep["conditioning"] = nn::to_string(dc.net.conditioning);
      rep["spectral_loss"] = dc.spectral_loss ? "on" : "off";
      write_json(dir / cell / "report.json", rep);
      const auto& h = rep.at("held_out");
      char line[256];
      std::snprintf(line, sizeof(line), "| %s | %s | %.5f | %.5f | %.4f | %.3f | %s |\n", rep["conditioning"].get<std::string>().c_str(),
                    dc.spectral_loss ? "on" : "off", h.at("mse").get<double>(), h.at("aae").get<double>(),
                    h.at("baa_normalized").get<double>(), h.at("valid_fraction").get<double>(),
                    rep.contains("diversity") ? std::to_string(rep["diversity"]["diversity"].get<double>()).c_str() : "-");
      md += line;
      rows.push_back(std::move(rep));
    }
    write_json(dir / "ablation.json", {{"cells", rows}});
    write_text(dir / "ablation.md", md);
    write_json(dir / "config.json", to_json(c));
    out_ << md;
    return kExitOk;
  }

  int plot() {
    const auto targets = read_spectra(o_.target);
    if (o_.target_index < 0 || o_.target_index >= static_cast<int>(targets.size()))
      throw std::runtime_error("--index out of range for " + o_.target);
    std::vector<PlotCurve> curves;
    if (!o_.generated.empty()) {
      const auto gen = read_spectra(o_.generated);
      for (std::size_t k = 0; k < gen.size(); ++k) curves.push_back({"generated " + std::to_string(k + 1), gen[k]});
    }
    const auto path = output_path(o_.out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    plot_comparison(targets[static_cast<std::size_t>(o_.target_index)], curves, path, o_.title);
    out_ << "wrote " << path.string() << '\n';
    return kExitOk;
  }

 private:
  void apply_diffusion_overrides(RunConfig& c) const {
    if (o_.epochs) c.diffusion.epochs = o_.epochs;
    if (o_.seed) c.diffusion.seed = o_.seed;
    if (!o_.conditioning.empty()) c.diffusion.net.conditioning = parse_conditioning(o_.conditioning);
    if (!o_.spectral_loss.empty()) c.diffusion.spectral_loss = detail::parse_on_off(o_.spectral_loss);
  }

  SurrogateReport train_surrogate_model(nn::Surrogate<float>& net, const Dataset& ds, const SurrogateTrainConfig& cfg) {
    return metadiff::train_surrogate(net, ds, cfg, log_);
  }

  nlohmann::json evaluate_model(DiffusionModel& model, const Dataset& ds, const EvalConfig& cfg, bool with_diversity) {
    const auto held = evaluate_held_out(model, ds, cfg, log_);
    nlohmann::json designs = nlohmann::json::array();
    for (std::size_t k = 0; k < held.designs.size(); ++k) {
      auto j = to_json(held.designs[k]);
      j["sample"] = held.sample_indices[k];
      designs.push_back(std::move(j));
    }
    nlohmann::json r{{"held_out", to_json(held.report, cfg.diversity)},
                     {"fabricable_fraction", held.fabricable_fraction},
                     {"seconds", held.seconds},
                     {"designs", designs}};
    if (with_diversity) {
      const auto div = evaluate_diversity(model, ds, cfg, log_);
      r["diversity"] = {{"diversity", div.diversity},
                        {"pairwise_mse", div.pairwise_mse},
                        {"per_condition_diversity", div.per_condition_diversity},
                        {"per_condition_pairwise_mse", div.per_condition_pairwise_mse},
                        {"seconds", div.seconds}};
    }
    return r;
  }

  const Options& o_;
  std::ostream& out_;
  Log log_;
};

/// Entry point: 0 on success, 1 on runtime failure, 2 on usage error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Options o;
  CLI::App app{"Diffusion-based inverse design of metasurface absorbers"};
  app.name("metadiff");
  app.require_subcommand(1);
  app.add_option("--config", o.config_path, "Run config JSON (schema metadiff.run/1)")->check(CLI::ExistingFile);
  app.add_flag("-q,--quiet", o.quiet, "Suppress progress output");

  auto* forge = app.add_subcommand("forge", "Build a synthetic dataset labelled by the analytic oracle");
  forge->add_option("--n", o.n, "Number of samples");
  forge->add_option("--seed", o.seed, "Dataset seed");
  forge->add_option("--out", o.out, "Output directory")->required();
  forge->add_option("--materials", o.materials_path, "Material preset table (JSON)")->check(CLI::ExistingFile);
  forge->add_option("--families", o.families, "Subset of pattern families");
  forge->add_flag("--no-images", o.no_images, "Skip writing per-sample PNG files");

  auto* ts = app.add_subcommand("train-surrogate", "Fit the spectral surrogate on the training split");
  ts->add_option("--data", o.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ts->add_option("--out", o.out, "Output directory")->required();
  ts->add_option("--epochs", o.epochs, "Override epochs");
  ts->add_option("--seed", o.seed, "Override seed");

  auto* td = app.add_subcommand("train-diffusion", "Train the conditional diffusion model");
  td->add_option("--data", o.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  td->add_option("--surrogate", o.surrogate, "Surrogate checkpoint")->check(CLI::ExistingFile);
  td->add_option("--out", o.out, "Output directory")->required();
  td->add_option("--epochs", o.epochs, "Override epochs");
  td->add_option("--seed", o.seed, "Override seed");
  td->add_option("--conditioning", o.conditioning, "film or input_concat (alias concat)")
      ->check(CLI::IsMember({"film", "input_concat", "concat"}));
  td->add_option("--spectral-loss", o.spectral_loss, "on or off")->check(CLI::IsMember({"on", "off"}));

  auto* gen = app.add_subcommand("generate", "Sample designs for a target spectrum");
  gen->add_option("--model", o.model, "Diffusion checkpoint")->required()->check(CLI::ExistingFile);
  gen->add_option("--target", o.target, "Target spectrum file (float32 LE, 201 values per spectrum)")
      ->required()
      ->check(CLI::ExistingFile);
  gen->add_option("--index", o.target_index, "Spectrum index within the target file");
  gen->add_option("--material", o.material, "Preset name, JSON object or JSON file")->required();
  gen->add_option("--materials", o.materials_path, "Material preset table (JSON)")->check(CLI::ExistingFile);
  gen->add_option("--n", o.count, "Number of designs")->check(CLI::PositiveNumber);
  gen->add_option("--seed", o.seed, "Sampling seed");
  gen->add_option("--out", o.out, "Output directory")->required();

  auto* ev = app.add_subcommand("evaluate", "Score a model on held-out conditions, or a generated set against targets");
  ev->add_option("--model", o.model, "Diffusion checkpoint")->check(CLI::ExistingFile);
  ev->add_option("--data", o.data, "Dataset directory")->check(CLI::ExistingDirectory);
  ev->add_option("--generated", o.generated, "Generated spectra file")->check(CLI::ExistingFile);
  ev->add_option("--target", o.target, "Target spectra file")->check(CLI::ExistingFile);
  ev->add_option("--conditions", o.conditions, "Number of held-out conditions");
  ev->add_flag("--skip-diversity", o.skip_diversity, "Skip the multi-sample diversity study");
  ev->add_option("--out", o.out, "Output directory")->required();

  auto* ab = app.add_subcommand("ablate", "Train and score the conditioning x spectral-loss grid");
  ab->add_option("--data", o.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ab->add_option("--surrogate", o.surrogate, "Surrogate checkpoint")->check(CLI::ExistingFile);
  ab->add_option("--out", o.out, "Output directory")->required();
  ab->add_option("--epochs", o.epochs, "Override epochs");
  ab->add_option("--seed", o.seed, "Override training seed");
  ab->add_option("--conditions", o.conditions, "Number of held-out conditions");
  ab->add_option("--cells", o.cells, "Subset of cells, e.g. film+spec concat+nospec");
  ab->add_flag("--skip-diversity", o.skip_diversity, "Skip the multi-sample diversity study");

  auto* pl = app.add_subcommand("plot", "Write an SVG comparison of target and generated spectra");
  pl->add_option("--target", o.target, "Target spectra file")->required()->check(CLI::ExistingFile);
  pl->add_option("--index", o.target_index, "Spectrum index within the target file");
  pl->add_option("--generated", o.generated, "Generated spectra file")->check(CLI::ExistingFile);
  pl->add_option("--title", o.title, "Figure title");
  pl->add_option("--out", o.out, "Output SVG path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "metadiff: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  if (ev->parsed()) {
    const bool model_mode = !o.model.empty() && !o.data.empty();
    const bool set_mode = !o.generated.empty() && !o.target.empty();
    if (model_mode == set_mode) {
      err << "metadiff evaluate: pass either --model and --data, or --generated and --target\n";
      return kExitUsage;
    }
  }

  Runner r(o, out, err);
  try {
    if (forge->parsed()) return r.forge();
    if (ts->parsed()) return r.train_surrogate();
    if (td->parsed()) return r.train_diffusion();
    if (gen->parsed()) return r.generate();
    if (ev->parsed()) return r.evaluate();
    if (ab->parsed()) return r.ablate();
    if (pl->parsed()) return r.plot();
  } catch (const std::exception& e) {
    err << "metadiff: error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace metadiff::cli
