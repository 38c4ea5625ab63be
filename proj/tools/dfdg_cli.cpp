// Command-line entry point: dataset generation, training, LODO experiments,
// ablations and exports. Exit codes: 0 success, 1 config/contract/IO error,
// 2 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dfdg/data.hpp"
#include "dfdg/errors.hpp"
#include "dfdg/eval.hpp"
#include "dfdg/saliency.hpp"
#include "dfdg/trainer.hpp"

namespace fs = std::filesystem;
using namespace dfdg;

namespace {

TrainConfig config_or_default(const std::string& path) {
  return path.empty() ? TrainConfig{} : load_train_config(path);
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void warn_dataset(const DomainDataset& ds) {
  for (const auto& w : ds.validate()) std::cerr << "warning: " << w << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain generalization without domain labels: soft-label alignment and saliency masking"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Write a synthetic multi-domain dataset");
  std::string gen_kind = "spurious-gaussian";
  std::string gen_out;
  SpuriousGaussianParams sg_params;
  WaveformParams wf_params;
  std::uint64_t gen_seed = 0;
  std::size_t domains = 4, classes = 3, n_per = 0;
  gen->add_option("--kind", gen_kind, "spurious-gaussian or waveforms")
      ->check(CLI::IsMember({"spurious-gaussian", "waveforms"}));
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--domains", domains, "Number of domains");
  gen->add_option("--classes", classes, "Number of classes");
  gen->add_option("--n-per-class", n_per, "Samples per (domain, class); 0 keeps the generator default");
  gen->add_option("--signal-dims", sg_params.signal_dims, "spurious-gaussian: signal dimensions");
  gen->add_option("--nuisance-dims", sg_params.nuisance_dims, "spurious-gaussian: nuisance dimensions");
  gen->add_option("--nuisance-strength", sg_params.nuisance_strength, "spurious-gaussian: nuisance mean norm");
  gen->add_option("--noise-sd", sg_params.noise_sd, "spurious-gaussian: per-dimension noise sd");
  gen->add_option("--length", wf_params.length, "waveforms: series length");
  gen->add_option("--background-amplitude", wf_params.background_amplitude, "waveforms: background scale");
  gen->add_option("--wave-noise-sd", wf_params.noise_sd, "waveforms: additive noise sd");

  // train
  auto* tr = app.add_subcommand("train", "Train on every row of a dataset (domains stripped)");
  std::string tr_data, tr_config, tr_out;
  tr->add_option("--data", tr_data, "Dataset directory or CSV")->required();
  tr->add_option("--config", tr_config, "TrainConfig JSON (defaults when omitted)");
  tr->add_option("--out", tr_out, "Run directory")->required();

  // lodo
  auto* lodo = app.add_subcommand("lodo", "Leave-one-domain-out experiment");
  std::string lodo_data, lodo_config, lodo_out, lodo_text;
  std::vector<std::string> methods{"ce_only", "align_only", "mask_only", "alternate"};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  LodoOptions lodo_options;
  lodo->add_option("--data", lodo_data, "Dataset directory or CSV")->required();
  lodo->add_option("--config", lodo_config, "TrainConfig JSON (defaults when omitted)");
  lodo->add_option("--methods", methods, "Comma-separated strategy modes")->delimiter(',');
  lodo->add_option("--seeds", seeds, "Comma-separated seeds")->delimiter(',');
  lodo->add_option("--holdout", lodo_options.holdout_fraction, "In-source validation fraction");
  lodo->add_option("--out", lodo_out, "Report JSON")->required();
  lodo->add_option("--text", lodo_text, "Also write the text table here");

  // ablation
  auto* abl = app.add_subcommand("ablation", "Grid of (alpha, m, q_max) LODO runs");
  std::string abl_data, abl_config, abl_grid, abl_out, abl_text;
  std::vector<std::uint64_t> abl_seeds{0, 1, 2};
  LodoOptions abl_options;
  abl->add_option("--data", abl_data, "Dataset directory or CSV")->required();
  abl->add_option("--config", abl_config, "Base TrainConfig JSON");
  abl->add_option("--grid", abl_grid, "Grid JSON: [[alpha, m, q_max], ...]")->required();
  abl->add_option("--seeds", abl_seeds, "Comma-separated seeds")->delimiter(',');
  abl->add_option("--holdout", abl_options.holdout_fraction, "In-source validation fraction");
  abl->add_option("--out", abl_out, "Report JSON")->required();
  abl->add_option("--text", abl_text, "Also write the text table here");

  // saliency-export
  auto* sal = app.add_subcommand("saliency-export", "Vanilla and SmoothGrad maps for K samples");
  std::string sal_ckpt, sal_data, sal_out;
  std::size_t sal_samples = 1;
  SmoothGradConfig sal_cfg;
  sal->add_option("--checkpoint", sal_ckpt, "Checkpoint JSON")->required();
  sal->add_option("--data", sal_data, "Dataset directory or CSV")->required();
  sal->add_option("--samples", sal_samples, "Number of evenly spaced rows to export");
  sal->add_option("--out", sal_out, "Output CSV; sample k goes to <stem>_<k><ext>")->required();
  sal->add_option("--sg-n", sal_cfg.n, "SmoothGrad replicates");
  sal->add_option("--sg-sigma", sal_cfg.sigma, "SmoothGrad noise fraction");
  sal->add_option("--seed", sal_cfg.seed, "SmoothGrad seed");

  // export-features
  auto* feat = app.add_subcommand("export-features", "Penultimate-layer features as CSV");
  std::string feat_ckpt, feat_data, feat_out;
  feat->add_option("--checkpoint", feat_ckpt, "Checkpoint JSON")->required();
  feat->add_option("--data", feat_data, "Dataset directory or CSV")->required();
  feat->add_option("--out", feat_out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      if (gen_kind == "spurious-gaussian") {
        sg_params.num_domains = domains;
        sg_params.classes = classes;
        sg_params.seed = gen_seed;
        if (n_per) sg_params.n_per_domain_class = n_per;
        save_dataset(generate_spurious_gaussian(sg_params), gen_out);
      } else {
        wf_params.num_domains = domains;
        wf_params.classes = classes;
        wf_params.seed = gen_seed;
        if (n_per) wf_params.n_per_domain_class = n_per;
        save_dataset(generate_shifted_waveforms(wf_params), gen_out);
      }
    } else if (*tr) {
      const DomainDataset ds = load_dataset(tr_data);
      warn_dataset(ds);
      const TrainConfig cfg = config_or_default(tr_config);
      const TrainView view = strip_domains(ds);
      const TrainResult result = train(view, cfg);
      fs::create_directories(tr_out);
      save_checkpoint(result.model, fs::path(tr_out) / "checkpoint.json");
      result.history.write_csv(fs::path(tr_out) / "history.csv");
      write_json(to_json(cfg), fs::path(tr_out) / "config.json");
      std::printf("train accuracy %.4f\n", evaluate(result.model, view));
    } else if (*lodo) {
      const DomainDataset ds = load_dataset(lodo_data);
      warn_dataset(ds);
      std::vector<StrategyMode> modes;
      for (const auto& m : methods) modes.push_back(parse_strategy_mode(m));
      const RunReport report = lodo_experiment(ds, config_or_default(lodo_config), modes, seeds, lodo_options);
      write_json(to_json(report), lodo_out);
      const std::string text = to_text(report);
      if (!lodo_text.empty()) std::ofstream(lodo_text, std::ios::binary) << text;
      std::cout << text;
    } else if (*abl) {
      const DomainDataset ds = load_dataset(abl_data);
      warn_dataset(ds);
      const auto grid = grid_from_json(read_json(abl_grid));
      const AblationReport report = ablation_grid(ds, config_or_default(abl_config), grid, abl_seeds, abl_options);
      write_json(to_json(report), abl_out);
      const std::string text = to_text(report);
      if (!abl_text.empty()) std::ofstream(abl_text, std::ios::binary) << text;
      std::cout << text;
    } else if (*sal) {
      const Model model = load_checkpoint(sal_ckpt);
      const DomainDataset ds = load_dataset(sal_data);
      if (ds.input_shape != model.input_shape()) {
        throw ConfigError("dataset shape " + to_string(ds.input_shape) + " does not match the model input " +
                          to_string(model.input_shape()));
      }
      if (sal_samples == 0 || sal_samples > ds.size()) {
        throw ConfigError("--samples must be in [1, " + std::to_string(ds.size()) + "]");
      }
      const fs::path out(sal_out);
      for (std::size_t k = 0; k < sal_samples; ++k) {
        const std::size_t row = k * ds.size() / sal_samples;
        const auto values = ds.row(row);
        const Tensor x(ds.input_shape, std::vector<double>(values.begin(), values.end()));
        const int c = ds.y[row];
        const auto file = out.parent_path() / (out.stem().string() + "_" + std::to_string(k) + out.extension().string());
        write_saliency_csv(file, values, vanilla_saliency(model, x, c), smoothgrad(model, x, c, sal_cfg));
      }
    } else if (*feat) {
      const Model model = load_checkpoint(feat_ckpt);
      const DomainDataset ds = load_dataset(feat_data);
      if (ds.input_shape != model.input_shape()) {
        throw ConfigError("dataset shape " + to_string(ds.input_shape) + " does not match the model input " +
                          to_string(model.input_shape()));
      }
      export_features(model, ds, feat_out);
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
