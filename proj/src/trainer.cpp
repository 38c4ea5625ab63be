#include "dfdg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "dfdg/errors.hpp"
#include "dfdg/losses.hpp"

namespace dfdg {

namespace {

// Stream tags under the run seed.
constexpr std::uint64_t kModelTag = 1;
constexpr std::uint64_t kBatchTag = 2;
constexpr std::uint64_t kStrategyTag = 3;
constexpr std::uint64_t kMaskTag = 4;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string_view to_string(StrategyMode mode) {
  switch (mode) {
    case StrategyMode::alternate: return "alternate";
    case StrategyMode::align_only: return "align_only";
    case StrategyMode::mask_only: return "mask_only";
    case StrategyMode::ce_only: return "ce_only";
    case StrategyMode::even_odd: return "even_odd";
    case StrategyMode::combined: return "combined";
  }
  return "?";
}

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::align: return "align";
    case Strategy::mask: return "mask";
    case Strategy::plain_ce: return "plain_ce";
    case Strategy::mask_align: return "mask_align";
  }
  return "?";
}

StrategyMode parse_strategy_mode(std::string_view name) {
  for (auto m : {StrategyMode::alternate, StrategyMode::align_only, StrategyMode::mask_only, StrategyMode::ce_only,
                 StrategyMode::even_odd, StrategyMode::combined}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown strategy mode '" + std::string(name) +
                    "' (expected alternate, align_only, mask_only, ce_only, even_odd or combined)");
}

Model build_for(const ModelSpec& spec, const Shape& input_shape, std::size_t num_classes, std::uint64_t seed) {
  if (spec.kind == Architecture::Kind::mlp) {
    std::vector<std::size_t> sizes{numel(input_shape)};
    sizes.insert(sizes.end(), spec.hidden.begin(), spec.hidden.end());
    return build_mlp(sizes, num_classes, seed, input_shape);
  }
  if (input_shape.size() != 2) {
    throw ConfigError("cnn1d needs inputs shaped [channels, length], got " + to_string(input_shape));
  }
  if (spec.hidden.empty()) throw ConfigError("cnn1d needs at least one conv block");
  std::vector<std::size_t> channels{input_shape[0]};
  channels.insert(channels.end(), spec.hidden.begin(), spec.hidden.end());
  return build_cnn1d(channels, spec.kernel, num_classes, seed, input_shape[1]);
}

// ---- config ---------------------------------------------------------------------

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("train config: " + what);
  };
  require(alpha >= 0.0 && std::isfinite(alpha), "alpha must be finite and >= 0");
  require(m_percent >= 0.0 && m_percent <= 100.0, "m_percent must be in [0, 100]");
  require(q_max >= 0.0 && q_max <= 100.0, "q_max must be in [0, 100]");
  require(sg_n >= 1, "sg_n must be >= 1");
  require(sg_sigma >= 0.0 && std::isfinite(sg_sigma), "sg_sigma must be finite and >= 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(iterations >= 1, "iterations must be >= 1");
  require(base_lr >= 0.0 && std::isfinite(base_lr), "base_lr must be finite and >= 0");
  require(lr_decay_factor >= 0.0 && std::isfinite(lr_decay_factor), "lr_decay_factor must be finite and >= 0");
  require(lr_decay_at_fraction >= 0.0 && lr_decay_at_fraction <= 1.0, "lr_decay_at_fraction must be in [0, 1]");
  require(min_class_ratio > 0.0 && min_class_ratio <= 1.0, "min_class_ratio must be in (0, 1]");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0, 1)");
  require(!model.hidden.empty() || model.kind == Architecture::Kind::mlp, "cnn1d needs conv channels");
  require(model.kind == Architecture::Kind::mlp || model.kernel % 2 == 1, "cnn1d kernel must be odd");
}

nlohmann::json to_json(const TrainConfig& cfg) {
  nlohmann::json model{{"kind", cfg.model.kind == Architecture::Kind::mlp ? "mlp" : "cnn1d"},
                       {"hidden", cfg.model.hidden}};
  if (cfg.model.kind == Architecture::Kind::cnn1d) model["kernel"] = cfg.model.kernel;
  return {{"alpha", cfg.alpha},
          {"m_percent", cfg.m_percent},
          {"q_max", cfg.q_max},
          {"sg_n", cfg.sg_n},
          {"sg_sigma", cfg.sg_sigma},
          {"batch_size", cfg.batch_size},
          {"iterations", cfg.iterations},
          {"base_lr", cfg.base_lr},
          {"lr_decay_factor", cfg.lr_decay_factor},
          {"lr_decay_at_fraction", cfg.lr_decay_at_fraction},
          {"min_class_ratio", cfg.min_class_ratio},
          {"momentum", cfg.momentum},
          {"strategy_mode", std::string(to_string(cfg.strategy_mode))},
          {"saliency_target", cfg.saliency_target == SaliencyTarget::true_label ? "true_label" : "predicted"},
          {"seed", cfg.seed},
          {"model", model}};
}

TrainConfig train_config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("train config: expected a JSON object");
  static const std::set<std::string> known{
      "alpha",     "m_percent",      "q_max",           "sg_n",
      "sg_sigma",  "batch_size",     "iterations",      "base_lr",
      "lr_decay_factor", "lr_decay_at_fraction", "min_class_ratio", "momentum",
      "strategy_mode",   "saliency_target",      "seed",            "model"};
  for (const auto& [key, _] : doc.items()) {
    if (!known.count(key)) throw ConfigError("train config: unknown key '" + key + "'");
  }
  TrainConfig cfg;
  try {
    auto get = [&](const char* key, auto& field) {
      if (doc.contains(key)) field = doc.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    get("alpha", cfg.alpha);
    get("m_percent", cfg.m_percent);
    get("q_max", cfg.q_max);
    get("sg_n", cfg.sg_n);
    get("sg_sigma", cfg.sg_sigma);
    get("batch_size", cfg.batch_size);
    get("iterations", cfg.iterations);
    get("base_lr", cfg.base_lr);
    get("lr_decay_factor", cfg.lr_decay_factor);
    get("lr_decay_at_fraction", cfg.lr_decay_at_fraction);
    get("min_class_ratio", cfg.min_class_ratio);
    get("momentum", cfg.momentum);
    get("seed", cfg.seed);
    if (doc.contains("strategy_mode")) cfg.strategy_mode = parse_strategy_mode(doc["strategy_mode"].get<std::string>());
    if (doc.contains("saliency_target")) {
      const auto t = doc["saliency_target"].get<std::string>();
      if (t == "true_label") {
        cfg.saliency_target = SaliencyTarget::true_label;
      } else if (t == "predicted") {
        cfg.saliency_target = SaliencyTarget::predicted;
      } else {
        throw ConfigError("train config: saliency_target must be true_label or predicted");
      }
    }
    if (doc.contains("model")) {
      const auto& m = doc["model"];
      for (const auto& [key, _] : m.items()) {
        if (key != "kind" && key != "hidden" && key != "kernel") {
          throw ConfigError("train config: unknown model key '" + key + "'");
        }
      }
      const auto kind = m.value("kind", std::string("mlp"));
      if (kind == "mlp") {
        cfg.model.kind = Architecture::Kind::mlp;
      } else if (kind == "cnn1d") {
        cfg.model.kind = Architecture::Kind::cnn1d;
      } else {
        throw ConfigError("train config: model kind must be mlp or cnn1d");
      }
      if (m.contains("hidden")) cfg.model.hidden = m["hidden"].get<std::vector<std::size_t>>();
      if (m.contains("kernel")) cfg.model.kernel = m["kernel"].get<std::size_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return train_config_from_json(doc);
}

// ---- schedule and strategy --------------------------------------------------------

double lr_schedule(double base_lr, std::size_t iter, std::size_t total, double factor, double at_fraction) {
  if (iter >= total) {
    throw ContractError("lr_schedule: iteration " + std::to_string(iter) + " outside [0, " + std::to_string(total) +
                        ")");
  }
  const auto decay_at = static_cast<std::size_t>(std::ceil(at_fraction * static_cast<double>(total)));
  return iter < decay_at ? base_lr : base_lr * factor;
}

Strategy choose_strategy(StrategyMode mode, Rng& rng, std::size_t iteration) {
  switch (mode) {
    case StrategyMode::alternate:
      return std::bernoulli_distribution(0.5)(rng) ? Strategy::align : Strategy::mask;
    case StrategyMode::align_only: return Strategy::align;
    case StrategyMode::mask_only: return Strategy::mask;
    case StrategyMode::ce_only: return Strategy::plain_ce;
    case StrategyMode::even_odd: return iteration % 2 == 0 ? Strategy::align : Strategy::mask;
    case StrategyMode::combined: return Strategy::mask_align;
  }
  throw ConfigError("choose_strategy: unknown mode");
}

// ---- steps ------------------------------------------------------------------------

StepRecord train_step(Model& model, const Batch& batch, Strategy strategy, const TrainConfig& cfg, double lr,
                      Rng& rng, MomentumState& momentum) {
  GradModeGuard recording(true);
  StepRecord rec;
  rec.strategy = strategy;

  const bool masks = strategy == Strategy::mask || strategy == Strategy::mask_align;
  const bool aligns = strategy == Strategy::align || strategy == Strategy::mask_align;

  Batch input = batch;
  if (masks) {
    const MaskConfig mask_cfg{cfg.m_percent, cfg.q_max, cfg.seed};
    const SmoothGradConfig sg_cfg{cfg.sg_n, cfg.sg_sigma, cfg.seed};
    input = augment_batch(batch, model, mask_cfg, sg_cfg, rng, cfg.saliency_target);
  }

  const Tensor logits = model.forward(input.x);
  const Tensor ce = cross_entropy(logits, input.labels);
  Tensor loss = ce;
  rec.ce = ce.item();
  if (aligns) {
    if (cfg.alpha > 0.0) {
      const Tensor align = alignment_loss(SoftLabelBatch{softmax_rows(logits), input.labels});
      rec.align = align.item();
      loss = add(ce, scale(align, cfg.alpha));
    } else {
      NoGradGuard no_grad;
      rec.align = alignment_loss(SoftLabelBatch{softmax_rows(logits.detach()), input.labels}).item();
    }
  }
  rec.loss = loss.item();
  if (!std::isfinite(rec.loss)) {
    std::string msg = "non-finite loss on a " + std::string(to_string(strategy)) + " step: ce=" + fmt(rec.ce);
    if (rec.align) msg += ", align=" + fmt(*rec.align);
    msg += ", total=" + fmt(rec.loss);
    throw NumericError(msg);
  }

  const GradMap grads = backward(loss);
  for (auto& [name, p] : model.params()) {
    auto& v = momentum.velocity[name];
    if (v.empty()) v.assign(p.size(), 0.0);
    const auto g = grads.at(p);
    auto values = p.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      v[i] = cfg.momentum * v[i] + g[i];
      values[i] -= lr * v[i];
    }
  }
  return rec;
}

void TrainHistory::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "iteration,strategy,ce,align,lr,wall_time\n";
  for (const auto& r : records) {
    out << r.iteration << ',' << to_string(r.strategy) << ',' << fmt(r.ce) << ',' << (r.align ? fmt(*r.align) : "")
        << ',' << fmt(r.lr) << ',' << fmt(r.wall_time) << '\n';
  }
  if (!out) throw Error("failed writing " + path.string());
}

TrainResult train(const TrainView& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.size() == 0) throw ContractError("train: empty training set");
  TrainResult result{build_for(cfg.model, data.input_shape(), data.num_classes(), mix_seed(cfg.seed, kModelTag)),
                     {}};
  BatchStream stream(data, cfg.batch_size, cfg.min_class_ratio, make_rng(cfg.seed, kBatchTag));
  Rng strategy_rng = make_rng(cfg.seed, kStrategyTag);
  Rng mask_rng = make_rng(cfg.seed, kMaskTag);
  MomentumState momentum;
  result.history.records.reserve(cfg.iterations);

  const auto start = std::chrono::steady_clock::now();
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const double lr = lr_schedule(cfg.base_lr, it, cfg.iterations, cfg.lr_decay_factor, cfg.lr_decay_at_fraction);
    const Strategy strategy = choose_strategy(cfg.strategy_mode, strategy_rng, it);
    const Batch batch = stream.next();
    StepRecord rec;
    try {
      rec = train_step(result.model, batch, strategy, cfg, lr, mask_rng, momentum);
    } catch (const NumericError& e) {
      throw NumericError("iteration " + std::to_string(it) + ": " + e.what());
    }
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
    result.history.records.push_back({it, rec.strategy, rec.ce, rec.align, lr, elapsed.count()});
  }
  return result;
}

}  // namespace dfdg
