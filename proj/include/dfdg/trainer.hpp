#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfdg/data.hpp"
#include "dfdg/masking.hpp"
#include "dfdg/model.hpp"
#include "dfdg/rng.hpp"

namespace dfdg {

/// How strategies are assigned to batches.
///   alternate:  fair coin per batch between align and mask
///   even_odd:   align on even iterations, mask on odd ones
///   combined:   mask the batch, then apply the alpha-weighted loss
enum class StrategyMode { alternate, align_only, mask_only, ce_only, even_odd, combined };

enum class Strategy { align, mask, plain_ce, mask_align };

std::string_view to_string(StrategyMode mode);
std::string_view to_string(Strategy s);
StrategyMode parse_strategy_mode(std::string_view name);

/// Backbone description; the input shape comes from the dataset.
struct ModelSpec {
  Architecture::Kind kind = Architecture::Kind::mlp;
  std::vector<std::size_t> hidden{32};  // mlp hidden widths or cnn1d conv channels
  std::size_t kernel = 5;               // cnn1d only

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Builds the backbone for a dataset with the given per-sample shape.
Model build_for(const ModelSpec& spec, const Shape& input_shape, std::size_t num_classes, std::uint64_t seed);

struct TrainConfig {
  double alpha = 0.1;
  double m_percent = 50.0;
  double q_max = 70.0;
  int sg_n = 25;
  double sg_sigma = 0.15;
  std::size_t batch_size = 128;
  std::size_t iterations = 500;
  double base_lr = 0.001;
  double lr_decay_factor = 0.1;
  double lr_decay_at_fraction = 0.8;
  double min_class_ratio = 0.5;
  double momentum = 0.9;
  StrategyMode strategy_mode = StrategyMode::alternate;
  SaliencyTarget saliency_target = SaliencyTarget::true_label;
  std::uint64_t seed = 0;
  ModelSpec model;

  /// Throws ConfigError on out-of-range values.
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults; unknown keys are a ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& doc);
TrainConfig load_train_config(const std::filesystem::path& path);

/// base_lr before ceil(at_fraction * total) iterations, base_lr * factor from
/// there on.
double lr_schedule(double base_lr, std::size_t iter, std::size_t total, double factor, double at_fraction);

/// Strategy for one batch. Only `alternate` consumes randomness.
Strategy choose_strategy(StrategyMode mode, Rng& rng, std::size_t iteration = 0);

/// Velocity buffers, keyed by parameter name.
struct MomentumState {
  std::map<std::string, std::vector<double>> velocity;
};

struct StepRecord {
  Strategy strategy = Strategy::plain_ce;
  double ce = 0.0;
  std::optional<double> align;  // present on align and mask_align steps
  double loss = 0.0;
};

/// One optimization step: loss for `strategy` on `batch`, then
/// v <- momentum * v + grad, p <- p - lr * v for every parameter.
/// Throws NumericError (with the loss components) on a non-finite loss.
StepRecord train_step(Model& model, const Batch& batch, Strategy strategy, const TrainConfig& cfg, double lr,
                      Rng& rng, MomentumState& momentum);

struct HistoryRecord {
  std::size_t iteration = 0;
  Strategy strategy = Strategy::plain_ce;
  double ce = 0.0;
  std::optional<double> align;
  double lr = 0.0;
  double wall_time = 0.0;  // seconds since the start of train()
};

struct TrainHistory {
  std::vector<HistoryRecord> records;

  /// Columns iteration,strategy,ce,align,lr,wall_time; align is empty when
  /// absent.
  void write_csv(const std::filesystem::path& path) const;
};

struct TrainResult {
  Model model;
  TrainHistory history;
};

/// Trains a fresh model on domain-free data. Model init, batch sampling,
/// strategy coins and masking draws all derive from cfg.seed.
TrainResult train(const TrainView& data, const TrainConfig& cfg);

}  // namespace dfdg
