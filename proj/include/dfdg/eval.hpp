#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfdg/data.hpp"
#include "dfdg/model.hpp"
#include "dfdg/saliency.hpp"
#include "dfdg/trainer.hpp"

namespace dfdg {

/// Row-wise argmax of logits; ties go to the lowest class index.
std::vector<int> predict(const Model& model, const Tensor& x);

/// Fraction of rows whose prediction equals the label. Throws ContractError
/// on an empty set.
double accuracy(const Model& model, const Tensor& x, std::span<const int> labels);
double evaluate(const Model& model, const DomainDataset& test);
double evaluate(const Model& model, const TrainView& data);

/// One (target, method) cell: per-seed results in seed order.
struct ReportCell {
  std::string target;
  std::string method;
  std::vector<double> target_accuracy;
  std::vector<double> heldin_accuracy;  // in-source holdout, same seeds
  double mean = 0.0;
  double heldin_mean = 0.0;
};

struct MethodSummary {
  std::string method;
  double mean = 0.0;         // mean over targets of the cell means
  double heldin_mean = 0.0;  // same for the held-in validation accuracy
};

struct RunReport {
  std::vector<std::string> targets;
  std::vector<std::string> methods;
  std::vector<std::uint64_t> seeds;
  std::vector<ReportCell> cells;  // target-major
  std::vector<MethodSummary> footer;
  std::string fingerprint;

  const ReportCell& cell(const std::string& target, const std::string& method) const;
  const MethodSummary& summary(const std::string& method) const;
};

/// Recomputes every mean from the per-seed values and checks seed counts.
/// Throws ContractError on a mismatch above 1e-12.
void verify_report(const RunReport& report);

/// Hex digest of the config, the dataset metadata and the dataset contents.
std::string config_fingerprint(const TrainConfig& cfg, const DomainDataset& ds);

struct LodoOptions {
  double holdout_fraction = 0.1;
};

/// Every domain in turn is the target. For each (target, method, seed) a
/// model is trained on the remaining domains (minus an in-source holdout)
/// with strategy_mode = method and seed = seed, then scored on the target.
RunReport lodo_experiment(const DomainDataset& ds, const TrainConfig& cfg, const std::vector<StrategyMode>& methods,
                          const std::vector<std::uint64_t>& seeds, const LodoOptions& options = {});

struct GridPoint {
  double alpha = 0.0;
  double m_percent = 0.0;
  double q_max = 0.0;
};

/// Strategy mode realizing a grid point: alignment is on when alpha > 0,
/// masking when both m and q_max are > 0.
StrategyMode mode_for(const GridPoint& p);

struct AblationRow {
  GridPoint point;
  StrategyMode mode;
  RunReport report;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::string fingerprint;
};

AblationReport ablation_grid(const DomainDataset& ds, const TrainConfig& base_cfg, const std::vector<GridPoint>& grid,
                             const std::vector<std::uint64_t>& seeds, const LodoOptions& options = {});
std::vector<GridPoint> grid_from_json(const nlohmann::json& doc);

nlohmann::json to_json(const RunReport& report);
nlohmann::json to_json(const AblationReport& report);
/// Methods as rows, targets as columns, then Avg and held-in Avg.
std::string to_text(const RunReport& report);
/// One row per grid point; zero hyperparameters print as '-'.
std::string to_text(const AblationReport& report);

/// Penultimate-layer activations as CSV: domain,label,f0..f{w-1}.
void export_features(const Model& model, const DomainDataset& held, const std::filesystem::path& path);

/// CSV with columns index,value,vanilla,smoothgrad for one sample.
void write_saliency_csv(const std::filesystem::path& path, std::span<const double> x, const SaliencyMap& vanilla,
                        const SaliencyMap& smooth);

/// Writes JSON with a trailing newline.
void write_json(const nlohmann::json& doc, const std::filesystem::path& path);

}  // namespace dfdg
