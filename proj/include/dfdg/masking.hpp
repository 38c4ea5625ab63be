#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dfdg/model.hpp"
#include "dfdg/rng.hpp"
#include "dfdg/saliency.hpp"
#include "dfdg/tensor.hpp"

namespace dfdg {

struct MaskConfig {
  double m_percent = 50.0;  // share of each batch to augment
  double q_max = 70.0;      // thresholds are drawn from U[0, q_max]
  std::uint64_t seed = 0;
};

/// A training batch: x is [batch, input_shape...]; one label per row.
struct Batch {
  Tensor x;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

/// Which class the masking saliency is conditioned on.
enum class SaliencyTarget { true_label, predicted };

/// q ~ U[0, q_max]. Throws ConfigError unless 0 <= q_max <= 100.
double sample_threshold(double q_max, Rng& rng);

/// q-th percentile (0..100) with linear interpolation between order
/// statistics at rank q/100 * (n - 1).
double percentile(std::span<const double> values, double q);

/// Positions whose score is strictly below the q-th percentile of the scores.
std::vector<std::size_t> masked_positions(std::span<const double> scores, double q);

/// Randomly permutes the values of x at masked_positions(sal.scores, q);
/// every other position is returned unchanged.
std::vector<double> mask_below_percentile(std::span<const double> x, const SaliencyMap& sal, double q,
                                          Rng& rng);

/// Replaces round(m% * batch) rows, chosen without replacement, by their
/// saliency-masked versions, drawing a fresh threshold per row. SmoothGrad
/// noise for each chosen row comes from its own seed drawn from `rng`.
Batch augment_batch(const Batch& batch, const Model& model, const MaskConfig& cfg,
                    const SmoothGradConfig& sg_cfg, Rng& rng,
                    SaliencyTarget target = SaliencyTarget::true_label);

}  // namespace dfdg
