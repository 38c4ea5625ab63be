#include "dfdg/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dfdg/errors.hpp"

namespace dfdg {

double sample_threshold(double q_max, Rng& rng) {
  if (!(q_max >= 0.0 && q_max <= 100.0)) {
    throw ConfigError("sample_threshold: q_max must be in [0, 100], got " + std::to_string(q_max));
  }
  if (q_max == 0.0) return 0.0;
  return std::uniform_real_distribution<double>(0.0, q_max)(rng);
}

double percentile(std::span<const double> values, double q) {
  if (values.empty()) throw ContractError("percentile: empty input");
  if (!(q >= 0.0 && q <= 100.0)) throw ConfigError("percentile: q must be in [0, 100]");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double rank = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  if (frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::vector<std::size_t> masked_positions(std::span<const double> scores, double q) {
  const double t = percentile(scores, q);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] < t) out.push_back(i);
  }
  return out;
}

std::vector<double> mask_below_percentile(std::span<const double> x, const SaliencyMap& sal, double q,
                                          Rng& rng) {
  if (x.size() != sal.scores.size()) {
    throw DimensionError("mask_below_percentile: sample has " + std::to_string(x.size()) +
                         " values, saliency map has " + std::to_string(sal.scores.size()));
  }
  std::vector<double> out(x.begin(), x.end());
  const auto positions = masked_positions(sal.scores, q);
  if (positions.size() <= 1) return out;
  std::vector<double> picked;
  picked.reserve(positions.size());
  for (auto p : positions) picked.push_back(x[p]);
  std::shuffle(picked.begin(), picked.end(), rng);
  for (std::size_t i = 0; i < positions.size(); ++i) out[positions[i]] = picked[i];
  return out;
}

Batch augment_batch(const Batch& batch, const Model& model, const MaskConfig& cfg,
                    const SmoothGradConfig& sg_cfg, Rng& rng, SaliencyTarget target) {
  if (batch.size() == 0) throw ContractError("augment_batch: empty batch");
  if (!(cfg.m_percent >= 0.0 && cfg.m_percent <= 100.0)) {
    throw ConfigError("augment_batch: m_percent must be in [0, 100]");
  }
  if (!(cfg.q_max >= 0.0 && cfg.q_max <= 100.0)) {
    throw ConfigError("augment_batch: q_max must be in [0, 100]");
  }
  const std::size_t rows = batch.size();
  const std::size_t width = batch.x.size() / rows;
  const auto count = static_cast<std::size_t>(std::round(cfg.m_percent / 100.0 * static_cast<double>(rows)));
  if (count == 0) return batch;

  // Partial Fisher-Yates: the first `count` entries are a uniform sample
  // without replacement.
  std::vector<std::size_t> order(rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, rows - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  order.resize(count);

  const auto xv = batch.x.values();
  std::vector<double> chosen(count * width);
  std::vector<int> classes(count);
  std::vector<std::uint64_t> seeds(count);
  for (std::size_t k = 0; k < count; ++k) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(order[k] * width), width,
                chosen.begin() + static_cast<std::ptrdiff_t>(k * width));
    classes[k] = batch.labels[order[k]];
    seeds[k] = rng();
  }
  Shape chosen_shape = batch.x.shape();
  chosen_shape[0] = count;
  Tensor chosen_x(std::move(chosen_shape), std::move(chosen));

  if (target == SaliencyTarget::predicted) {
    NoGradGuard no_grad;
    const Tensor logits = model.forward(chosen_x);
    const std::size_t c = model.num_classes();
    for (std::size_t k = 0; k < count; ++k) {
      const double* row = logits.values().data() + k * c;
      classes[k] = static_cast<int>(std::max_element(row, row + c) - row);
    }
  }

  const auto maps = smoothgrad_batch(model, chosen_x, classes, sg_cfg.n, sg_cfg.sigma, seeds);

  std::vector<double> out(xv.begin(), xv.end());
  for (std::size_t k = 0; k < count; ++k) {
    const double q = sample_threshold(cfg.q_max, rng);
    const auto sample = chosen_x.values().subspan(k * width, width);
    const auto masked = mask_below_percentile(sample, maps[k], q, rng);
    std::copy(masked.begin(), masked.end(), out.begin() + static_cast<std::ptrdiff_t>(order[k] * width));
  }
  return {Tensor(batch.x.shape(), std::move(out)), batch.labels};
}

}  // namespace dfdg
