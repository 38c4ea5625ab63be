#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dfdg/model.hpp"
#include "dfdg/rng.hpp"
#include "dfdg/tensor.hpp"

namespace dfdg {

enum class SaliencyKind { vanilla, smoothgrad };

/// Nonnegative per-observation relevance scores for one sample.
struct SaliencyMap {
  Shape shape;
  std::vector<double> scores;
  int class_used = 0;
  SaliencyKind kind = SaliencyKind::vanilla;
};

struct SmoothGradConfig {
  int n = 25;
  /// Noise scale as a fraction of the sample's value range (max - min).
  double sigma = 0.15;
  std::uint64_t seed = 0;
};

/// Squared gradient of logit c with respect to the sample x.
SaliencyMap vanilla_saliency(const Model& model, const Tensor& x, int c);

/// Mean of cfg.n vanilla maps at x + eps_k, eps_k ~ N(0, (sigma * range(x))^2)
/// elementwise. Noise is drawn sequentially from a generator seeded with
/// cfg.seed.
SaliencyMap smoothgrad(const Model& model, const Tensor& x, int c, const SmoothGradConfig& cfg);

/// SmoothGrad for several samples in one batched backward pass. Sample k uses
/// the noise stream seeded with seeds[k]; each result is bit-identical to
/// smoothgrad(model, sample_k, classes[k], {n, sigma, seeds[k]}).
/// `samples` is [count, input_shape...].
std::vector<SaliencyMap> smoothgrad_batch(const Model& model, const Tensor& samples,
                                          std::span<const int> classes, int n, double sigma,
                                          std::span<const std::uint64_t> seeds);

}  // namespace dfdg
