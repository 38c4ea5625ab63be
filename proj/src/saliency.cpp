#include "dfdg/saliency.hpp"

#include <algorithm>

#include "dfdg/errors.hpp"

namespace dfdg {

namespace {

Shape batched(std::size_t rows, const Shape& sample) {
  Shape s{rows};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

}  // namespace

SaliencyMap vanilla_saliency(const Model& model, const Tensor& x, int c) {
  const Tensor g = logit_input_gradient(model, x, c);
  SaliencyMap map{model.input_shape(), std::vector<double>(g.size()), c, SaliencyKind::vanilla};
  std::transform(g.values().begin(), g.values().end(), map.scores.begin(),
                 [](double v) { return v * v; });
  return map;
}

std::vector<SaliencyMap> smoothgrad_batch(const Model& model, const Tensor& samples,
                                          std::span<const int> classes, int n, double sigma,
                                          std::span<const std::uint64_t> seeds) {
  if (n < 1) throw ConfigError("smoothgrad: n must be >= 1, got " + std::to_string(n));
  if (!(sigma >= 0.0)) throw ConfigError("smoothgrad: sigma must be >= 0");
  const Shape& in = model.input_shape();
  if (samples.shape() != batched(samples.rank() ? samples.dim(0) : 0, in)) {
    throw DimensionError("smoothgrad: samples " + to_string(samples.shape()) +
                         " do not match [count x " + to_string(in) + "]");
  }
  const std::size_t count = samples.dim(0);
  if (classes.size() != count || seeds.size() != count) {
    throw DimensionError("smoothgrad: need one class and one seed per sample");
  }
  const std::size_t width = numel(in);
  const auto reps = static_cast<std::size_t>(n);

  std::vector<double> noisy(count * reps * width);
  std::vector<int> rep_classes(count * reps);
  const auto xs = samples.values();
  for (std::size_t k = 0; k < count; ++k) {
    const auto x = xs.subspan(k * width, width);
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    const double sd = sigma * (*hi - *lo);
    Rng rng = make_rng(seeds[k]);
    std::normal_distribution<double> noise(0.0, sd > 0.0 ? sd : 1.0);
    for (std::size_t j = 0; j < reps; ++j) {
      double* row = noisy.data() + (k * reps + j) * width;
      for (std::size_t e = 0; e < width; ++e) row[e] = sd > 0.0 ? x[e] + noise(rng) : x[e];
      rep_classes[k * reps + j] = classes[k];
    }
  }

  const Tensor grads =
      logit_input_gradients(model, Tensor(batched(count * reps, in), std::move(noisy)), rep_classes);
  const auto g = grads.values();

  std::vector<SaliencyMap> maps;
  maps.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    SaliencyMap map{in, std::vector<double>(width, 0.0), classes[k], SaliencyKind::smoothgrad};
    // Running mean, so identical replicates average to exactly their value.
    for (std::size_t j = 0; j < reps; ++j) {
      const double* row = g.data() + (k * reps + j) * width;
      const double inv = 1.0 / static_cast<double>(j + 1);
      for (std::size_t e = 0; e < width; ++e) {
        const double s = row[e] * row[e];
        map.scores[e] += (s - map.scores[e]) * inv;
      }
    }
    maps.push_back(std::move(map));
  }
  return maps;
}

SaliencyMap smoothgrad(const Model& model, const Tensor& x, int c, const SmoothGradConfig& cfg) {
  const Shape& in = model.input_shape();
  if (x.shape() != in && x.shape() != batched(1, in)) {
    throw DimensionError("smoothgrad: sample " + to_string(x.shape()) + " does not match input shape " +
                         to_string(in));
  }
  const Tensor sample(batched(1, in), std::vector<double>(x.values().begin(), x.values().end()));
  const int classes[] = {c};
  const std::uint64_t seeds[] = {cfg.seed};
  auto maps = smoothgrad_batch(model, sample, classes, cfg.n, cfg.sigma, seeds);
  return std::move(maps.front());
}

}  // namespace dfdg
