#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "dfdg/errors.hpp"
#include "dfdg/saliency.hpp"
#include "oracles.hpp"

using namespace dfdg;

namespace {

std::vector<double> flat(const Model& m) {
  std::vector<double> out;
  for (const auto& [name, t] : m.params()) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST_CASE("vanilla saliency of a linear model is the squared weight column") {
  std::mt19937_64 rng(1);
  const Model m = oracle::linear_model(6, 3, rng);
  for (int c = 0; c < 3; ++c) {
    for (int trial = 0; trial < 5; ++trial) {
      const SaliencyMap s = vanilla_saliency(m, oracle::random_tensor({6}, rng), c);
      CHECK(s.kind == SaliencyKind::vanilla);
      CHECK(s.class_used == c);
      CHECK(s.shape == Shape{6});
      for (std::size_t i = 0; i < 6; ++i) {
        const double w = m.param("head.weight")[i * 3 + static_cast<std::size_t>(c)];
        CHECK(s.scores[i] == w * w);
      }
    }
  }
}

TEST_CASE("zero weights into the logit give an all-zero map") {
  std::mt19937_64 rng(2);
  Model m = build_mlp({4, 5}, 3, 0);
  auto w = m.param("head.weight").mutable_values();
  for (std::size_t j = 0; j < 5; ++j) w[j * 3 + 1] = 0.0;
  const SaliencyMap s = vanilla_saliency(m, oracle::random_tensor({4}, rng), 1);
  for (double v : s.scores) CHECK(v == 0.0);
}

TEST_CASE("vanilla saliency equals squared finite-difference gradients") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Model m = build_mlp({5, 8, 6}, 3, static_cast<std::uint64_t>(trial));
    const Tensor x = oracle::random_tensor({5}, rng);
    const int c = trial % 3;
    const SaliencyMap s = vanilla_saliency(m, x, c);
    NoGradGuard off;
    for (std::size_t i = 0; i < 5; ++i) {
      auto p = vec(x), q = vec(x);
      p[i] += 1e-5;
      q[i] -= 1e-5;
      const double g = (m.forward(Tensor({1, 5}, p))[static_cast<std::size_t>(c)] -
                        m.forward(Tensor({1, 5}, q))[static_cast<std::size_t>(c)]) /
                       2e-5;
      CHECK(oracle::rel_error(s.scores[i], g * g) < 1e-3);
    }
  }
}

TEST_CASE("smoothgrad equals vanilla on a linear model for any configuration") {
  std::mt19937_64 rng(4);
  const Model m = oracle::linear_model(7, 2, rng);
  const Tensor x = oracle::random_tensor({7}, rng);
  const SaliencyMap v = vanilla_saliency(m, x, 1);
  for (int n : {1, 2, 25, 60}) {
    for (double sigma : {0.0, 0.15, 1.0}) {
      const SaliencyMap s = smoothgrad(m, x, 1, {n, sigma, static_cast<std::uint64_t>(n * 13)});
      CHECK(s.kind == SaliencyKind::smoothgrad);
      CHECK(s.scores == v.scores);
    }
  }
}

TEST_CASE("smoothgrad with one replicate and no noise is vanilla bitwise") {
  std::mt19937_64 rng(5);
  const Model m = build_mlp({6, 9}, 3, 4);
  const Tensor x = oracle::random_tensor({6}, rng);
  CHECK(smoothgrad(m, x, 2, {1, 0.0, 99}).scores == vanilla_saliency(m, x, 2).scores);
}

TEST_CASE("smoothgrad is deterministic in the seed") {
  std::mt19937_64 rng(6);
  const Model m = build_mlp({6, 9}, 3, 4);
  const Tensor x = oracle::random_tensor({6}, rng);
  CHECK(smoothgrad(m, x, 0, {25, 0.15, 1}).scores == smoothgrad(m, x, 0, {25, 0.15, 1}).scores);
  CHECK(smoothgrad(m, x, 0, {25, 0.15, 1}).scores != smoothgrad(m, x, 0, {25, 0.15, 2}).scores);
}

TEST_CASE("maps are nonnegative and leave model and input untouched") {
  std::mt19937_64 rng(7);
  const Model m = build_cnn1d({1, 4}, 3, 3, 2, 10);
  const Tensor x = oracle::random_tensor({1, 10}, rng);
  const auto params = flat(m);
  const auto input = vec(x);
  const SaliencyMap a = vanilla_saliency(m, x, 1);
  const SaliencyMap b = smoothgrad(m, x, 2, {10, 0.3, 5});
  CHECK(a.shape == Shape{1, 10});
  CHECK(b.shape == Shape{1, 10});
  for (double v : a.scores) CHECK(v >= 0.0);
  for (double v : b.scores) CHECK(v >= 0.0);
  CHECK(flat(m) == params);
  CHECK(vec(x) == input);
}

TEST_CASE("constant samples get no noise") {
  const Model m = build_mlp({4, 6}, 2, 1);
  const Tensor x({4}, {0.3, 0.3, 0.3, 0.3});
  CHECK(smoothgrad(m, x, 0, {25, 0.15, 3}).scores == vanilla_saliency(m, x, 0).scores);
}

TEST_CASE("smoothgrad variance across seeds shrinks with more replicates") {
  std::mt19937_64 rng(8);
  const Model m = build_mlp({5, 16, 16}, 3, 11);
  const Tensor x = oracle::random_tensor({5}, rng);
  auto spread = [&](int n) {
    std::vector<std::vector<double>> maps;
    for (std::uint64_t seed = 0; seed < 20; ++seed) maps.push_back(smoothgrad(m, x, 1, {n, 0.15, seed}).scores);
    std::vector<double> sd(5);
    for (std::size_t i = 0; i < 5; ++i) {
      double mean = 0.0;
      for (const auto& s : maps) mean += s[i] / 20.0;
      double var = 0.0;
      for (const auto& s : maps) var += (s[i] - mean) * (s[i] - mean) / 19.0;
      sd[i] = std::sqrt(var);
    }
    return sd;
  };
  const auto one = spread(1), many = spread(25);
  for (std::size_t i = 0; i < 5; ++i) CHECK(many[i] < one[i]);
}

TEST_CASE("batched smoothgrad matches per-sample calls bitwise") {
  std::mt19937_64 rng(9);
  const Model m = build_mlp({4, 8}, 3, 5);
  const Tensor xs = oracle::random_tensor({3, 4}, rng);
  const int classes[] = {2, 0, 1};
  const std::uint64_t seeds[] = {10, 20, 30};
  const auto maps = smoothgrad_batch(m, xs, classes, 25, 0.15, seeds);
  for (std::size_t k = 0; k < 3; ++k) {
    const Tensor row({4}, std::vector<double>(xs.values().begin() + static_cast<long>(4 * k),
                                              xs.values().begin() + static_cast<long>(4 * k + 4)));
    CHECK(maps[k].scores == smoothgrad(m, row, classes[k], {25, 0.15, seeds[k]}).scores);
  }
}

TEST_CASE("saliency errors") {
  const Model m = build_mlp({4, 8}, 3, 5);
  const Tensor x = Tensor::zeros({4});
  CHECK_THROWS_AS(vanilla_saliency(m, x, 3), IndexError);
  CHECK_THROWS_AS(smoothgrad(m, x, 5, {}), IndexError);
  CHECK_THROWS_AS(smoothgrad(m, x, 0, {0, 0.15, 0}), ConfigError);
  CHECK_THROWS_AS(smoothgrad(m, x, 0, {5, -0.1, 0}), ConfigError);
  CHECK_THROWS_AS(vanilla_saliency(m, Tensor::zeros({5}), 0), DimensionError);
}
