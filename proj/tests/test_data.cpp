#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "dfdg/data.hpp"
#include "dfdg/saliency.hpp"
#include "dfdg/trainer.hpp"
#include "dfdg/errors.hpp"
#include "oracles.hpp"

using namespace dfdg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "dfdg_test_data" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

SpuriousGaussianParams small_gaussian() {
  SpuriousGaussianParams p;
  p.n_per_domain_class = 40;
  return p;
}

// Per-(domain, class) means of the columns [from, to).
std::map<std::pair<std::string, int>, std::vector<double>> cell_means(const DomainDataset& ds, std::size_t from,
                                                                      std::size_t to) {
  std::map<std::pair<std::string, int>, std::vector<double>> sums;
  std::map<std::pair<std::string, int>, double> counts;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto& s = sums[{ds.domain[i], ds.y[i]}];
    s.resize(to - from, 0.0);
    for (std::size_t j = from; j < to; ++j) s[j - from] += ds.row(i)[j];
    counts[{ds.domain[i], ds.y[i]}] += 1.0;
  }
  for (auto& [key, s] : sums) {
    for (auto& v : s) v /= counts[key];
  }
  return sums;
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

}  // namespace

TEST_CASE("spurious gaussian layout and determinism") {
  const auto p = small_gaussian();
  const DomainDataset ds = generate_spurious_gaussian(p);
  CHECK(ds.size() == p.num_domains * p.classes * p.n_per_domain_class);
  CHECK(ds.input_shape == Shape{p.signal_dims + p.nuisance_dims});
  CHECK(ds.domain_names == std::vector<std::string>{"A", "B", "C", "D"});
  CHECK(ds.validate().empty());
  CHECK(ds == generate_spurious_gaussian(p));
  auto q = p;
  q.seed = 1;
  CHECK_FALSE(ds == generate_spurious_gaussian(q));
}

TEST_CASE("spurious gaussian signal is shared and nuisance shifts per domain") {
  auto p = small_gaussian();
  p.n_per_domain_class = 2000;
  p.noise_sd = 0.2;
  const DomainDataset ds = generate_spurious_gaussian(p);
  const auto signal = cell_means(ds, 0, p.signal_dims);
  const auto nuisance = cell_means(ds, p.signal_dims, p.signal_dims + p.nuisance_dims);
  for (const auto& d : ds.domain_names) {
    for (int c = 0; c < 3; ++c) {
      // unit-separated signal means, identical across domains
      for (double v : signal.at({d, c})) CHECK(std::abs(v - (c - 1.0)) < 0.05);
      // nuisance mean norm equals the strength
      double norm = 0.0;
      for (double v : nuisance.at({d, c})) norm += v * v;
      CHECK(std::abs(std::sqrt(norm) - p.nuisance_strength) < 0.1);
    }
  }
  // some (class, dimension) nuisance mean changes between domains
  bool shifted = false;
  for (int c = 0; c < 3; ++c) {
    const auto& a = nuisance.at({"A", c});
    const auto& b = nuisance.at({"B", c});
    for (std::size_t j = 0; j < a.size(); ++j) shifted = shifted || std::abs(a[j] - b[j]) > 1.0;
  }
  CHECK(shifted);
}

TEST_CASE("spurious gaussian degenerate shifts") {
  auto p = small_gaussian();
  p.nuisance_strength = 0.0;
  p.n_per_domain_class = 3000;
  const DomainDataset ds = generate_spurious_gaussian(p);
  const auto nuisance = cell_means(ds, p.signal_dims, p.signal_dims + p.nuisance_dims);
  for (const auto& [key, mu] : nuisance) {
    for (double v : mu) CHECK(std::abs(v) < 0.05);
  }
  auto q = small_gaussian();
  q.nuisance_dims = 0;
  const DomainDataset flat = generate_spurious_gaussian(q);
  CHECK(flat.input_shape == Shape{q.signal_dims});
}

TEST_CASE("generator argument errors") {
  auto p = small_gaussian();
  p.classes = 1;
  CHECK_THROWS_AS(generate_spurious_gaussian(p), ConfigError);
  p = small_gaussian();
  p.num_domains = 0;
  CHECK_THROWS_AS(generate_spurious_gaussian(p), ConfigError);
  p = small_gaussian();
  p.n_per_domain_class = 0;
  CHECK_THROWS_AS(generate_spurious_gaussian(p), ConfigError);
  WaveformParams w;
  w.length = 15;
  CHECK_THROWS_AS(generate_shifted_waveforms(w), ConfigError);
}

TEST_CASE("waveforms") {
  WaveformParams p;
  p.n_per_domain_class = 5;
  const DomainDataset ds = generate_shifted_waveforms(p);
  CHECK(ds.input_shape == Shape{1, 64});
  CHECK(ds.size() == 4 * 3 * 5);
  CHECK(ds.validate().empty());
  CHECK(ds == generate_shifted_waveforms(p));
  CHECK(waveform_sample(p, 2, 1, 77) == waveform_sample(p, 2, 1, 77));
  CHECK(waveform_sample(p, 2, 1, 77) != waveform_sample(p, 3, 1, 77));

  // zero background: domains coincide
  p.background_amplitude = 0.0;
  const DomainDataset same = generate_shifted_waveforms(p);
  const std::size_t per_domain = 3 * 5;
  for (std::size_t i = 0; i < per_domain; ++i) {
    const auto a = same.row(i);
    for (std::size_t d = 1; d < 4; ++d) {
      const auto b = same.row(d * per_domain + i);
      CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }
  }
  const auto [begin, end] = waveform_motif_window(64);
  CHECK(begin < end);
  CHECK(end <= 64);
}

TEST_CASE("leave one domain out is a partition") {
  const DomainDataset ds = generate_spurious_gaussian(small_gaussian());
  for (const auto& target : ds.domain_names) {
    const LodoSplit split = leave_one_domain_out(ds, target);
    CHECK(split.test.size() == ds.size() / 4);
    CHECK(split.train.size() == 3 * ds.size() / 4);
    CHECK(split.train_held.size() == split.train.size());
    for (const auto& d : split.test.domain) CHECK(d == target);
    for (const auto& d : split.train_held.domain) CHECK(d != target);
    // the view carries the held rows in order, without tags
    CHECK(std::equal(split.train.features().begin(), split.train.features().end(), split.train_held.x.begin()));
    std::multiset<std::vector<double>> all, parts;
    for (std::size_t i = 0; i < ds.size(); ++i) all.insert({ds.row(i).begin(), ds.row(i).end()});
    for (std::size_t i = 0; i < split.train.size(); ++i) parts.insert({split.train.row(i).begin(), split.train.row(i).end()});
    for (std::size_t i = 0; i < split.test.size(); ++i) parts.insert({split.test.row(i).begin(), split.test.row(i).end()});
    CHECK(all == parts);
  }
  CHECK_THROWS_AS(leave_one_domain_out(ds, "Z"), ConfigError);
  DomainDataset single = ds;
  single.domain_names = {"A"};
  CHECK_THROWS_AS(leave_one_domain_out(single, "A"), ConfigError);
}

TEST_CASE("holdout split") {
  const TrainView view = strip_domains(generate_spurious_gaussian(small_gaussian()));
  const auto [fit, val] = split_holdout(view, 0.1, 3);
  CHECK(val.size() == 48);
  CHECK(fit.size() + val.size() == view.size());
  const auto again = split_holdout(view, 0.1, 3);
  CHECK(std::equal(val.features().begin(), val.features().end(), again.second.features().begin()));
  CHECK_THROWS_AS(split_holdout(view, 1.0, 0), ConfigError);
}

TEST_CASE("save and load round trip") {
  const auto dir = scratch("roundtrip");
  const DomainDataset ds = generate_spurious_gaussian(small_gaussian());
  save_dataset(ds, dir);
  CHECK(load_dataset(dir) == ds);
  CHECK(load_dataset(dir / "data.csv") == ds);

  WaveformParams w;
  w.n_per_domain_class = 3;
  const DomainDataset wf = generate_shifted_waveforms(w);
  const auto wdir = scratch("roundtrip_wave");
  save_dataset(wf, wdir);
  CHECK(load_dataset(wdir) == wf);
}

TEST_CASE("loader contract errors") {
  const auto dir = scratch("errors");
  write_file(dir / "data.csv", "domain,label,x0,x1\nA,0,1.0,2.0\nA,3,1.0,2.0\n");
  write_file(dir / "meta.json", R"({"input_shape": [2], "num_classes": 3})");
  try {
    load_dataset(dir);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("row 3") != std::string::npos);
  }

  write_file(dir / "meta.json", R"({"input_shape": [3], "num_classes": 3})");
  CHECK_THROWS_AS(load_dataset(dir), ParseError);

  write_file(dir / "meta.json", R"({"input_shape": [2], "num_classes": 3, "domains": ["A"]})");
  write_file(dir / "data.csv", "domain,label,x0,x1\nA,0,1.0,2.0\nB,1,1.0,2.0\n");
  CHECK_THROWS_AS(load_dataset(dir), ParseError);

  write_file(dir / "data.csv", "domain,label,x0,x1\nA,0,1.0,oops\n");
  CHECK_THROWS_AS(load_dataset(dir), ParseError);
  write_file(dir / "data.csv", "domain,label,x0,x1\nA,0,1.0\n");
  CHECK_THROWS_AS(load_dataset(dir), ParseError);
  write_file(dir / "data.csv", "label,domain,x0\n");
  CHECK_THROWS_AS(load_dataset(dir), ParseError);
  CHECK_THROWS_AS(load_dataset(dir / "nope.csv"), ParseError);
}

TEST_CASE("loader without sidecar infers a flat shape and warns on missing cells") {
  const auto dir = scratch("nosidecar");
  write_file(dir / "data.csv", "domain,label,x0,x1,x2\nA,0,1,2,3\nA,1,4,5,6\nB,0,7,8,9\n");
  const DomainDataset ds = load_dataset(dir / "data.csv");
  CHECK(ds.input_shape == Shape{3});
  CHECK(ds.num_classes == 2);
  CHECK(ds.domain_names == std::vector<std::string>{"A", "B"});
  const auto warnings = ds.validate();
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("'B'") != std::string::npos);
}

TEST_CASE("balanced batches from an imbalanced pool") {
  std::vector<double> x(1000);
  std::vector<int> y(1000, 0);
  for (std::size_t i = 0; i < 1000; ++i) x[i] = static_cast<double>(i);
  for (std::size_t i = 990; i < 1000; ++i) y[i] = 1;
  const TrainView view({1}, 2, x, y);
  BatchStream stream(view, 128, 0.5, Rng(1));
  for (int b = 0; b < 100; ++b) {
    const Batch batch = stream.next();
    REQUIRE(batch.size() == 128);
    const auto minority = std::count(batch.labels.begin(), batch.labels.end(), 1);
    const auto majority = 128 - minority;
    CHECK(minority >= static_cast<long>(std::ceil(0.5 * static_cast<double>(majority))));
    // rows and labels stay paired
    for (std::size_t r = 0; r < 128; ++r) CHECK((batch.x[r] >= 990.0) == (batch.labels[r] == 1));
  }
}

TEST_CASE("balanced data passes through the sampler") {
  const TrainView view = strip_domains(generate_spurious_gaussian(small_gaussian()));
  BatchStream stream(view, 128, 0.5, Rng(2));
  for (int b = 0; b < 50; ++b) {
    const auto rows = stream.next_indices();
    CHECK(rows.size() == 128);
    std::map<int, int> counts;
    for (auto r : rows) ++counts[view.labels()[r]];
    CHECK(counts.size() == 3);
  }
  BatchStream a(view, 64, 0.5, Rng(3)), b(view, 64, 0.5, Rng(3));
  CHECK(a.next_indices() == b.next_indices());
}

TEST_CASE("sampler construction errors") {
  const TrainView missing({1}, 3, {1.0, 2.0}, {0, 1});
  CHECK_THROWS_AS(BatchStream(missing, 8, 0.5, Rng(0)), ConfigError);
  const TrainView ok({1}, 2, {1.0, 2.0}, {0, 1});
  CHECK_THROWS_AS(BatchStream(ok, 1, 0.5, Rng(0)), ConfigError);
  CHECK_THROWS_AS(BatchStream(ok, 8, 0.0, Rng(0)), ConfigError);
  CHECK_THROWS_AS(BatchStream(ok, 8, 1.5, Rng(0)), ConfigError);
}

TEST_CASE("default spurious gaussian data is calibrated against a logistic oracle") {
  const DomainDataset ds = generate_spurious_gaussian({});
  const std::size_t w = ds.sample_width();
  double heldin = 0.0, target = 0.0;
  for (const auto& name : ds.domain_names) {
    oracle::Vec fit_x, val_x, test_x;
    std::vector<int> fit_y, val_y, test_y;
    std::size_t source_rows = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto r = ds.row(i);
      if (ds.domain[i] == name) {
        test_x.insert(test_x.end(), r.begin(), r.end());
        test_y.push_back(ds.y[i]);
      } else if (source_rows++ % 10 == 0) {
        val_x.insert(val_x.end(), r.begin(), r.end());
        val_y.push_back(ds.y[i]);
      } else {
        fit_x.insert(fit_x.end(), r.begin(), r.end());
        fit_y.push_back(ds.y[i]);
      }
    }
    const oracle::Logistic m = oracle::fit_logistic(fit_x, fit_y, w, ds.num_classes);
    auto acc = [&](const oracle::Vec& x, const std::vector<int>& y) {
      std::size_t hit = 0;
      for (std::size_t i = 0; i < y.size(); ++i) hit += m.predict(&x[i * w]) == y[i];
      return static_cast<double>(hit) / static_cast<double>(y.size());
    };
    const double h = acc(val_x, val_y), t = acc(test_x, test_y);
    MESSAGE("target " << name << ": held-in " << h << ", target " << t);
    CHECK(h >= 0.95);
    heldin += h / 4.0;
    target += t / 4.0;
  }
  CHECK(heldin >= 0.95);
  CHECK(target <= 0.70);
}

TEST_CASE("a trained model attends to the waveform motif") {
  WaveformParams p;
  const DomainDataset ds = generate_shifted_waveforms(p);
  const LodoSplit split = leave_one_domain_out(ds, "A");
  TrainConfig cfg;
  cfg.strategy_mode = StrategyMode::ce_only;
  cfg.base_lr = 0.01;
  const Model m = train(split.train, cfg).model;
  const auto [begin, end] = waveform_motif_window(p.length);
  double inside = 0.0, outside = 0.0;
  for (std::size_t i = 0; i < split.train.size(); i += 7) {
    const auto r = split.train.row(i);
    const Tensor x({1, p.length}, std::vector<double>(r.begin(), r.end()));
    const auto s = smoothgrad(m, x, split.train.labels()[i], {25, 0.15, i}).scores;
    for (std::size_t t = 0; t < p.length; ++t) (t >= begin && t < end ? inside : outside) += s[t];
  }
  inside /= static_cast<double>(end - begin);
  outside /= static_cast<double>(p.length - (end - begin));
  MESSAGE("mean saliency inside " << inside << ", outside " << outside);
  CHECK(inside > outside);
}
