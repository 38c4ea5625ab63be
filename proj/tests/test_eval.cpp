#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "dfdg/errors.hpp"
#include "dfdg/eval.hpp"
#include "oracles.hpp"

using namespace dfdg;

namespace {

DomainDataset tiny(std::size_t domains = 4) {
  SpuriousGaussianParams p;
  p.num_domains = domains;
  p.n_per_domain_class = 20;
  return generate_spurious_gaussian(p);
}

TrainConfig fast() {
  TrainConfig cfg;
  cfg.iterations = 5;
  cfg.batch_size = 16;
  cfg.sg_n = 2;
  return cfg;
}

std::vector<std::string> lines_of(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("accuracy examples") {
  std::mt19937_64 rng(1);
  Model m = oracle::linear_model(2, 2, rng);
  // head: logit_c = x . W[:, c]; make class 0 respond to x0 and class 1 to x1
  auto w = m.param("head.weight").mutable_values();
  w[0] = 1;
  w[1] = 0;
  w[2] = 0;
  w[3] = 1;
  const Tensor x({4, 2}, {2, 1, 0, 3, 5, 4, 1, 1.5});
  CHECK(predict(m, x) == std::vector<int>{0, 1, 0, 1});
  CHECK(accuracy(m, x, std::vector<int>{0, 1, 0, 1}) == 1.0);
  CHECK(accuracy(m, x, std::vector<int>{1, 0, 1, 0}) == 0.0);
  CHECK(accuracy(m, x, std::vector<int>{0, 0, 0, 0}) == 0.5);
  // ties go to the lower index
  CHECK(predict(m, Tensor({1, 2}, {1, 1})) == std::vector<int>{0});
  CHECK_THROWS_AS(accuracy(m, Tensor::zeros({0, 2}), std::vector<int>{}), ContractError);
  CHECK_THROWS_AS(accuracy(m, x, std::vector<int>{0}), DimensionError);
}

TEST_CASE("an untrained model scores near chance") {
  std::mt19937_64 rng(2);
  const std::size_t n = 3000;
  std::vector<int> y(n);
  std::uniform_int_distribution<int> u(0, 2);
  for (auto& v : y) v = u(rng);
  const Tensor x(Shape{n, 6}, oracle::uniform(n * 6, rng));
  const double acc = accuracy(build_mlp({6, 16}, 3, 3), x, y);
  CHECK(acc >= 0.28);
  CHECK(acc <= 0.39);
}

TEST_CASE("evaluate on datasets and views agree") {
  const DomainDataset ds = tiny();
  const Model m = build_for({}, ds.input_shape, 3, 4);
  CHECK(evaluate(m, ds) == evaluate(m, strip_domains(ds)));
  CHECK(evaluate(m, ds) == accuracy(m, ds.features(), ds.y));
}

TEST_CASE("LODO covers every target, method and seed") {
  const DomainDataset ds = tiny();
  const std::vector<StrategyMode> methods{StrategyMode::ce_only, StrategyMode::alternate};
  const RunReport r = lodo_experiment(ds, fast(), methods, {0, 1, 2});
  CHECK(r.targets == std::vector<std::string>{"A", "B", "C", "D"});
  CHECK(r.methods == std::vector<std::string>{"ce_only", "alternate"});
  CHECK(r.seeds == std::vector<std::uint64_t>{0, 1, 2});
  REQUIRE(r.cells.size() == 8);
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& c : r.cells) {
    seen.emplace(c.target, c.method);
    CHECK(c.target_accuracy.size() == 3);
    CHECK(c.heldin_accuracy.size() == 3);
    double mean = 0.0;
    for (double a : c.target_accuracy) {
      CHECK(a >= 0.0);
      CHECK(a <= 1.0);
      mean += a / 3.0;
    }
    CHECK(c.mean == doctest::Approx(mean).epsilon(1e-12));
  }
  CHECK(seen.size() == 8);
  REQUIRE(r.footer.size() == 2);
  double avg = 0.0;
  for (const auto& t : r.targets) avg += r.cell(t, "alternate").mean / 4.0;
  CHECK(r.summary("alternate").mean == doctest::Approx(avg).epsilon(1e-12));
  CHECK_NOTHROW(verify_report(r));

  const RunReport again = lodo_experiment(ds, fast(), methods, {0, 1, 2});
  CHECK(to_json(again) == to_json(r));
  CHECK(to_text(again) == to_text(r));

  CHECK_THROWS_AS(lodo_experiment(tiny(1), fast(), methods, {0}), ConfigError);
  CHECK_THROWS_AS(r.cell("Z", "alternate"), IndexError);
}

TEST_CASE("verify_report catches tampering") {
  RunReport r = lodo_experiment(tiny(2), fast(), {StrategyMode::ce_only}, {0, 1});
  CHECK_NOTHROW(verify_report(r));
  RunReport bad = r;
  bad.cells[0].mean += 1e-6;
  CHECK_THROWS_AS(verify_report(bad), ContractError);
  bad = r;
  bad.cells[0].target_accuracy.pop_back();
  CHECK_THROWS_AS(verify_report(bad), ContractError);
  bad = r;
  bad.footer[0].mean += 1e-6;
  CHECK_THROWS_AS(verify_report(bad), ContractError);
}

TEST_CASE("run failures name the cell") {
  DomainDataset ds = tiny(2);
  ds.x[3] = std::nan("");
  TrainConfig cfg = fast();
  cfg.strategy_mode = StrategyMode::ce_only;
  cfg.batch_size = 120;
  try {
    lodo_experiment(ds, cfg, {StrategyMode::ce_only}, {7});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("target B") != std::string::npos);
    CHECK(msg.find("ce_only") != std::string::npos);
    CHECK(msg.find("seed 7") != std::string::npos);
  }
}

TEST_CASE("ablation grid") {
  CHECK(mode_for({0, 0, 0}) == StrategyMode::ce_only);
  CHECK(mode_for({0.1, 0, 0}) == StrategyMode::align_only);
  CHECK(mode_for({0.1, 50, 0}) == StrategyMode::align_only);
  CHECK(mode_for({0, 50, 70}) == StrategyMode::mask_only);
  CHECK(mode_for({0.1, 50, 70}) == StrategyMode::alternate);

  const DomainDataset ds = tiny(2);
  const TrainConfig cfg = fast();
  const auto grid = grid_from_json(nlohmann::json::parse("[[0,0,0],[0.1,50,70],[0.1,50,70]]"));
  REQUIRE(grid.size() == 3);
  const AblationReport a = ablation_grid(ds, cfg, grid, {0, 1});
  REQUIRE(a.rows.size() == 3);
  CHECK(to_json(a.rows[1].report) == to_json(a.rows[2].report));

  const RunReport plain = lodo_experiment(ds, cfg, {StrategyMode::ce_only}, {0, 1});
  for (const auto& t : plain.targets) {
    CHECK(a.rows[0].report.cell(t, "ce_only").target_accuracy == plain.cell(t, "ce_only").target_accuracy);
  }

  const std::string text = to_text(a);
  std::istringstream in(text);
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  CHECK(first.find('-') != std::string::npos);

  CHECK(grid_from_json(nlohmann::json::parse(R"({"grid": [{"alpha": 0.2, "m_percent": 10, "q_max": 30}]})"))[0].q_max ==
        30.0);
  CHECK_THROWS_AS(grid_from_json(nlohmann::json::parse("[[0.1, 50]]")), ConfigError);
}

TEST_CASE("feature export") {
  const DomainDataset ds = tiny(2);
  const Model m = build_for({Architecture::Kind::mlp, {7}, 5}, ds.input_shape, 3, 1);
  const auto path = std::filesystem::temp_directory_path() / "dfdg_features.csv";
  export_features(m, ds, path);
  const auto rows = lines_of(path);
  REQUIRE(rows.size() == ds.size() + 1);
  CHECK(rows[0] == "domain,label,f0,f1,f2,f3,f4,f5,f6");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(std::count(rows[i].begin(), rows[i].end(), ',') == 8);
  }
  CHECK(rows[1].rfind(ds.domain[0] + "," + std::to_string(ds.y[0]) + ",", 0) == 0);
  export_features(m, ds, path.string() + ".2");
  CHECK(lines_of(path.string() + ".2") == rows);
}

TEST_CASE("saliency CSV") {
  const auto path = std::filesystem::temp_directory_path() / "dfdg_saliency.csv";
  const std::vector<double> x{1.0, 2.0};
  const SaliencyMap v{{2}, {0.25, 4.0}, 0, SaliencyKind::vanilla};
  const SaliencyMap s{{2}, {0.5, 3.0}, 0, SaliencyKind::smoothgrad};
  write_saliency_csv(path, x, v, s);
  const auto rows = lines_of(path);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == "index,value,vanilla,smoothgrad");
  CHECK(rows[1] == "0,1,0.25,0.5");
}
