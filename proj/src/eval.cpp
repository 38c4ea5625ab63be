#include "dfdg/eval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dfdg/errors.hpp"

namespace dfdg {

namespace {

constexpr std::size_t kChunk = 1024;

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Rethrows with a prefix, keeping the error category.
template <typename F>
auto tagged(const std::string& tag, F&& body) {
  try {
    return body();
  } catch (const NumericError& e) {
    throw NumericError(tag + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(tag + e.what());
  } catch (const ContractError& e) {
    throw ContractError(tag + e.what());
  } catch (const DimensionError& e) {
    throw DimensionError(tag + e.what());
  } catch (const IndexError& e) {
    throw IndexError(tag + e.what());
  } catch (const ParseError& e) {
    throw ParseError(tag + e.what());
  } catch (const Error& e) {
    throw Error(tag + e.what());
  }
}

class Fnv1a {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
    return buf;
  }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

std::string hyper(double v) {
  if (v == 0.0) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string pad(const std::string& s, std::size_t width, bool left = false) {
  if (s.size() >= width) return s;
  return left ? s + std::string(width - s.size(), ' ') : std::string(width - s.size(), ' ') + s;
}

}  // namespace

// ---- accuracy ------------------------------------------------------------------

std::vector<int> predict(const Model& model, const Tensor& x) {
  NoGradGuard no_grad;
  const std::size_t rows = x.shape().empty() ? 0 : x.dim(0);
  const std::size_t width = rows ? x.size() / rows : 0;
  const std::size_t classes = model.num_classes();
  std::vector<int> out;
  out.reserve(rows);
  for (std::size_t start = 0; start < rows; start += kChunk) {
    const std::size_t n = std::min(kChunk, rows - start);
    Shape shape = x.shape();
    shape[0] = n;
    const auto slice = x.values().subspan(start * width, n * width);
    const Tensor logits = model.forward(Tensor(shape, std::vector<double>(slice.begin(), slice.end())));
    for (std::size_t r = 0; r < n; ++r) {
      const double* row = logits.values().data() + r * classes;
      // max_element keeps the first maximum.
      out.push_back(static_cast<int>(std::max_element(row, row + classes) - row));
    }
  }
  return out;
}

double accuracy(const Model& model, const Tensor& x, std::span<const int> labels) {
  if (labels.empty()) throw ContractError("evaluate: empty test set");
  const auto pred = predict(model, x);
  if (pred.size() != labels.size()) {
    throw DimensionError("evaluate: " + std::to_string(pred.size()) + " rows but " + std::to_string(labels.size()) +
                         " labels");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double evaluate(const Model& model, const DomainDataset& test) {
  if (test.size() == 0) throw ContractError("evaluate: empty test set");
  return accuracy(model, test.features(), test.y);
}

double evaluate(const Model& model, const TrainView& data) {
  if (data.size() == 0) throw ContractError("evaluate: empty test set");
  return accuracy(model, data.tensor(), data.labels());
}

// ---- reports -------------------------------------------------------------------

const ReportCell& RunReport::cell(const std::string& target, const std::string& method) const {
  for (const auto& c : cells) {
    if (c.target == target && c.method == method) return c;
  }
  throw IndexError("report: no cell for target '" + target + "', method '" + method + "'");
}

const MethodSummary& RunReport::summary(const std::string& method) const {
  for (const auto& s : footer) {
    if (s.method == method) return s;
  }
  throw IndexError("report: no summary for method '" + method + "'");
}

void verify_report(const RunReport& report) {
  auto check = [](long double expected, double got, const std::string& what) {
    if (std::fabs(static_cast<double>(expected) - got) > 1e-12) {
      throw ContractError("report: " + what + " is " + fmt17(got) + ", recomputed " +
                          fmt17(static_cast<double>(expected)));
    }
  };
  if (report.cells.size() != report.targets.size() * report.methods.size()) {
    throw ContractError("report: expected one cell per (target, method)");
  }
  for (const auto& c : report.cells) {
    const std::string where = "cell (" + c.target + ", " + c.method + ")";
    if (c.target_accuracy.size() != report.seeds.size() || c.heldin_accuracy.size() != report.seeds.size()) {
      throw ContractError("report: " + where + " does not have one value per seed");
    }
    long double t = 0, h = 0;
    for (std::size_t i = 0; i < report.seeds.size(); ++i) {
      t += c.target_accuracy[i];
      h += c.heldin_accuracy[i];
    }
    const auto n = static_cast<long double>(report.seeds.size());
    check(t / n, c.mean, where + " mean");
    check(h / n, c.heldin_mean, where + " held-in mean");
  }
  for (const auto& s : report.footer) {
    long double t = 0, h = 0;
    for (const auto& target : report.targets) {
      const auto& c = report.cell(target, s.method);
      t += c.mean;
      h += c.heldin_mean;
    }
    const auto n = static_cast<long double>(report.targets.size());
    check(t / n, s.mean, "average of " + s.method);
    check(h / n, s.heldin_mean, "held-in average of " + s.method);
  }
}

std::string config_fingerprint(const TrainConfig& cfg, const DomainDataset& ds) {
  Fnv1a h;
  h.str(to_json(cfg).dump());
  h.u64(ds.input_shape.size());
  for (auto d : ds.input_shape) h.u64(d);
  h.u64(ds.num_classes);
  h.u64(ds.domain_names.size());
  for (const auto& d : ds.domain_names) h.str(d);
  h.u64(ds.size());
  for (double v : ds.x) h.f64(v);
  for (int y : ds.y) h.u64(static_cast<std::uint64_t>(y));
  for (const auto& d : ds.domain) h.str(d);
  return h.hex();
}

RunReport lodo_experiment(const DomainDataset& ds, const TrainConfig& cfg, const std::vector<StrategyMode>& methods,
                          const std::vector<std::uint64_t>& seeds, const LodoOptions& options) {
  if (ds.domain_names.size() < 2) throw ConfigError("lodo: need at least 2 domains");
  if (methods.empty()) throw ConfigError("lodo: no methods given");
  if (seeds.empty()) throw ConfigError("lodo: no seeds given");
  cfg.validate();

  RunReport report;
  report.targets = ds.domain_names;
  for (auto m : methods) report.methods.emplace_back(to_string(m));
  report.seeds = seeds;
  report.fingerprint = config_fingerprint(cfg, ds);

  for (const auto& target : ds.domain_names) {
    const LodoSplit split = leave_one_domain_out(ds, target);
    for (auto method : methods) {
      ReportCell cell{target, std::string(to_string(method)), {}, {}, 0.0, 0.0};
      for (auto seed : seeds) {
        const std::string tag =
            "target " + target + ", method " + cell.method + ", seed " + std::to_string(seed) + ": ";
        tagged(tag, [&] {
          const auto [fit, val] = split_holdout(split.train, options.holdout_fraction, seed);
          TrainConfig run_cfg = cfg;
          run_cfg.strategy_mode = method;
          run_cfg.seed = seed;
          const TrainResult result = train(fit, run_cfg);
          cell.target_accuracy.push_back(evaluate(result.model, split.test));
          cell.heldin_accuracy.push_back(val.size() ? evaluate(result.model, val) : evaluate(result.model, fit));
        });
      }
      cell.mean = mean_of(cell.target_accuracy);
      cell.heldin_mean = mean_of(cell.heldin_accuracy);
      report.cells.push_back(std::move(cell));
    }
  }
  for (const auto& method : report.methods) {
    MethodSummary s{method, 0.0, 0.0};
    for (const auto& target : report.targets) {
      const auto& c = report.cell(target, method);
      s.mean += c.mean;
      s.heldin_mean += c.heldin_mean;
    }
    s.mean /= static_cast<double>(report.targets.size());
    s.heldin_mean /= static_cast<double>(report.targets.size());
    report.footer.push_back(s);
  }
  verify_report(report);
  return report;
}

StrategyMode mode_for(const GridPoint& p) {
  const bool align = p.alpha > 0.0;
  const bool mask = p.m_percent > 0.0 && p.q_max > 0.0;
  if (align && mask) return StrategyMode::alternate;
  if (align) return StrategyMode::align_only;
  if (mask) return StrategyMode::mask_only;
  return StrategyMode::ce_only;
}

AblationReport ablation_grid(const DomainDataset& ds, const TrainConfig& base_cfg, const std::vector<GridPoint>& grid,
                             const std::vector<std::uint64_t>& seeds, const LodoOptions& options) {
  if (grid.empty()) throw ConfigError("ablation: empty grid");
  AblationReport out;
  out.fingerprint = config_fingerprint(base_cfg, ds);
  for (const auto& p : grid) {
    TrainConfig cfg = base_cfg;
    cfg.alpha = p.alpha;
    cfg.m_percent = p.m_percent;
    cfg.q_max = p.q_max;
    const StrategyMode mode = mode_for(p);
    out.rows.push_back({p, mode, lodo_experiment(ds, cfg, {mode}, seeds, options)});
  }
  return out;
}

std::vector<GridPoint> grid_from_json(const nlohmann::json& doc) {
  const nlohmann::json& list = doc.is_object() && doc.contains("grid") ? doc["grid"] : doc;
  if (!list.is_array() || list.empty()) throw ConfigError("grid: expected a nonempty array of grid points");
  std::vector<GridPoint> grid;
  try {
    for (const auto& item : list) {
      GridPoint p;
      if (item.is_array()) {
        if (item.size() != 3) throw ConfigError("grid: array entries must be [alpha, m, q_max]");
        p = {item[0].get<double>(), item[1].get<double>(), item[2].get<double>()};
      } else {
        p = {item.at("alpha").get<double>(), item.at("m_percent").get<double>(), item.at("q_max").get<double>()};
      }
      if (!(p.alpha >= 0.0) || !(p.m_percent >= 0.0 && p.m_percent <= 100.0) || !(p.q_max >= 0.0 && p.q_max <= 100.0)) {
        throw ConfigError("grid: point out of range");
      }
      grid.push_back(p);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("grid: ") + e.what());
  }
  return grid;
}

nlohmann::json to_json(const RunReport& report) {
  verify_report(report);
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : report.cells) {
    cells.push_back({{"target", c.target},
                     {"method", c.method},
                     {"target_accuracy", c.target_accuracy},
                     {"heldin_accuracy", c.heldin_accuracy},
                     {"mean", c.mean},
                     {"heldin_mean", c.heldin_mean}});
  }
  nlohmann::json footer = nlohmann::json::array();
  for (const auto& s : report.footer) {
    footer.push_back({{"method", s.method}, {"mean", s.mean}, {"heldin_mean", s.heldin_mean}});
  }
  return {{"targets", report.targets}, {"methods", report.methods}, {"seeds", report.seeds},
          {"cells", cells},            {"average", footer},         {"fingerprint", report.fingerprint}};
}

nlohmann::json to_json(const AblationReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"alpha", r.point.alpha},
                    {"m_percent", r.point.m_percent},
                    {"q_max", r.point.q_max},
                    {"mode", std::string(to_string(r.mode))},
                    {"report", to_json(r.report)}});
  }
  return {{"rows", rows}, {"fingerprint", report.fingerprint}};
}

std::string to_text(const RunReport& report) {
  std::size_t name_w = 6;
  for (const auto& m : report.methods) name_w = std::max(name_w, m.size());
  std::ostringstream out;
  out << pad("method", name_w, true);
  for (const auto& t : report.targets) out << "  " << pad(t, 7);
  out << "  " << pad("Avg", 7) << "  " << pad("held-in", 7) << '\n';
  for (const auto& m : report.methods) {
    out << pad(m, name_w, true);
    for (const auto& t : report.targets) out << "  " << pad(percent(report.cell(t, m).mean), 7);
    const auto& s = report.summary(m);
    out << "  " << pad(percent(s.mean), 7) << "  " << pad(percent(s.heldin_mean), 7) << '\n';
  }
  out << "seeds:";
  for (auto s : report.seeds) out << ' ' << s;
  out << "  fingerprint: " << report.fingerprint << '\n';
  return out.str();
}

std::string to_text(const AblationReport& report) {
  std::ostringstream out;
  if (report.rows.empty()) return "";
  const auto& targets = report.rows.front().report.targets;
  out << pad("alpha", 6) << "  " << pad("m", 4) << "  " << pad("qMax", 4);
  for (const auto& t : targets) out << "  " << pad(t, 7);
  out << "  " << pad("Avg", 7) << "  " << pad("held-in", 7) << '\n';
  for (const auto& r : report.rows) {
    out << pad(hyper(r.point.alpha), 6) << "  " << pad(hyper(r.point.m_percent), 4) << "  "
        << pad(hyper(r.point.q_max), 4);
    const std::string method(to_string(r.mode));
    for (const auto& t : r.report.targets) out << "  " << pad(percent(r.report.cell(t, method).mean), 7);
    const auto& s = r.report.summary(method);
    out << "  " << pad(percent(s.mean), 7) << "  " << pad(percent(s.heldin_mean), 7) << '\n';
  }
  out << "fingerprint: " << report.fingerprint << '\n';
  return out.str();
}

// ---- exports -------------------------------------------------------------------

void export_features(const Model& model, const DomainDataset& held, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  const std::size_t width = model.feature_width();
  out << "domain,label";
  for (std::size_t j = 0; j < width; ++j) out << ",f" << j;
  out << '\n';
  NoGradGuard no_grad;
  const std::size_t sample = held.sample_width();
  for (std::size_t start = 0; start < held.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, held.size() - start);
    Shape shape{n};
    shape.insert(shape.end(), held.input_shape.begin(), held.input_shape.end());
    const auto first = held.x.begin() + static_cast<std::ptrdiff_t>(start * sample);
    const Tensor feats =
        model.features(Tensor(shape, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n * sample))));
    for (std::size_t r = 0; r < n; ++r) {
      out << held.domain[start + r] << ',' << held.y[start + r];
      for (std::size_t j = 0; j < width; ++j) out << ',' << fmt17(feats[r * width + j]);
      out << '\n';
    }
  }
  if (!out) throw Error("failed writing " + path.string());
}

void write_saliency_csv(const std::filesystem::path& path, std::span<const double> x, const SaliencyMap& vanilla,
                        const SaliencyMap& smooth) {
  if (vanilla.scores.size() != x.size() || smooth.scores.size() != x.size()) {
    throw DimensionError("saliency export: map sizes do not match the sample");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "index,value,vanilla,smoothgrad\n";
  for (std::size_t i = 0; i < x.size(); ++i) {
    out << i << ',' << fmt17(x[i]) << ',' << fmt17(vanilla.scores[i]) << ',' << fmt17(smooth.scores[i]) << '\n';
  }
  if (!out) throw Error("failed writing " + path.string());
}

void write_json(const nlohmann::json& doc, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw Error("failed writing " + path.string());
}

}  // namespace dfdg
