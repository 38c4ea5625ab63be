#include "dfdg/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dfdg/errors.hpp"

namespace dfdg {

namespace {

Shape with_batch(std::size_t rows, const Shape& sample) {
  Shape s{rows};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

std::string domain_label(std::size_t d) {
  if (d < 26) return std::string(1, static_cast<char>('A' + d));
  return "D" + std::to_string(d);
}

}  // namespace

// ---- DomainDataset -----------------------------------------------------------

std::span<const double> DomainDataset::row(std::size_t i) const {
  const std::size_t w = sample_width();
  return std::span<const double>(x).subspan(i * w, w);
}

Tensor DomainDataset::features() const { return Tensor(with_batch(size(), input_shape), x); }

std::vector<std::string> DomainDataset::validate() const {
  const std::size_t w = sample_width();
  if (w == 0) throw ParseError("dataset: empty input shape");
  if (num_classes < 2) throw ParseError("dataset: need at least 2 classes");
  if (x.size() != y.size() * w) {
    throw ParseError("dataset: " + std::to_string(x.size()) + " feature values for " +
                     std::to_string(y.size()) + " rows of width " + std::to_string(w));
  }
  if (domain.size() != y.size()) throw ParseError("dataset: domain column length mismatch");
  const std::set<std::string> names(domain_names.begin(), domain_names.end());
  std::set<std::pair<std::string, int>> seen;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= num_classes) {
      throw ParseError("dataset: row " + std::to_string(i) + " has label " + std::to_string(y[i]) +
                       " outside [0, " + std::to_string(num_classes) + ")");
    }
    if (!names.count(domain[i])) {
      throw ParseError("dataset: row " + std::to_string(i) + " has unknown domain '" + domain[i] + "'");
    }
    seen.emplace(domain[i], y[i]);
  }
  std::vector<std::string> warnings;
  for (const auto& d : domain_names) {
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (!seen.count({d, static_cast<int>(c)})) {
        warnings.push_back("domain '" + d + "' has no samples of class " + std::to_string(c));
      }
    }
  }
  return warnings;
}

// ---- TrainView -----------------------------------------------------------------

TrainView::TrainView(Shape input_shape, std::size_t num_classes, std::vector<double> x, std::vector<int> y)
    : input_shape_(std::move(input_shape)), num_classes_(num_classes), x_(std::move(x)), y_(std::move(y)) {
  if (x_.size() != y_.size() * numel(input_shape_)) {
    throw DimensionError("train view: " + std::to_string(x_.size()) + " values for " +
                         std::to_string(y_.size()) + " rows of shape " + to_string(input_shape_));
  }
}

std::span<const double> TrainView::row(std::size_t i) const {
  const std::size_t w = sample_width();
  return std::span<const double>(x_).subspan(i * w, w);
}

Batch TrainView::gather(std::span<const std::size_t> indices) const {
  const std::size_t w = sample_width();
  std::vector<double> xs(indices.size() * w);
  std::vector<int> ys(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto r = row(indices[k]);
    std::copy(r.begin(), r.end(), xs.begin() + static_cast<std::ptrdiff_t>(k * w));
    ys[k] = y_[indices[k]];
  }
  return {Tensor(with_batch(indices.size(), input_shape_), std::move(xs)), std::move(ys)};
}

Tensor TrainView::tensor() const { return Tensor(with_batch(size(), input_shape_), x_); }

TrainView strip_domains(const DomainDataset& ds) { return TrainView(ds.input_shape, ds.num_classes, ds.x, ds.y); }

std::pair<TrainView, TrainView> split_holdout(const TrainView& view, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ConfigError("split_holdout: fraction must be in [0, 1)");
  std::vector<std::size_t> order(view.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, 0x401d);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::round(fraction * static_cast<double>(view.size())));
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> fit(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  // Keep source order inside each part.
  std::sort(val.begin(), val.end());
  std::sort(fit.begin(), fit.end());
  auto take = [&](const std::vector<std::size_t>& idx) {
    Batch b = view.gather(idx);
    return TrainView(view.input_shape(), view.num_classes(),
                     std::vector<double>(b.x.values().begin(), b.x.values().end()), std::move(b.labels));
  };
  return {take(fit), take(val)};
}

LodoSplit leave_one_domain_out(const DomainDataset& ds, const std::string& target) {
  if (ds.domain_names.size() < 2) throw ConfigError("leave_one_domain_out: need at least 2 domains");
  if (std::find(ds.domain_names.begin(), ds.domain_names.end(), target) == ds.domain_names.end()) {
    throw ConfigError("leave_one_domain_out: unknown target domain '" + target + "'");
  }
  DomainDataset held{ds.input_shape, ds.num_classes, {}, {}, {}, {}};
  DomainDataset test{ds.input_shape, ds.num_classes, {}, {}, {}, {target}};
  for (const auto& d : ds.domain_names) {
    if (d != target) held.domain_names.push_back(d);
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    DomainDataset& dst = ds.domain[i] == target ? test : held;
    const auto r = ds.row(i);
    dst.x.insert(dst.x.end(), r.begin(), r.end());
    dst.y.push_back(ds.y[i]);
    dst.domain.push_back(ds.domain[i]);
  }
  TrainView train = strip_domains(held);
  return {std::move(train), std::move(held), std::move(test)};
}

// ---- BatchStream -------------------------------------------------------------

BatchStream::BatchStream(const TrainView& data, std::size_t batch_size, double min_ratio, Rng rng)
    : data_(&data), batch_size_(batch_size), min_ratio_(min_ratio), rng_(std::move(rng)) {
  const std::size_t classes = data.num_classes();
  if (batch_size < classes) {
    throw ConfigError("batch stream: batch size " + std::to_string(batch_size) + " is smaller than the " +
                      std::to_string(classes) + " classes");
  }
  if (!(min_ratio > 0.0 && min_ratio <= 1.0)) throw ConfigError("batch stream: min_ratio must be in (0, 1]");
  pools_.resize(classes);
  for (std::size_t i = 0; i < data.size(); ++i) pools_[static_cast<std::size_t>(data.labels()[i])].push_back(i);
  for (std::size_t c = 0; c < classes; ++c) {
    if (pools_[c].empty()) {
      throw ConfigError("batch stream: class " + std::to_string(c) + " has no training samples");
    }
  }
  // Some class-count vector with the requested ratio must fit the batch.
  bool feasible = false;
  for (std::size_t m = (batch_size + classes - 1) / classes; m <= batch_size && !feasible; ++m) {
    const auto floor_count = static_cast<std::size_t>(std::ceil(min_ratio * static_cast<double>(m) - 1e-12));
    feasible = m + (classes - 1) * floor_count <= batch_size && batch_size <= classes * m;
  }
  if (!feasible) {
    throw ConfigError("batch stream: no batch of size " + std::to_string(batch_size) +
                      " can satisfy min_ratio " + std::to_string(min_ratio));
  }
}

std::vector<std::size_t> BatchStream::next_indices() {
  const std::size_t classes = pools_.size();
  const auto labels = data_->labels();
  std::uniform_int_distribution<std::size_t> any(0, data_->size() - 1);
  std::vector<std::size_t> rows(batch_size_);
  std::vector<std::size_t> counts(classes, 0);
  for (auto& r : rows) {
    r = any(rng_);
    ++counts[static_cast<std::size_t>(labels[r])];
  }

  for (std::size_t guard = 0;; ++guard) {
    if (guard > 16 * batch_size_) throw ContractError("batch stream: rebalancing did not converge");
    const auto major = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    const double need = min_ratio_ * static_cast<double>(counts[major]);
    const auto minor = static_cast<std::size_t>(std::min_element(counts.begin(), counts.end()) - counts.begin());
    if (static_cast<double>(counts[minor]) >= need) break;

    // Replace a uniformly chosen majority row with a draw from the minority pool.
    std::uniform_int_distribution<std::size_t> which(0, counts[major] - 1);
    std::size_t skip = which(rng_);
    std::size_t slot = 0;
    for (; slot < rows.size(); ++slot) {
      if (static_cast<std::size_t>(labels[rows[slot]]) == major && skip-- == 0) break;
    }
    const auto& pool = pools_[minor];
    std::uniform_int_distribution<std::size_t> from_pool(0, pool.size() - 1);
    rows[slot] = pool[from_pool(rng_)];
    --counts[major];
    ++counts[minor];
  }
  return rows;
}

Batch BatchStream::next() {
  const auto rows = next_indices();
  return data_->gather(rows);
}

// ---- generators ----------------------------------------------------------------

DomainDataset generate_spurious_gaussian(const SpuriousGaussianParams& p) {
  if (p.num_domains < 1 || p.classes < 2 || p.signal_dims < 1 || p.n_per_domain_class < 1) {
    throw ConfigError("spurious gaussian: need >= 1 domain, >= 2 classes, >= 1 signal dim and >= 1 sample");
  }
  if (!(p.noise_sd > 0.0) || !(p.nuisance_strength >= 0.0)) {
    throw ConfigError("spurious gaussian: noise_sd must be > 0 and nuisance_strength >= 0");
  }
  const std::size_t width = p.signal_dims + p.nuisance_dims;
  DomainDataset ds;
  ds.input_shape = {width};
  ds.num_classes = p.classes;
  ds.x.reserve(p.num_domains * p.classes * p.n_per_domain_class * width);

  // Signal: class means one unit apart along every signal dimension, shared
  // by all domains.
  auto signal_mean = [&](std::size_t c) {
    return static_cast<double>(c) - 0.5 * static_cast<double>(p.classes - 1);
  };
  // Nuisance: per (domain, class) a balanced +-1 pattern over the nuisance
  // dimensions, scaled so its norm equals nuisance_strength. Patterns are
  // redrawn for every domain.
  const double per_dim =
      p.nuisance_dims ? p.nuisance_strength / std::sqrt(static_cast<double>(p.nuisance_dims)) : 0.0;

  for (std::size_t d = 0; d < p.num_domains; ++d) {
    const std::string name = domain_label(d);
    ds.domain_names.push_back(name);
    Rng pattern_rng = make_rng(p.seed, 1000 + d);
    std::vector<std::vector<double>> nuisance(p.classes, std::vector<double>(p.nuisance_dims));
    for (auto& pattern : nuisance) {
      for (std::size_t j = 0; j < p.nuisance_dims; ++j) pattern[j] = j < p.nuisance_dims / 2 ? per_dim : -per_dim;
      std::shuffle(pattern.begin(), pattern.end(), pattern_rng);
    }
    for (std::size_t c = 0; c < p.classes; ++c) {
      Rng rng = make_rng(p.seed, 100000 + d * p.classes + c);
      std::normal_distribution<double> noise(0.0, p.noise_sd);
      for (std::size_t i = 0; i < p.n_per_domain_class; ++i) {
        for (std::size_t j = 0; j < p.signal_dims; ++j) ds.x.push_back(signal_mean(c) + noise(rng));
        for (std::size_t j = 0; j < p.nuisance_dims; ++j) ds.x.push_back(nuisance[c][j] + noise(rng));
        ds.y.push_back(static_cast<int>(c));
        ds.domain.push_back(name);
      }
    }
  }
  return ds;
}

std::pair<std::size_t, std::size_t> waveform_motif_window(std::size_t length) {
  const std::size_t width = length / 4;
  const std::size_t begin = (length - width) / 2;
  return {begin, begin + width};
}

namespace {

struct DomainBackground {
  double offset, slope, freq, amplitude;
};

DomainBackground background_for(const WaveformParams& p, std::size_t domain) {
  Rng rng = make_rng(p.seed, 5000 + domain);
  std::uniform_real_distribution<double> offset(-1.0, 1.0), slope(-1.5, 1.5), freq(2.0, 8.0), amp(0.5, 1.5);
  return {offset(rng), slope(rng), freq(rng), amp(rng)};
}

}  // namespace

std::vector<double> waveform_sample(const WaveformParams& p, std::size_t domain, int cls,
                                    std::uint64_t sample_seed) {
  const auto bg = background_for(p, domain);
  const auto [begin, end] = waveform_motif_window(p.length);
  const double width = static_cast<double>(end - begin);
  const double pi = std::numbers::pi;
  Rng rng(sample_seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * pi), gain(0.8, 1.2);
  std::normal_distribution<double> noise(0.0, p.noise_sd);
  const double interference_phase = phase(rng);
  const double motif_gain = gain(rng);
  const double cycles = 1.0 + static_cast<double>(cls);

  std::vector<double> series(p.length);
  for (std::size_t t = 0; t < p.length; ++t) {
    double v = 0.0;
    if (t >= begin && t < end) {
      const double u = (static_cast<double>(t - begin) + 0.5) / width;
      const double window = std::sin(pi * u);
      v = motif_gain * 2.0 * window * window * std::sin(2.0 * pi * cycles * u);
    } else {
      const double tau = static_cast<double>(t) / static_cast<double>(p.length);
      v = p.background_amplitude *
          (bg.offset + bg.slope * tau + bg.amplitude * std::sin(2.0 * pi * bg.freq * tau + interference_phase));
    }
    series[t] = v + noise(rng);
  }
  return series;
}

DomainDataset generate_shifted_waveforms(const WaveformParams& p) {
  if (p.length < 16) throw ConfigError("waveforms: length must be >= 16");
  if (p.num_domains < 1 || p.classes < 2 || p.n_per_domain_class < 1) {
    throw ConfigError("waveforms: need >= 1 domain, >= 2 classes and >= 1 sample");
  }
  if (!(p.noise_sd >= 0.0) || !(p.background_amplitude >= 0.0)) {
    throw ConfigError("waveforms: noise_sd and background_amplitude must be >= 0");
  }
  DomainDataset ds;
  ds.input_shape = {1, p.length};
  ds.num_classes = p.classes;
  for (std::size_t d = 0; d < p.num_domains; ++d) {
    const std::string name = domain_label(d);
    ds.domain_names.push_back(name);
    for (std::size_t c = 0; c < p.classes; ++c) {
      for (std::size_t i = 0; i < p.n_per_domain_class; ++i) {
        // The per-sample seed ignores the domain so that the same draw under
        // a zero-amplitude background is identical across domains.
        const auto seed = mix_seed(p.seed, (c << 32) + i);
        const auto s = waveform_sample(p, d, static_cast<int>(c), seed);
        ds.x.insert(ds.x.end(), s.begin(), s.end());
        ds.y.push_back(static_cast<int>(c));
        ds.domain.push_back(name);
      }
    }
  }
  return ds;
}

// ---- files ----------------------------------------------------------------------

namespace {

std::filesystem::path csv_path(const std::filesystem::path& p) {
  return std::filesystem::is_directory(p) ? p / "data.csv" : p;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

void save_dataset(const DomainDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "data.csv", std::ios::binary);
    if (!out) throw Error("cannot write " + (dir / "data.csv").string());
    out << "domain,label";
    for (std::size_t j = 0; j < ds.sample_width(); ++j) out << ",x" << j;
    out << '\n';
    char buf[64];
    for (std::size_t i = 0; i < ds.size(); ++i) {
      out << ds.domain[i] << ',' << ds.y[i];
      for (double v : ds.row(i)) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << ',' << buf;
      }
      out << '\n';
    }
    if (!out) throw Error("failed writing " + (dir / "data.csv").string());
  }
  nlohmann::json meta{{"input_shape", ds.input_shape}, {"num_classes", ds.num_classes}, {"domains", ds.domain_names}};
  std::ofstream out(dir / "meta.json", std::ios::binary);
  if (!out) throw Error("cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << '\n';
}

DomainDataset load_dataset(const std::filesystem::path& path) {
  const auto csv = csv_path(path);
  std::ifstream in(csv, std::ios::binary);
  if (!in) throw ParseError("cannot read dataset " + csv.string());

  DomainDataset ds;
  std::vector<std::string> declared_domains;
  const auto sidecar = csv.parent_path() / "meta.json";
  const bool has_sidecar = std::filesystem::exists(sidecar);
  if (has_sidecar) {
    std::ifstream meta_in(sidecar, std::ios::binary);
    try {
      nlohmann::json meta;
      meta_in >> meta;
      ds.input_shape = meta.at("input_shape").get<Shape>();
      ds.num_classes = meta.at("num_classes").get<std::size_t>();
      if (meta.contains("domains")) declared_domains = meta["domains"].get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(sidecar.string() + ": " + e.what());
    }
  }

  std::string line;
  if (!std::getline(in, line)) throw ParseError(csv.string() + ": missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_commas(line);
  if (header.size() < 3 || header[0] != "domain" || header[1] != "label") {
    throw ParseError(csv.string() + ": header must start with domain,label,x0");
  }
  const std::size_t width = header.size() - 2;
  for (std::size_t j = 0; j < width; ++j) {
    if (header[j + 2] != "x" + std::to_string(j)) {
      throw ParseError(csv.string() + ": header column " + std::to_string(j + 2) + " should be x" + std::to_string(j));
    }
  }
  if (has_sidecar && numel(ds.input_shape) != width) {
    throw ParseError(csv.string() + ": " + std::to_string(width) + " feature columns but sidecar input_shape " +
                     to_string(ds.input_shape));
  }
  if (!has_sidecar) ds.input_shape = {width};

  std::set<std::string> declared(declared_domains.begin(), declared_domains.end());
  int max_label = -1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_commas(line);
    const std::string where = csv.string() + ": row " + std::to_string(line_no);
    if (fields.size() != width + 2) {
      throw ParseError(where + ": expected " + std::to_string(width + 2) + " fields, got " +
                       std::to_string(fields.size()));
    }
    std::string domain(fields[0]);
    if (domain.empty()) throw ParseError(where + ": empty domain");
    if (!declared.empty() && !declared.count(domain)) throw ParseError(where + ": unknown domain '" + domain + "'");
    int label = 0;
    if (!parse_number(fields[1], label) || label < 0) {
      throw ParseError(where + ": bad label '" + std::string(fields[1]) + "'");
    }
    if (has_sidecar && static_cast<std::size_t>(label) >= ds.num_classes) {
      throw ParseError(where + ": label " + std::to_string(label) + " >= num_classes " +
                       std::to_string(ds.num_classes));
    }
    for (std::size_t j = 0; j < width; ++j) {
      double v = 0.0;
      if (!parse_number(fields[j + 2], v)) {
        throw ParseError(where + ": bad value '" + std::string(fields[j + 2]) + "' in column x" + std::to_string(j));
      }
      ds.x.push_back(v);
    }
    max_label = std::max(max_label, label);
    ds.y.push_back(label);
    if (std::find(ds.domain_names.begin(), ds.domain_names.end(), domain) == ds.domain_names.end()) {
      ds.domain_names.push_back(domain);
    }
    ds.domain.push_back(std::move(domain));
  }
  if (!has_sidecar) ds.num_classes = static_cast<std::size_t>(max_label + 1);
  if (!declared_domains.empty()) {
    // Keep the declared order, which covers domains with no rows as well.
    ds.domain_names = declared_domains;
  }
  ds.validate();
  return ds;
}

}  // namespace dfdg
