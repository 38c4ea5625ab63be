#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dfdg/masking.hpp"
#include "dfdg/rng.hpp"
#include "dfdg/tensor.hpp"

namespace dfdg {

/// Labeled samples from several domains. The domain column exists for
/// splitting and analysis only; the trainer never sees it (see TrainView).
struct DomainDataset {
  Shape input_shape;
  std::size_t num_classes = 0;
  std::vector<double> x;  // row-major, size() * sample_width() values
  std::vector<int> y;
  std::vector<std::string> domain;
  std::vector<std::string> domain_names;  // distinct, in first-seen order

  std::size_t size() const { return y.size(); }
  std::size_t sample_width() const { return numel(input_shape); }
  std::span<const double> row(std::size_t i) const;
  /// All rows as a [N, input_shape...] tensor.
  Tensor features() const;
  /// Throws ParseError on broken invariants; returns warnings for
  /// (domain, class) pairs with no samples.
  std::vector<std::string> validate() const;

  friend bool operator==(const DomainDataset&, const DomainDataset&) = default;
};

/// Domain-free training data: features and labels only. There is no way to
/// recover domain tags from a TrainView.
class TrainView {
 public:
  TrainView(Shape input_shape, std::size_t num_classes, std::vector<double> x, std::vector<int> y);

  const Shape& input_shape() const { return input_shape_; }
  std::size_t num_classes() const { return num_classes_; }
  std::size_t size() const { return y_.size(); }
  std::size_t sample_width() const { return numel(input_shape_); }
  std::span<const double> features() const { return x_; }
  std::span<const int> labels() const { return y_; }
  std::span<const double> row(std::size_t i) const;
  /// Rows `indices` as a batch.
  Batch gather(std::span<const std::size_t> indices) const;
  /// All rows as a [N, input_shape...] tensor.
  Tensor tensor() const;

 private:
  Shape input_shape_;
  std::size_t num_classes_;
  std::vector<double> x_;
  std::vector<int> y_;
};

/// Drops the domain column.
TrainView strip_domains(const DomainDataset& ds);

/// Random in-source holdout: returns (fit, validation) with
/// round(fraction * N) validation rows.
std::pair<TrainView, TrainView> split_holdout(const TrainView& view, double fraction, std::uint64_t seed);

struct LodoSplit {
  TrainView train;
  DomainDataset train_held;  // source rows with tags, for analysis exports only
  DomainDataset test;
};

/// Rows of `target` form the test set; all other rows form the source set.
LodoSplit leave_one_domain_out(const DomainDataset& ds, const std::string& target);

/// Endless stream of class-balanced batches of a fixed size. Each batch is a
/// uniform draw with replacement; rows of the current majority class are then
/// replaced by uniform draws (with replacement) from deficient classes until
/// every class count is >= min_ratio * the largest class count.
class BatchStream {
 public:
  BatchStream(const TrainView& data, std::size_t batch_size, double min_ratio, Rng rng);

  Batch next();
  /// Row indices of the next batch (the same draw next() would make).
  std::vector<std::size_t> next_indices();

 private:
  const TrainView* data_;
  std::size_t batch_size_;
  double min_ratio_;
  Rng rng_;
  std::vector<std::vector<std::size_t>> pools_;
};

// ---- synthetic generators ------------------------------------------------

struct SpuriousGaussianParams {
  std::size_t num_domains = 4;
  std::size_t classes = 3;
  std::size_t signal_dims = 2;
  std::size_t nuisance_dims = 8;
  double nuisance_strength = 3.0;
  double noise_sd = 0.5;
  std::size_t n_per_domain_class = 500;
  std::uint64_t seed = 0;
};

/// Tabular data with class signal that is stable across domains plus nuisance
/// dimensions whose class-conditional means are redrawn for every domain.
DomainDataset generate_spurious_gaussian(const SpuriousGaussianParams& p);

struct WaveformParams {
  std::size_t num_domains = 4;
  std::size_t classes = 3;
  std::size_t length = 64;
  std::size_t n_per_domain_class = 100;
  double background_amplitude = 1.0;
  double noise_sd = 0.1;
  std::uint64_t seed = 0;
};

/// Single-channel series ([1, length]): a class-specific burst in a central
/// window plus a domain-specific background (drift and periodic interference)
/// outside that window.
DomainDataset generate_shifted_waveforms(const WaveformParams& p);

/// One series for (domain, class) drawn from `sample_seed`.
std::vector<double> waveform_sample(const WaveformParams& p, std::size_t domain, int cls,
                                    std::uint64_t sample_seed);

/// [begin, end) of the motif window for a series of the given length.
std::pair<std::size_t, std::size_t> waveform_motif_window(std::size_t length);

// ---- files ------------------------------------------------------------------

/// Writes dir/data.csv (header domain,label,x0..x{d-1}; 17 significant
/// digits) and dir/meta.json ({input_shape, num_classes, domains}).
void save_dataset(const DomainDataset& ds, const std::filesystem::path& dir);

/// Reads a dataset written by save_dataset. `path` may be the directory or
/// the CSV file; without a sidecar the input is flat and C = max label + 1.
DomainDataset load_dataset(const std::filesystem::path& path);

}  // namespace dfdg
