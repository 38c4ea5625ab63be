#include "dfdg/losses.hpp"

#include <algorithm>
#include <cmath>

#include "dfdg/errors.hpp"

namespace dfdg {

namespace {

void check_labels(const Tensor& m, std::span<const int> labels, const char* op) {
  if (m.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected [batch x C], got " + to_string(m.shape()));
  }
  if (labels.size() != m.dim(0)) {
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                         to_string(m.shape()));
  }
  const auto classes = static_cast<int>(m.dim(1));
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw IndexError(std::string(op) + ": label " + std::to_string(y) + " out of range [0, " +
                       std::to_string(classes) + ")");
    }
  }
}

}  // namespace

SoftLabelBatch make_soft_labels(Tensor probs, std::vector<int> labels) {
  check_labels(probs, labels, "soft labels");
  const std::size_t cols = probs.dim(1);
  const auto p = probs.values();
  for (std::size_t r = 0; r < probs.dim(0); ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = p[r * cols + c];
      if (!(v >= 0.0)) throw ContractError("soft labels: negative or NaN entry in row " + std::to_string(r));
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw ContractError("soft labels: row " + std::to_string(r) + " sums to " + std::to_string(total));
    }
  }
  return {std::move(probs), std::move(labels)};
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() == 2 && logits.dim(0) == 0) throw ContractError("cross_entropy: empty batch");
  check_labels(logits, labels, "cross_entropy");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  const auto z = logits.values();

  // Keep softmax rows for the backward pass: d/dz = (softmax - onehot) / B.
  std::vector<double> probs(z.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = z.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(row[c] - mx);
    const double lse = mx + std::log(s);
    total += lse - row[labels[r]];
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] = std::exp(row[c] - lse);
  }
  const double batch = static_cast<double>(rows);
  std::vector<int> y(labels.begin(), labels.end());
  return Tensor::from_op(
      "cross_entropy", {}, {total / batch}, {logits},
      [probs = std::move(probs), y = std::move(y), rows, cols, batch](const BackwardArgs& a) {
        auto& gz = *a.grad_inputs[0];
        const double g = a.grad_output[0] / batch;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            const double onehot = static_cast<int>(c) == y[r] ? 1.0 : 0.0;
            gz[r * cols + c] += g * (probs[r * cols + c] - onehot);
          }
        }
      });
}

std::map<int, std::vector<double>> class_centroids(const SoftLabelBatch& soft) {
  const auto& p = soft.probs;
  check_labels(p, soft.labels, "class_centroids");
  if (p.dim(0) == 0) throw ContractError("class_centroids: empty batch");
  const std::size_t cols = p.dim(1);
  // Incremental mean: identical rows give a centroid equal to them bit for bit.
  std::map<int, std::vector<double>> means;
  std::map<int, std::size_t> counts;
  for (std::size_t r = 0; r < soft.labels.size(); ++r) {
    auto& mu = means[soft.labels[r]];
    mu.resize(cols, 0.0);
    const double k = static_cast<double>(++counts[soft.labels[r]]);
    for (std::size_t c = 0; c < cols; ++c) mu[c] += (p.values()[r * cols + c] - mu[c]) / k;
  }
  return means;
}

Tensor alignment_loss(const SoftLabelBatch& soft) {
  const auto centroids = class_centroids(soft);
  const auto& p = soft.probs;
  const std::size_t rows = p.dim(0), cols = p.dim(1);
  std::map<int, double> counts;
  for (int y : soft.labels) counts[y] += 1.0;

  const auto pv = p.values();
  double total = 0.0;
  for (const auto& [cls, mu] : centroids) {
    double within = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      if (soft.labels[r] != cls) continue;
      for (std::size_t c = 0; c < cols; ++c) {
        const double d = pv[r * cols + c] - mu[c];
        within += d * d;
      }
    }
    total += within / counts[cls];
  }

  // d/dp_i = (2/n_c)(p_i - mu(c)) - (2/n_c^2) sum_j (p_j - mu(c)).
  // The second term is the path through mu(c); it vanishes analytically.
  return Tensor::from_op(
      "alignment_loss", {}, {total}, {p},
      [p, labels = soft.labels, centroids, counts, rows, cols](const BackwardArgs& a) {
        auto& gp = *a.grad_inputs[0];
        const auto pv = p.values();
        const double g = a.grad_output[0];
        for (const auto& [cls, mu] : centroids) {
          const double n = counts.at(cls);
          std::vector<double> residual_sum(cols, 0.0);
          for (std::size_t r = 0; r < rows; ++r) {
            if (labels[r] != cls) continue;
            for (std::size_t c = 0; c < cols; ++c) residual_sum[c] += pv[r * cols + c] - mu[c];
          }
          for (std::size_t r = 0; r < rows; ++r) {
            if (labels[r] != cls) continue;
            for (std::size_t c = 0; c < cols; ++c) {
              const double direct = 2.0 / n * (pv[r * cols + c] - mu[c]);
              const double via_centroid = 2.0 / (n * n) * residual_sum[c];
              gp[r * cols + c] += g * (direct - via_centroid);
            }
          }
        }
      });
}

Tensor total_loss(const Tensor& logits, std::span<const int> labels, double alpha) {
  if (!(alpha >= 0.0)) throw ConfigError("total_loss: alpha must be >= 0, got " + std::to_string(alpha));
  Tensor ce = cross_entropy(logits, labels);
  if (alpha == 0.0) return ce;
  const SoftLabelBatch soft{softmax_rows(logits), std::vector<int>(labels.begin(), labels.end())};
  return add(ce, scale(alignment_loss(soft), alpha));
}

}  // namespace dfdg
