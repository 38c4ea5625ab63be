#pragma once

#include <map>
#include <span>
#include <vector>

#include "dfdg/tensor.hpp"

namespace dfdg {

/// Soft labels p_i (rows of a [batch x C] probability tensor) with their
/// class labels. There is deliberately no domain field.
struct SoftLabelBatch {
  Tensor probs;
  std::vector<int> labels;
};

/// Validates the simplex/label invariants (rows sum to 1 +- 1e-9, entries
/// >= 0, labels in [0, C)) and returns the batch.
SoftLabelBatch make_soft_labels(Tensor probs, std::vector<int> labels);

/// Mean negative log-likelihood of the labels under softmax(logits),
/// computed with log-sum-exp. Returns a rank-0 tensor.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Per-class mean soft label for the classes present in the batch.
std::map<int, std::vector<double>> class_centroids(const SoftLabelBatch& soft);

/// sum_c (1/|B(c)|) sum_{i in B(c)} ||p_i - mu(c)||^2 over classes present in
/// the batch. The centroid is part of the differentiated graph.
Tensor alignment_loss(const SoftLabelBatch& soft);

/// cross_entropy(logits) + alpha * alignment_loss(softmax(logits)).
/// Throws ConfigError for negative alpha.
Tensor total_loss(const Tensor& logits, std::span<const int> labels, double alpha);

}  // namespace dfdg
