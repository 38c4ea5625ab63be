#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfdg/rng.hpp"
#include "dfdg/tensor.hpp"

namespace dfdg {

enum class LayerKind { affine, relu, conv1d, global_avg_pool, flatten };

std::string_view to_string(LayerKind kind);

struct Layer {
  LayerKind kind;
  // Parameter names for affine/conv1d, empty otherwise.
  std::string weight;
  std::string bias;
};

/// Builder arguments; enough to rebuild the layer stack.
struct Architecture {
  enum class Kind { mlp, cnn1d } kind = Kind::mlp;
  // mlp: layer widths, first entry is the flattened input width.
  // cnn1d: channel counts, first entry is the input channel count.
  std::vector<std::size_t> sizes;
  std::size_t kernel = 0;  // cnn1d only
  Shape input_shape;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

class Model;

/// Affine+ReLU stack with a final affine head. layer_sizes[0] is the input
/// width; input_shape, when given, must flatten to that width.
/// Weights and biases are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Model build_mlp(const std::vector<std::size_t>& layer_sizes, std::size_t num_classes,
                std::uint64_t seed, Shape input_shape = {});
/// conv1d+ReLU blocks (same padding, stride 1), global average pooling and
/// an affine head. channels[0] is the input channel count; the model's input
/// shape is [channels[0], length].
Model build_cnn1d(const std::vector<std::size_t>& channels, std::size_t kernel,
                  std::size_t num_classes, std::uint64_t seed, std::size_t length);
Model model_from_json(const nlohmann::json& doc);
/// Row-wise input gradients d f(x_r)[classes[r]] / dx_r for a batch in one
/// backward pass. Rows do not interact, so each row equals the single-sample
/// result bit for bit.
Tensor logit_input_gradients(const Model& model, const Tensor& x, std::span<const int> classes);

/// Classifier f(x; theta): an ordered layer stack ending in a linear head
/// that produces [batch x num_classes] logits.
///
/// Copies are deep: each Model owns its parameter tensors.
class Model {
 public:
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const Architecture& architecture() const { return arch_; }
  const std::vector<Layer>& layers() const { return layers_; }
  const Shape& input_shape() const { return arch_.input_shape; }
  std::size_t num_classes() const { return num_classes_; }
  std::uint64_t seed() const { return seed_; }

  /// Parameter tensors in construction order.
  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
  std::vector<std::pair<std::string, Tensor>>& params() { return params_; }
  const Tensor& param(std::string_view name) const;
  Tensor& param(std::string_view name);
  std::size_t parameter_count() const;

  /// Logits for x of shape [batch, input_shape...]. Records lineage to the
  /// parameters when gradient recording is enabled.
  Tensor forward(const Tensor& x) const;
  /// Activations feeding the final linear head, [batch x width].
  Tensor features(const Tensor& x) const;
  /// Width of the features() output.
  std::size_t feature_width() const;

 private:
  friend Model build_mlp(const std::vector<std::size_t>&, std::size_t, std::uint64_t, Shape);
  friend Model build_cnn1d(const std::vector<std::size_t>&, std::size_t, std::size_t,
                           std::uint64_t, std::size_t);
  friend Model model_from_json(const nlohmann::json&);
  friend Tensor logit_input_gradients(const Model&, const Tensor&, std::span<const int>);

  Model(Architecture arch, std::size_t num_classes, std::uint64_t seed);
  void add_param(std::string name, Shape shape, std::size_t fan_in, std::mt19937_64& rng);
  void check_input(const Tensor& x) const;
  Tensor run(const Tensor& x, bool track_params, bool stop_before_head) const;

  Architecture arch_;
  std::size_t num_classes_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<Layer> layers_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

/// Rebuilds a model for `arch` (used when the dataset fixes the input shape).
Model build_model(const Architecture& arch, std::size_t num_classes, std::uint64_t seed);

/// d f(x)[c] / dx for a single sample x (shape [1, input_shape...] or
/// input_shape). Returns a tensor shaped like input_shape. Parameters are
/// not touched.
Tensor logit_input_gradient(const Model& model, const Tensor& x, int c);

// ---- checkpoints -----------------------------------------------------------

nlohmann::json model_to_json(const Model& model);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace dfdg
