#include "dfdg/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "dfdg/errors.hpp"

namespace dfdg {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::affine: return "affine";
    case LayerKind::relu: return "relu";
    case LayerKind::conv1d: return "conv1d";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

Model::Model(Architecture arch, std::size_t num_classes, std::uint64_t seed)
    : arch_(std::move(arch)), num_classes_(num_classes), seed_(seed) {}

Model::Model(const Model& other)
    : arch_(other.arch_),
      num_classes_(other.num_classes_),
      seed_(other.seed_),
      layers_(other.layers_) {
  params_.reserve(other.params_.size());
  for (const auto& [name, t] : other.params_) params_.emplace_back(name, t.clone());
}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    Model copy(other);
    *this = std::move(copy);
  }
  return *this;
}

const Tensor& Model::param(std::string_view name) const {
  auto it = std::find_if(params_.begin(), params_.end(),
                         [&](const auto& p) { return p.first == name; });
  if (it == params_.end()) throw IndexError("model: no parameter named '" + std::string(name) + "'");
  return it->second;
}

Tensor& Model::param(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).param(name));
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : params_) total += t.size();
  return total;
}

void Model::add_param(std::string name, Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(numel(shape));
  for (auto& v : values) v = dist(rng);
  Tensor t(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  params_.emplace_back(std::move(name), std::move(t));
}

void Model::check_input(const Tensor& x) const {
  const auto& in = arch_.input_shape;
  const bool ok = x.rank() == in.size() + 1 && std::equal(in.begin(), in.end(), x.shape().begin() + 1);
  if (!ok) {
    throw DimensionError("model: input " + to_string(x.shape()) + " does not match [batch x " +
                         to_string(in) + "]");
  }
}

Tensor Model::run(const Tensor& x, bool track_params, bool stop_before_head) const {
  check_input(x);
  auto weight = [&](const std::string& name) {
    const Tensor& p = param(name);
    return track_params ? p : p.detach();
  };
  Tensor h = x;
  const std::size_t batch = x.dim(0);
  const std::size_t last = layers_.size() - 1;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& layer = layers_[i];
    if (stop_before_head && i == last) break;
    switch (layer.kind) {
      case LayerKind::flatten: h = reshape(h, {batch, h.size() / std::max<std::size_t>(batch, 1)}); break;
      case LayerKind::affine: h = affine(h, weight(layer.weight), weight(layer.bias)); break;
      case LayerKind::relu: h = relu(h); break;
      case LayerKind::conv1d: h = conv1d_same(h, weight(layer.weight), weight(layer.bias)); break;
      case LayerKind::global_avg_pool: h = global_avg_pool(h); break;
    }
  }
  return h;
}

Tensor Model::forward(const Tensor& x) const { return run(x, true, false); }

Tensor Model::features(const Tensor& x) const { return run(x, true, true); }

std::size_t Model::feature_width() const { return arch_.sizes.back(); }

Model build_mlp(const std::vector<std::size_t>& layer_sizes, std::size_t num_classes,
                std::uint64_t seed, Shape input_shape) {
  if (layer_sizes.empty()) throw ConfigError("build_mlp: layer_sizes must be nonempty");
  if (std::any_of(layer_sizes.begin(), layer_sizes.end(), [](std::size_t s) { return s == 0; })) {
    throw ConfigError("build_mlp: layer sizes must be positive");
  }
  if (num_classes < 2) throw ConfigError("build_mlp: num_classes must be at least 2");
  if (input_shape.empty()) input_shape = {layer_sizes.front()};
  if (numel(input_shape) != layer_sizes.front()) {
    throw ConfigError("build_mlp: input shape " + to_string(input_shape) +
                      " does not flatten to width " + std::to_string(layer_sizes.front()));
  }

  Architecture arch{Architecture::Kind::mlp, layer_sizes, 0, std::move(input_shape)};
  const bool needs_flatten = arch.input_shape.size() > 1;
  Model model(std::move(arch), num_classes, seed);
  Rng rng = make_rng(seed);
  if (needs_flatten) model.layers_.push_back({LayerKind::flatten, "", ""});
  for (std::size_t i = 0; i + 1 < layer_sizes.size(); ++i) {
    const std::string w = "fc" + std::to_string(i) + ".weight";
    const std::string b = "fc" + std::to_string(i) + ".bias";
    model.add_param(w, {layer_sizes[i], layer_sizes[i + 1]}, layer_sizes[i], rng);
    model.add_param(b, {layer_sizes[i + 1]}, layer_sizes[i], rng);
    model.layers_.push_back({LayerKind::affine, w, b});
    model.layers_.push_back({LayerKind::relu, "", ""});
  }
  model.add_param("head.weight", {layer_sizes.back(), num_classes}, layer_sizes.back(), rng);
  model.add_param("head.bias", {num_classes}, layer_sizes.back(), rng);
  model.layers_.push_back({LayerKind::affine, "head.weight", "head.bias"});
  return model;
}

Model build_cnn1d(const std::vector<std::size_t>& channels, std::size_t kernel,
                  std::size_t num_classes, std::uint64_t seed, std::size_t length) {
  if (channels.empty()) throw ConfigError("build_cnn1d: channels must be nonempty");
  if (std::any_of(channels.begin(), channels.end(), [](std::size_t c) { return c == 0; })) {
    throw ConfigError("build_cnn1d: channel counts must be positive");
  }
  if (kernel % 2 == 0) throw ConfigError("build_cnn1d: kernel must be odd, got " + std::to_string(kernel));
  if (num_classes < 2) throw ConfigError("build_cnn1d: num_classes must be at least 2");
  if (length == 0) throw ConfigError("build_cnn1d: input length must be positive");

  Architecture arch{Architecture::Kind::cnn1d, channels, kernel, {channels.front(), length}};
  Model model(std::move(arch), num_classes, seed);
  Rng rng = make_rng(seed);
  for (std::size_t i = 0; i + 1 < channels.size(); ++i) {
    const std::string w = "conv" + std::to_string(i) + ".weight";
    const std::string b = "conv" + std::to_string(i) + ".bias";
    const std::size_t fan_in = channels[i] * kernel;
    model.add_param(w, {channels[i + 1], channels[i], kernel}, fan_in, rng);
    model.add_param(b, {channels[i + 1]}, fan_in, rng);
    model.layers_.push_back({LayerKind::conv1d, w, b});
    model.layers_.push_back({LayerKind::relu, "", ""});
  }
  model.layers_.push_back({LayerKind::global_avg_pool, "", ""});
  model.add_param("head.weight", {channels.back(), num_classes}, channels.back(), rng);
  model.add_param("head.bias", {num_classes}, channels.back(), rng);
  model.layers_.push_back({LayerKind::affine, "head.weight", "head.bias"});
  return model;
}

Model build_model(const Architecture& arch, std::size_t num_classes, std::uint64_t seed) {
  switch (arch.kind) {
    case Architecture::Kind::mlp: return build_mlp(arch.sizes, num_classes, seed, arch.input_shape);
    case Architecture::Kind::cnn1d:
      if (arch.input_shape.size() != 2 || arch.sizes.empty() || arch.input_shape[0] != arch.sizes[0]) {
        throw ConfigError("build_model: cnn1d input shape " + to_string(arch.input_shape) +
                          " must be [channels[0], length]");
      }
      return build_cnn1d(arch.sizes, arch.kernel, num_classes, seed, arch.input_shape[1]);
  }
  throw ConfigError("build_model: unknown architecture kind");
}

Tensor logit_input_gradients(const Model& model, const Tensor& x, std::span<const int> classes) {
  model.check_input(x);
  const auto c_max = static_cast<int>(model.num_classes());
  for (int c : classes) {
    if (c < 0 || c >= c_max) {
      throw IndexError("logit_input_gradient: class " + std::to_string(c) + " out of range [0, " +
                       std::to_string(c_max) + ")");
    }
  }
  GradModeGuard recording(true);
  Tensor input = x.detach();
  input.set_requires_grad(true);
  const Tensor logits = model.run(input, false, false);
  const GradMap grads = backward(pick_sum(logits, classes));
  return grads.tensor(input);
}

Tensor logit_input_gradient(const Model& model, const Tensor& x, int c) {
  const Shape& in = model.input_shape();
  Shape batched{1};
  batched.insert(batched.end(), in.begin(), in.end());
  if (x.shape() != in && x.shape() != batched) {
    throw DimensionError("logit_input_gradient: sample " + to_string(x.shape()) +
                         " does not match input shape " + to_string(in));
  }
  const Tensor sample(batched, std::vector<double>(x.values().begin(), x.values().end()));
  const int classes[] = {c};
  const Tensor g = logit_input_gradients(model, sample, classes);
  return Tensor(in, std::vector<double>(g.values().begin(), g.values().end()));
}

// ---- checkpoints -----------------------------------------------------------

nlohmann::json model_to_json(const Model& model) {
  const auto& arch = model.architecture();
  nlohmann::json doc;
  doc["format"] = "dfdg-checkpoint/1";
  doc["architecture"] = {
      {"kind", arch.kind == Architecture::Kind::mlp ? "mlp" : "cnn1d"},
      {"sizes", arch.sizes},
      {"kernel", arch.kernel},
      {"input_shape", arch.input_shape},
  };
  doc["num_classes"] = model.num_classes();
  doc["seed"] = model.seed();
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, t] : model.params()) {
    params[name] = std::vector<double>(t.values().begin(), t.values().end());
  }
  doc["params"] = std::move(params);
  return doc;
}

Model model_from_json(const nlohmann::json& doc) {
  try {
    const auto& a = doc.at("architecture");
    Architecture arch;
    const auto kind = a.at("kind").get<std::string>();
    if (kind == "mlp") {
      arch.kind = Architecture::Kind::mlp;
    } else if (kind == "cnn1d") {
      arch.kind = Architecture::Kind::cnn1d;
    } else {
      throw ParseError("checkpoint: unknown architecture kind '" + kind + "'");
    }
    arch.sizes = a.at("sizes").get<std::vector<std::size_t>>();
    arch.kernel = a.at("kernel").get<std::size_t>();
    arch.input_shape = a.at("input_shape").get<Shape>();
    Model model = build_model(arch, doc.at("num_classes").get<std::size_t>(),
                              doc.at("seed").get<std::uint64_t>());
    const auto& params = doc.at("params");
    if (params.size() != model.params().size()) {
      throw ParseError("checkpoint: expected " + std::to_string(model.params().size()) +
                       " parameter arrays, found " + std::to_string(params.size()));
    }
    for (auto& [name, t] : model.params()) {
      const auto values = params.at(name).get<std::vector<double>>();
      if (values.size() != t.size()) {
        throw ParseError("checkpoint: parameter '" + name + "' has " + std::to_string(values.size()) +
                         " values, expected " + std::to_string(t.size()));
      }
      std::copy(values.begin(), values.end(), t.mutable_values().begin());
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out << model_to_json(model).dump(1) << '\n';
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot read checkpoint " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint " + path.string() + ": " + e.what());
  }
  return model_from_json(doc);
}

}  // namespace dfdg
