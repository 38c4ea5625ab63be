#include "dfdg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "dfdg/errors.hpp"

namespace dfdg {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  bool has_lineage() const { return static_cast<bool>(backward); }
  bool tracks_grad() const { return requires_grad || has_lineage(); }
};

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                         " vs " + to_string(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " +
                         std::to_string(rank) + ", got " + to_string(t.shape()));
  }
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor() : Tensor(Shape{0}, {}) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : node_(std::make_shared<detail::Node>()) {
  if (numel(shape) != values.size()) {
    throw DimensionError("tensor: shape " + to_string(shape) + " holds " +
                         std::to_string(numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  node_->shape = std::move(shape);
  node_->values = std::move(values);
}

Tensor::Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

Tensor Tensor::zeros(Shape shape) {
  const auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::from_op(std::string op, Shape shape, std::vector<double> values,
                       std::vector<Tensor> inputs, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values));
  const bool record =
      g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                    [](const Tensor& t) { return t.tracks_grad(); });
  if (record) {
    out.node_->op = std::move(op);
    out.node_->backward = std::move(backward);
    out.node_->inputs.reserve(inputs.size());
    for (auto& t : inputs) out.node_->inputs.push_back(t.node_);
  }
  return out;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw IndexError("tensor: axis " + std::to_string(axis) + " out of range for " +
                     to_string(shape()));
  }
  return node_->shape[axis];
}

std::size_t Tensor::size() const { return node_->values.size(); }

std::span<const double> Tensor::values() const { return node_->values; }

double Tensor::operator[](std::size_t flat_index) const { return node_->values.at(flat_index); }

double Tensor::item() const {
  if (size() != 1) {
    throw ContractError("tensor: item() on tensor of shape " + to_string(shape()));
  }
  return node_->values[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (has_lineage()) throw ContractError("tensor: requires_grad can only be set on leaves");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::tracks_grad() const { return node_->tracks_grad(); }

bool Tensor::has_lineage() const { return node_->has_lineage(); }

const std::string& Tensor::op() const { return node_->op; }

std::vector<Tensor> Tensor::inputs() const {
  std::vector<Tensor> out;
  out.reserve(node_->inputs.size());
  for (const auto& n : node_->inputs) out.push_back(Tensor(n));
  return out;
}

std::span<double> Tensor::mutable_values() {
  if (has_lineage()) throw ContractError("tensor: cannot mutate a tensor with lineage");
  return node_->values;
}

Tensor Tensor::clone() const {
  Tensor out(node_->shape, node_->values);
  out.node_->requires_grad = node_->requires_grad;
  return out;
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->values); }

// ---- GradMap / backward ----------------------------------------------------

bool GradMap::contains(const Tensor& t) const { return entries_.count(t.node_.get()) > 0; }

std::span<const double> GradMap::at(const Tensor& t) const {
  auto it = entries_.find(t.node_.get());
  if (it == entries_.end()) {
    throw ContractError("grad map: tensor " + to_string(t.shape()) +
                        " was not reached by backward");
  }
  return it->second.grad;
}

Tensor GradMap::tensor(const Tensor& t) const {
  auto g = at(t);
  return Tensor(t.shape(), std::vector<double>(g.begin(), g.end()));
}

GradMap backward(const Tensor& root) {
  if (root.size() != 1) {
    throw ContractError("backward: root must be scalar, got shape " + to_string(root.shape()));
  }
  GradMap result;
  detail::Node* root_node = root.node_.get();
  if (!root_node->tracks_grad()) {
    result.entries_[root_node] = {root.node_, {1.0}};
    return result;
  }

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root_node, 0}};
  visited.insert(root_node);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->tracks_grad() && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<detail::Node*, std::shared_ptr<detail::Node>> owners;
  owners[root_node] = root.node_;
  for (auto* node : order) {
    for (const auto& in : node->inputs) owners.emplace(in.get(), in);
  }

  std::unordered_map<const detail::Node*, std::vector<double>> grads;
  grads[root_node] = {1.0};
  std::vector<std::vector<double>*> input_grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    auto& g = grads[node];
    if (g.empty()) g.assign(node->values.size(), 0.0);
    if (!node->has_lineage()) continue;
    input_grads.clear();
    for (const auto& in : node->inputs) {
      if (!in->tracks_grad()) {
        input_grads.push_back(nullptr);
        continue;
      }
      auto& buf = grads[in.get()];
      if (buf.empty()) buf.assign(in->values.size(), 0.0);
      input_grads.push_back(&buf);
    }
    node->backward(BackwardArgs{node->values, g, input_grads});
  }

  for (auto* node : order) {
    result.entries_[node] = {owners.at(node), std::move(grads[node])};
  }
  return result;
}

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) {
  g_grad_enabled = enabled;
}

GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

// ---- ops -------------------------------------------------------------------

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 2, "affine", "x");
  require_rank(w, 2, "affine", "w");
  require_rank(b, 1, "affine", "b");
  const std::size_t batch = x.dim(0), in = x.dim(1), out = w.dim(1);
  if (w.dim(0) != in || b.dim(0) != out) {
    throw DimensionError("affine: x " + to_string(x.shape()) + ", w " + to_string(w.shape()) +
                         ", b " + to_string(b.shape()) + " do not agree");
  }
  const auto xv = x.values(), wv = w.values(), bv = b.values();
  std::vector<double> y(batch * out, 0.0);
  for (std::size_t i = 0; i < batch; ++i) {
    double* yi = y.data() + i * out;
    for (std::size_t k = 0; k < in; ++k) {
      const double xik = xv[i * in + k];
      const double* wk = wv.data() + k * out;
      for (std::size_t j = 0; j < out; ++j) yi[j] += xik * wk[j];
    }
    for (std::size_t j = 0; j < out; ++j) yi[j] += bv[j];
  }
  return Tensor::from_op(
      "affine", {batch, out}, std::move(y), {x, w, b},
      [x, w, batch, in, out](const BackwardArgs& a) {
        const auto xv = x.values(), wv = w.values();
        const auto g = a.grad_output;
        if (auto* gx = a.grad_inputs[0]) {
          for (std::size_t i = 0; i < batch; ++i) {
            for (std::size_t k = 0; k < in; ++k) {
              double acc = 0.0;
              for (std::size_t j = 0; j < out; ++j) acc += g[i * out + j] * wv[k * out + j];
              (*gx)[i * in + k] += acc;
            }
          }
        }
        if (auto* gw = a.grad_inputs[1]) {
          for (std::size_t i = 0; i < batch; ++i) {
            for (std::size_t k = 0; k < in; ++k) {
              const double xik = xv[i * in + k];
              for (std::size_t j = 0; j < out; ++j) (*gw)[k * out + j] += xik * g[i * out + j];
            }
          }
        }
        if (auto* gb = a.grad_inputs[2]) {
          for (std::size_t i = 0; i < batch; ++i) {
            for (std::size_t j = 0; j < out; ++j) (*gb)[j] += g[i * out + j];
          }
        }
      });
}

Tensor relu(const Tensor& x) {
  const auto xv = x.values();
  std::vector<double> y(xv.size());
  std::transform(xv.begin(), xv.end(), y.begin(), [](double v) { return v < 0.0 ? 0.0 : v; });
  return Tensor::from_op("relu", x.shape(), std::move(y), {x}, [x](const BackwardArgs& a) {
    const auto xv = x.values();
    auto& gx = *a.grad_inputs[0];
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += a.grad_output[i];
    }
  });
}

Tensor softmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "softmax_rows", "logits");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (cols < 2) throw DimensionError("softmax_rows: need at least 2 columns, got " + to_string(logits.shape()));
  const auto lv = logits.values();
  for (double v : lv) {
    if (!std::isfinite(v)) throw NumericError("softmax_rows: non-finite logit");
  }
  std::vector<double> p(lv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = lv.data() + r * cols;
    double* out = p.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      out[c] = std::exp(row[c] - mx);
      total += out[c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[c] /= total;
  }
  return Tensor::from_op("softmax_rows", logits.shape(), std::move(p), {logits},
                         [rows, cols](const BackwardArgs& a) {
                           auto& gx = *a.grad_inputs[0];
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* p = a.output.data() + r * cols;
                             const double* g = a.grad_output.data() + r * cols;
                             double dot = 0.0;
                             for (std::size_t c = 0; c < cols; ++c) dot += g[c] * p[c];
                             for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += p[c] * (g[c] - dot);
                           }
                         });
}

Tensor sum(const Tensor& x) {
  const auto xv = x.values();
  const double total = std::accumulate(xv.begin(), xv.end(), 0.0);
  return Tensor::from_op("sum", {}, {total}, {x}, [](const BackwardArgs& a) {
    auto& gx = *a.grad_inputs[0];
    const double g = a.grad_output[0];
    for (auto& v : gx) v += g;
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> y(a.size());
  std::transform(a.values().begin(), a.values().end(), b.values().begin(), y.begin(), std::plus<>());
  return Tensor::from_op("add", a.shape(), std::move(y), {a, b}, [](const BackwardArgs& args) {
    for (auto* g : args.grad_inputs) {
      if (!g) continue;
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += args.grad_output[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> y(a.size());
  std::transform(a.values().begin(), a.values().end(), b.values().begin(), y.begin(), std::minus<>());
  return Tensor::from_op("sub", a.shape(), std::move(y), {a, b}, [](const BackwardArgs& args) {
    if (auto* ga = args.grad_inputs[0]) {
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += args.grad_output[i];
    }
    if (auto* gb = args.grad_inputs[1]) {
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] -= args.grad_output[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> y(a.size());
  std::transform(a.values().begin(), a.values().end(), b.values().begin(), y.begin(),
                 std::multiplies<>());
  return Tensor::from_op("mul", a.shape(), std::move(y), {a, b}, [a, b](const BackwardArgs& args) {
    const auto av = a.values(), bv = b.values();
    if (auto* ga = args.grad_inputs[0]) {
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += args.grad_output[i] * bv[i];
    }
    if (auto* gb = args.grad_inputs[1]) {
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += args.grad_output[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> y(x.size());
  std::transform(x.values().begin(), x.values().end(), y.begin(),
                 [factor](double v) { return v * factor; });
  return Tensor::from_op("scale", x.shape(), std::move(y), {x}, [factor](const BackwardArgs& a) {
    auto& gx = *a.grad_inputs[0];
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += a.grad_output[i] * factor;
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  auto xv = x.values();
  return Tensor::from_op("reshape", std::move(shape), std::vector<double>(xv.begin(), xv.end()), {x},
                         [](const BackwardArgs& a) {
                           auto& gx = *a.grad_inputs[0];
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += a.grad_output[i];
                         });
}

Tensor conv1d_same(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 3, "conv1d", "x");
  require_rank(w, 3, "conv1d", "w");
  require_rank(b, 1, "conv1d", "b");
  const std::size_t batch = x.dim(0), in_ch = x.dim(1), len = x.dim(2);
  const std::size_t out_ch = w.dim(0), kernel = w.dim(2);
  if (w.dim(1) != in_ch || b.dim(0) != out_ch) {
    throw DimensionError("conv1d: x " + to_string(x.shape()) + ", w " + to_string(w.shape()) +
                         ", b " + to_string(b.shape()) + " do not agree");
  }
  if (kernel % 2 == 0) throw ConfigError("conv1d: kernel must be odd, got " + std::to_string(kernel));
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(kernel / 2);
  const auto slen = static_cast<std::ptrdiff_t>(len);
  const auto xv = x.values(), wv = w.values(), bv = b.values();

  std::vector<double> y(batch * out_ch * len, 0.0);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t o = 0; o < out_ch; ++o) {
      double* yo = y.data() + (n * out_ch + o) * len;
      for (std::size_t i = 0; i < in_ch; ++i) {
        const double* xi = xv.data() + (n * in_ch + i) * len;
        const double* wk = wv.data() + (o * in_ch + i) * kernel;
        for (std::ptrdiff_t t = 0; t < slen; ++t) {
          double acc = 0.0;
          for (std::size_t k = 0; k < kernel; ++k) {
            const std::ptrdiff_t s = t + static_cast<std::ptrdiff_t>(k) - pad;
            if (s >= 0 && s < slen) acc += wk[k] * xi[s];
          }
          yo[t] += acc;
        }
      }
      for (std::size_t t = 0; t < len; ++t) yo[t] += bv[o];
    }
  }

  return Tensor::from_op(
      "conv1d", {batch, out_ch, len}, std::move(y), {x, w, b},
      [x, w, batch, in_ch, out_ch, len, kernel, pad](const BackwardArgs& a) {
        const auto xv = x.values(), wv = w.values();
        const auto slen = static_cast<std::ptrdiff_t>(len);
        auto* gx = a.grad_inputs[0];
        auto* gw = a.grad_inputs[1];
        auto* gb = a.grad_inputs[2];
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t o = 0; o < out_ch; ++o) {
            const double* go = a.grad_output.data() + (n * out_ch + o) * len;
            if (gb) {
              for (std::size_t t = 0; t < len; ++t) (*gb)[o] += go[t];
            }
            for (std::size_t i = 0; i < in_ch; ++i) {
              const std::size_t xoff = (n * in_ch + i) * len;
              const std::size_t woff = (o * in_ch + i) * kernel;
              for (std::ptrdiff_t t = 0; t < slen; ++t) {
                const double g = go[t];
                for (std::size_t k = 0; k < kernel; ++k) {
                  const std::ptrdiff_t s = t + static_cast<std::ptrdiff_t>(k) - pad;
                  if (s < 0 || s >= slen) continue;
                  if (gx) (*gx)[xoff + s] += g * wv[woff + k];
                  if (gw) (*gw)[woff + k] += g * xv[xoff + s];
                }
              }
            }
          }
        }
      });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 3, "global_avg_pool", "x");
  const std::size_t batch = x.dim(0), ch = x.dim(1), len = x.dim(2);
  if (len == 0) throw DimensionError("global_avg_pool: empty length axis");
  const auto xv = x.values();
  std::vector<double> y(batch * ch);
  for (std::size_t r = 0; r < batch * ch; ++r) {
    const double* row = xv.data() + r * len;
    y[r] = std::accumulate(row, row + len, 0.0) / static_cast<double>(len);
  }
  return Tensor::from_op("global_avg_pool", {batch, ch}, std::move(y), {x},
                         [batch, ch, len](const BackwardArgs& a) {
                           auto& gx = *a.grad_inputs[0];
                           const double inv = 1.0 / static_cast<double>(len);
                           for (std::size_t r = 0; r < batch * ch; ++r) {
                             const double g = a.grad_output[r] * inv;
                             for (std::size_t t = 0; t < len; ++t) gx[r * len + t] += g;
                           }
                         });
}

Tensor pick_sum(const Tensor& m, std::span<const int> cols) {
  require_rank(m, 2, "pick_sum", "m");
  const std::size_t rows = m.dim(0), width = m.dim(1);
  if (cols.size() != rows) {
    throw DimensionError("pick_sum: " + std::to_string(cols.size()) + " indices for " +
                         to_string(m.shape()));
  }
  std::vector<std::size_t> flat(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (cols[r] < 0 || static_cast<std::size_t>(cols[r]) >= width) {
      throw IndexError("pick_sum: column " + std::to_string(cols[r]) + " out of range [0, " +
                       std::to_string(width) + ")");
    }
    flat[r] = r * width + static_cast<std::size_t>(cols[r]);
  }
  double total = 0.0;
  for (auto f : flat) total += m.values()[f];
  return Tensor::from_op("pick_sum", {}, {total}, {m}, [flat](const BackwardArgs& a) {
    auto& gm = *a.grad_inputs[0];
    for (auto f : flat) gm[f] += a.grad_output[0];
  });
}

// ---- gradient check ----------------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw ConfigError("grad_check: eps must be positive");
  Tensor leaf = x.detach();
  leaf.set_requires_grad(true);
  const Tensor y = f(leaf);
  if (y.size() != 1) throw ContractError("grad_check: function must return a scalar");
  const GradMap grads = backward(y);
  std::vector<double> analytic(x.size(), 0.0);
  if (grads.contains(leaf)) {
    auto g = grads.at(leaf);
    analytic.assign(g.begin(), g.end());
  }

  NoGradGuard no_grad;
  const auto base = x.values();
  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus(base.begin(), base.end()), minus(base.begin(), base.end());
    plus[i] += eps;
    minus[i] -= eps;
    const double fp = f(Tensor(x.shape(), std::move(plus))).item();
    const double fm = f(Tensor(x.shape(), std::move(minus))).item();
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace dfdg
